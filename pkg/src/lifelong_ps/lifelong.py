"""Sequential-domain training: lifelong (rehearsal + distillation), plain
fine-tuning, and pooled joint training."""
from __future__ import annotations

import copy
import enum
import itertools
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from torch import Tensor

from lifelong_ps import losses as L
from lifelong_ps.evalkit import evaluate_model
from lifelong_ps.memory import (
    ExemplarStore,
    PrototypeLUT,
    SamplingScheme,
    UnlabeledQueue,
    build_prototypes,
    collect_hard_backgrounds,
)
from lifelong_ps.perception import (
    BG,
    FG_UNLABELED,
    NetConfig,
    PersonSearchNet,
    clone_and_freeze,
    encode_boxes,
    match_proposals,
    parameter_checksum,
    to_tensor,
)
from lifelong_ps.synthgen import UNLABELED, DomainDataset, SceneSample

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    LPS = "lps"
    FINETUNE = "finetune"
    JOINT = "joint"


@dataclass(frozen=True)
class TrainConfig:
    batch_new: int = 5
    batch_old_per_domain: int = 2
    epochs_per_domain: int = 5
    first_domain_epochs: int = 20
    first_domain_lr_decay_epoch: int = 15
    joint_epochs: int | None = None  # pooled training; defaults to first_domain_epochs
    joint_lr_decay_epoch: int | None = None
    early_stop_patience: int | None = None
    lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_epoch: int = 3
    lr_decay_factor: float = 0.1
    warmup_steps: int = 500
    mode: Mode = Mode.LPS
    exemplar_fraction: float = 0.02
    sampling: SamplingScheme = SamplingScheme.UNIFORM
    queue_size: int = 1000
    oim_queue_size: int = 1000
    seed: int = 0
    flip: bool = True
    rpn_samples: int = 64
    exemplar_det: bool = True
    grad_clip: float | None = 10.0

    def validate(self) -> None:
        for name in ("batch_new", "epochs_per_domain", "first_domain_epochs", "queue_size", "oim_queue_size", "rpn_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch_old_per_domain < 0:
            raise ValueError("batch_old_per_domain must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 1 <= self.lr_decay_epoch <= self.epochs_per_domain:
            raise ValueError("lr_decay_epoch must lie in [1, epochs_per_domain]")
        if not 0.0 < self.exemplar_fraction < 1.0:
            raise ValueError("exemplar_fraction must lie in (0, 1)")
        if self.joint_epochs is not None and self.joint_epochs < 1:
            raise ValueError("joint_epochs must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        Mode(self.mode)
        SamplingScheme(self.sampling)


@dataclass
class BatchItem:
    scene: SceneSample
    old: bool  # drawn from the exemplar store


def compose_batch(new_scenes: Sequence[SceneSample], exemplar_iters: Sequence[Iterator[SceneSample]], cfg: TrainConfig) -> list[BatchItem]:
    """New-domain scenes followed by ``batch_old_per_domain`` exemplars from
    each old domain."""
    if len(new_scenes) != cfg.batch_new:
        raise ValueError(f"expected {cfg.batch_new} new scenes, got {len(new_scenes)}")
    batch = [BatchItem(s, False) for s in new_scenes]
    for it in exemplar_iters:
        batch.extend(BatchItem(next(it), True) for _ in range(cfg.batch_old_per_domain))
    return batch


def _flip(scene: SceneSample) -> SceneSample:
    W = scene.image.shape[1]
    boxes = scene.gt_boxes.copy()
    boxes[:, [0, 2]] = W - scene.gt_boxes[:, [2, 0]]
    return SceneSample(np.ascontiguousarray(scene.image[:, ::-1]), boxes, scene.gt_identities, scene.domain_id)


class LifelongTrainer:
    """Owns the model pair and every piece of rehearsal state."""

    def __init__(
        self,
        cfg: TrainConfig,
        loss_cfg: L.LossConfig | None = None,
        net_cfg: NetConfig | None = None,
        step_log: Callable[[dict], None] | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.loss_cfg = loss_cfg = loss_cfg or L.LossConfig()
        loss_cfg.validate()
        torch.manual_seed(cfg.seed)
        self.model = PersonSearchNet(net_cfg)
        D = self.model.cfg.embed_dim
        self.old_model: PersonSearchNet | None = None
        self.lut = PrototypeLUT(D)
        self.queue = UnlabeledQueue(cfg.queue_size, D)
        self.exemplars = ExemplarStore(SamplingScheme(cfg.sampling), cfg.exemplar_fraction)
        self.rng = np.random.default_rng(cfg.seed)
        self.domain_index = 0  # number of domains finished
        self.trained: list[DomainDataset] = []
        self.history: list[dict] = []
        self.epoch_checks: list[dict] = []
        self.diagnostics = {"rim_skipped": 0, "oim_skipped": 0, "empty_fg": 0}
        self.step_log = step_log
        self.global_step = 0

    @property
    def mode(self) -> Mode:
        return Mode(self.cfg.mode)

    @property
    def rehearsal(self) -> bool:
        return self.mode is Mode.LPS and self.old_model is not None and len(self.exemplars) > 0

    # -- domain transitions ----------------------------------------------------
    def advance_domain(self) -> None:
        """Freeze a copy of the model just trained, store its domain's
        exemplars, append their prototypes and reseed the unlabeled queue."""
        if not self.trained:
            raise RuntimeError("no finished domain to advance from")
        finished = self.trained[-1]
        self.domain_index = len(self.trained)
        if self.mode is not Mode.LPS:
            return
        self.old_model = clone_and_freeze(self.model)
        ex = self.exemplars.add_domain(finished.domain_id, finished.train, seed=self.cfg.seed + finished.domain_id)
        build_prototypes(self.old_model, ex, self.lut)
        self.queue.clear()
        with torch.no_grad():
            for s in self.exemplars.all_scenes():
                mask = s.gt_identities == UNLABELED
                if mask.any():
                    f, _ = self.old_model.embed(to_tensor([s.image]), [torch.from_numpy(s.gt_boxes[mask])])
                    self.queue.push(f)

    # -- training ----------------------------------------------------------------
    def _lr(self, step_in_domain: int, epoch: int, decay_epoch: int) -> float:
        lr = self.cfg.lr
        if self.cfg.warmup_steps:
            lr *= min(1.0, (step_in_domain + 1) / self.cfg.warmup_steps)
        # decay_epoch is 1-based: "decayed in the 3rd epoch"
        if epoch + 1 >= decay_epoch:
            lr *= self.cfg.lr_decay_factor
        return lr

    def train_domain(
        self,
        dataset: DomainDataset | Sequence[DomainDataset],
        epochs: int | None = None,
        eval_sets: Sequence[DomainDataset] | None = None,
        on_epoch_end: Callable[[int], None] | None = None,
        decay_epoch: int | None = None,
    ) -> None:
        datasets = [dataset] if isinstance(dataset, DomainDataset) else list(dataset)
        first = not self.trained
        if epochs is None:
            epochs = self.cfg.first_domain_epochs if first else self.cfg.epochs_per_domain
        if decay_epoch is None:
            decay_epoch = self.cfg.first_domain_lr_decay_epoch if first else self.cfg.lr_decay_epoch
        scenes = [s for d in datasets for s in d.train]
        identity_ids = sorted({i for d in datasets for i in d.train_identities()})
        cfg = self.cfg
        oim = L.OIMMemory(identity_ids, self.model.cfg.embed_dim, cfg.oim_queue_size, self.loss_cfg.oim_momentum)
        opt = torch.optim.SGD(self.model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        rehearsal = self.rehearsal
        ex_iters = (
            [itertools.cycle(self.exemplars.domains[d]) for d in sorted(self.exemplars.domains)] if rehearsal else []
        )
        steps_per_epoch = len(scenes) // cfg.batch_new
        if steps_per_epoch == 0:
            raise ValueError("train split smaller than one batch")
        old_sum = parameter_checksum(self.old_model) if self.old_model is not None else None
        lut_sum = self.lut.checksum()
        best, stale = -1.0, 0
        step = 0
        self.model.train()
        for epoch in range(epochs):
            order = self.rng.permutation(len(scenes))
            for b in range(steps_per_epoch):
                new = [scenes[i] for i in order[b * cfg.batch_new : (b + 1) * cfg.batch_new]]
                batch = compose_batch(new, ex_iters, cfg)
                for g in opt.param_groups:
                    g["lr"] = self._lr(step, epoch, decay_epoch)
                comps, feats = self._step(batch, oim, rehearsal)
                total = L.total_loss(self.loss_cfg, comps, has_old_data=rehearsal)
                opt.zero_grad(set_to_none=True)
                total.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
                opt.step()
                oim.update(*feats["oim"])
                if rehearsal and len(feats["old_unlabeled"]):
                    self.queue.push(feats["old_unlabeled"])
                if self.step_log is not None:
                    rec = {"step": self.global_step, "domain": datasets[-1].domain_id, "epoch": epoch, "total": float(total.detach())}
                    rec.update({k: float(v.detach()) for k, v in comps.items()})
                    self.step_log(rec)
                step += 1
                self.global_step += 1
            check = {
                "domain_index": self.domain_index,
                "epoch": epoch,
                "old_model": parameter_checksum(self.old_model) if self.old_model is not None else None,
                "lut": self.lut.checksum(),
                "old_model_before": old_sum,
                "lut_before": lut_sum,
            }
            self.epoch_checks.append(check)
            if on_epoch_end is not None:
                on_epoch_end(epoch)
            if first and cfg.early_stop_patience and eval_sets:
                score = float(np.mean([evaluate_model(self.model, d)["map"] for d in eval_sets]))
                if score > best + 1e-4:
                    best, stale = score, 0
                else:
                    stale += 1
                    if stale >= cfg.early_stop_patience:
                        log.info("early stop after epoch %d (val mAP %.3f)", epoch + 1, best)
                        break
        self.trained.extend(datasets)
        self.model.eval()

    def _step(self, batch: list[BatchItem], oim: L.OIMMemory, rehearsal: bool) -> tuple[dict[str, Tensor], dict]:
        cfg = self.cfg
        model = self.model
        net = model.cfg
        scenes = [_flip(it.scene) if cfg.flip and self.rng.random() < 0.5 else it.scene for it in batch]
        is_old = torch.tensor([it.old for it in batch])
        images = to_tensor([s.image for s in scenes])
        feats = model.features(images)
        logits, deltas = model.rpn(feats)

        det_rows = [i for i, it in enumerate(batch) if not it.old or cfg.exemplar_det]
        comps: dict[str, Tensor] = {}
        rpn_losses = [self._rpn_loss(logits[i], deltas[i], scenes[i]) for i in det_rows]

        props = model.proposals_from(logits, deltas)
        boxes_list, assigned_list, n_props = [], [], []
        for p, s in zip(props, scenes):
            gt = torch.from_numpy(s.gt_boxes)
            gt_ids = torch.from_numpy(s.gt_identities)
            boxes = torch.cat([p.boxes, gt]) if len(gt) else p.boxes
            assigned, _ = match_proposals(boxes, gt, gt_ids, net.fg_iou_threshold)
            boxes_list.append(boxes)
            assigned_list.append(assigned)
            n_props.append(len(p))
        unit, _, score_logit = model.embed_features(feats, boxes_list)
        owner = torch.cat([torch.full((len(b),), i, dtype=torch.long) for i, b in enumerate(boxes_list)])
        assigned = torch.cat(assigned_list)
        fg = assigned != BG
        # queues take one feature per unlabeled person (its ground-truth box), not every overlapping proposal
        is_gt = torch.cat([torch.arange(len(b)) >= n for b, n in zip(boxes_list, n_props)])

        det_mask = torch.zeros(len(batch), dtype=torch.bool)
        det_mask[det_rows] = True
        sel = det_mask[owner]
        nae = L.det_loss(score_logit[sel], fg[sel].to(score_logit.dtype))
        comps["det"] = torch.stack(rpn_losses).mean() + nae

        new_rows = ~is_old[owner]
        lab_new = new_rows & (assigned >= 0)
        oim_loss, skipped = oim.loss(unit[lab_new], assigned[lab_new], self.loss_cfg.tau_r)
        self.diagnostics["oim_skipped"] += skipped
        comps["oim"] = oim_loss
        unl_new = new_rows & is_gt & (assigned == FG_UNLABELED)
        out = {"oim": (unit[lab_new].detach(), assigned[lab_new], unit[unl_new].detach()), "old_unlabeled": unit.new_zeros((0, net.embed_dim))}

        if rehearsal:
            old_rows = [i for i, it in enumerate(batch) if it.old]
            old_m = is_old[owner]
            F_mask = old_m & fg
            old_model = self.old_model
            with torch.no_grad():
                old_images = images[old_rows]
                old_feats = old_model.features(old_images)
                old_logits, _ = old_model.rpn(old_feats)
                x_old_all, _, _ = old_model.embed_features(old_feats, [boxes_list[i] for i in old_rows])
            # x_old_all is ordered like the old rows' boxes, which is how they sit in `unit`
            x_old = x_old_all[fg[old_m]]
            x_new = unit[F_mask]
            if not len(x_new):
                self.diagnostics["empty_fg"] += 1
            loss_cfg = self.loss_cfg
            if loss_cfg.use_rkd:
                protos = self.lut.vectors
                if loss_cfg.use_rkd_plus:
                    hard = []
                    for i in old_rows:
                        m = owner == i
                        hb = collect_hard_backgrounds(
                            boxes_list[i], assigned_list[i], unit[m].detach(), torch.from_numpy(scenes[i].gt_boxes), loss_cfg.lambda_b
                        )
                        hard.extend(h.feature for h in hb)
                    hard_t = torch.stack(hard) if hard else None
                    comps["rkd_plus"] = L.rkd_plus_loss(x_old, x_new, protos, hard_t, loss_cfg.tau_d)
                else:
                    comps["rkd"] = L.rkd_loss(x_old, x_new, protos, loss_cfg.tau_d)
            if loss_cfg.use_rim:
                lab_old = old_m & (assigned >= 0)
                rim, skipped = L.rim_loss(unit[lab_old], assigned[lab_old], self.lut.id_tensor, self.lut.vectors, self.queue.features(), loss_cfg.tau_r)
                self.diagnostics["rim_skipped"] += skipped
                comps["rim"] = rim
            if loss_cfg.use_dkd:
                new_old_feats = feats[old_rows]
                k = min(net.pre_nms_top_n, old_logits.shape[1])
                top = old_logits.topk(k, dim=1).indices
                comps["dkd"] = L.dkd_loss(old_feats, new_old_feats, old_logits.gather(1, top), logits[old_rows].gather(1, top))
            out["old_unlabeled"] = unit[old_m & is_gt & (assigned == FG_UNLABELED)].detach()
        return comps, out

    def _rpn_loss(self, logits: Tensor, deltas: Tensor, scene: SceneSample) -> Tensor:
        anchors = self.model.anchors
        gt = torch.from_numpy(scene.gt_boxes)
        n = len(anchors)
        labels = torch.full((n,), -1, dtype=torch.long)
        matched = torch.zeros(n, 4)
        if len(gt):
            from torchvision.ops import box_iou

            ious = box_iou(anchors, gt)
            best, idx = ious.max(dim=1)
            labels[best < 0.3] = 0
            labels[best >= 0.5] = 1
            # every person gets at least its best anchor
            labels[ious.argmax(dim=0)] = 1
            idx[ious.argmax(dim=0)] = torch.arange(len(gt))
            matched = gt[idx]
        else:
            labels[:] = 0
        pos = torch.nonzero(labels == 1).flatten()
        neg = torch.nonzero(labels == 0).flatten()
        n_pos = min(len(pos), self.cfg.rpn_samples // 2)
        pos = pos[torch.from_numpy(self.rng.permutation(len(pos))[:n_pos])]
        n_neg = min(len(neg), self.cfg.rpn_samples - n_pos)
        neg = neg[torch.from_numpy(self.rng.permutation(len(neg))[:n_neg])]
        keep = torch.cat([pos, neg])
        lab = labels[keep]
        target = encode_boxes(anchors[keep], matched[keep]) if len(gt) else torch.zeros(len(keep), 4)
        return L.det_loss(logits[keep], lab, deltas[keep], target)

    # -- evaluation ----------------------------------------------------------------
    def evaluate(self, datasets: Sequence[DomainDataset]) -> dict[str, dict[str, float]]:
        return {str(d.domain_id): evaluate_model(self.model, d) for d in datasets}

    def record_stage(self, trained_domain: int | str, eval_sets: Sequence[DomainDataset]) -> dict:
        entry = {
            "stage": len(self.history),
            "trained_domain": trained_domain,
            "mode": self.mode.value,
            "metrics": self.evaluate(eval_sets),
            "lut_size": len(self.lut),
            "exemplars": {str(k): list(v) for k, v in self.exemplars.indices.items()},
        }
        self.history.append(entry)
        return entry

    def snapshot(self) -> "LifelongTrainer":
        """Deep copy of the full training state (step_log is shared)."""
        cb = self.step_log
        self.step_log = None
        try:
            dup = copy.deepcopy(self)
        finally:
            self.step_log = cb
        dup.step_log = cb
        return dup

    def with_config(self, cfg: TrainConfig | None = None, loss_cfg: L.LossConfig | None = None) -> "LifelongTrainer":
        """Snapshot continuing under different settings (e.g. another mode
        after a shared first domain)."""
        dup = self.snapshot()
        if cfg is not None:
            cfg.validate()
            dup.cfg = cfg
        if loss_cfg is not None:
            loss_cfg.validate()
            dup.loss_cfg = loss_cfg
        return dup


def continue_sequence(
    trainer: LifelongTrainer,
    domains: Sequence[DomainDataset],
    eval_all: bool = True,
    on_stage_end: Callable[[LifelongTrainer], None] | None = None,
) -> LifelongTrainer:
    """Train every domain of ``domains`` that ``trainer`` has not trained yet."""
    done = len(trainer.trained)
    for n in range(done, len(domains)):
        if n > 0 and trainer.domain_index < n:
            trainer.advance_domain()
        d = domains[n]
        eval_sets = list(domains) if eval_all else list(domains[: n + 1])
        trainer.train_domain(d, eval_sets=[d] if n == 0 else None)
        trainer.record_stage(d.domain_id, eval_sets)
        if on_stage_end is not None:
            on_stage_end(trainer)
    return trainer


def train_sequence(
    domains: Sequence[DomainDataset],
    cfg: TrainConfig,
    loss_cfg: L.LossConfig | None = None,
    net_cfg: NetConfig | None = None,
    step_log: Callable[[dict], None] | None = None,
    eval_all: bool = True,
    on_stage_end: Callable[[LifelongTrainer], None] | None = None,
) -> tuple[PersonSearchNet, list[dict], LifelongTrainer]:
    """Train ``domains`` in order under ``cfg.mode``.

    JOINT pools every domain and trains once for ``joint_epochs``.
    """
    if not domains:
        raise ValueError("domain list is empty")
    trainer = LifelongTrainer(cfg, loss_cfg, net_cfg, step_log)
    if trainer.mode is Mode.JOINT:
        trainer.train_domain(
            list(domains),
            epochs=cfg.joint_epochs or cfg.first_domain_epochs,
            decay_epoch=cfg.joint_lr_decay_epoch or cfg.first_domain_lr_decay_epoch,
        )
        trainer.record_stage("joint", list(domains))
        if on_stage_end is not None:
            on_stage_end(trainer)
    else:
        continue_sequence(trainer, domains, eval_all, on_stage_end)
    return trainer.model, trainer.history, trainer


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["mode"] = Mode(cfg.mode).value
    d["sampling"] = SamplingScheme(cfg.sampling).value
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "mode" in d:
        d["mode"] = Mode(d["mode"])
    if "sampling" in d:
        d["sampling"] = SamplingScheme(d["sampling"])
    return TrainConfig(**d)
