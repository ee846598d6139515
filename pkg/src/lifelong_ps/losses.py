"""Training objectives.

Feature-level losses take already extracted, L2-normalized features so that
they can be checked against independent oracles; the training loop in
:mod:`lifelong_ps.lifelong` is responsible for running the old and new models
on the same boxes.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import Tensor

from lifelong_ps.memory import UnlabeledQueue

@dataclass(frozen=True)
class LossConfig:
    tau_d: float = 0.3
    tau_r: float = 0.1
    lambda_b: float = 0.1
    use_dkd: bool = True
    use_rkd_plus: bool = True
    use_rkd_basic: bool = False
    use_rim: bool = True
    oim_momentum: float = 0.5

    def validate(self) -> None:
        if self.tau_d <= 0 or self.tau_r <= 0:
            raise ValueError("temperatures must be positive")
        if self.use_rkd_plus and self.use_rkd_basic:
            raise ValueError("use_rkd_plus and use_rkd_basic are mutually exclusive")
        if not 0.0 <= self.lambda_b < 1.0:
            raise ValueError("lambda_b must lie in [0, 1)")
        if not 0.0 <= self.oim_momentum < 1.0:
            raise ValueError("oim_momentum must lie in [0, 1)")

    @property
    def use_rkd(self) -> bool:
        return self.use_rkd_plus or self.use_rkd_basic


ABLATIONS = {
    "no_dkd": {"use_dkd": False},
    "no_rkd_plus": {"use_rkd_plus": False, "use_rkd_basic": False},
    "rkd_basic": {"use_rkd_plus": False, "use_rkd_basic": True},
    "no_rim": {"use_rim": False},
}


def apply_ablations(cfg: LossConfig, names: list[str] | tuple[str, ...]) -> LossConfig:
    for name in names:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        cfg = replace(cfg, **ABLATIONS[name])
    return cfg


def similarity_distribution(x: Tensor, refs: Tensor, tau: float) -> Tensor:
    """Softmax over <ref_k, x>/tau for each row of ``x`` (N x D) -> N x K."""
    if refs.ndim != 2 or refs.shape[0] == 0:
        raise ValueError("no references")
    return torch.softmax(x @ refs.t() / tau, dim=-1)


def _kl_rows(x_old: Tensor, x_new: Tensor, refs: Tensor, tau: float) -> Tensor:
    log_q = torch.log_softmax(x_old @ refs.t() / tau, dim=-1)
    log_p = torch.log_softmax(x_new @ refs.t() / tau, dim=-1)
    # log_softmax stays finite, so underflowed q terms contribute exactly 0
    return (log_q.exp() * (log_q - log_p)).sum(-1)


def rkd_loss(x_old: Tensor, x_new: Tensor, prototypes: Tensor, tau_d: float = 0.3) -> Tensor:
    """Prototype-based re-ID distillation.

    KL(q_i || p_i) between the old- and new-model similarity distributions
    over the stored prototypes, summed over proposals and normalized by
    |proposals| * |prototypes|. ``x_old`` is detached here.
    """
    if len(x_new) == 0 or len(prototypes) == 0:
        return x_new.new_zeros(())
    kl = _kl_rows(x_old.detach(), x_new, prototypes.detach(), tau_d)
    return kl.sum() / (len(x_new) * len(prototypes))


def rkd_plus_loss(x_old: Tensor, x_new: Tensor, prototypes: Tensor, hard_bg: Tensor | None, tau_d: float = 0.3) -> Tensor:
    """rkd_loss over prototypes plus hard-background features."""
    if hard_bg is None or len(hard_bg) == 0:
        return rkd_loss(x_old, x_new, prototypes, tau_d)
    refs = torch.cat([prototypes, hard_bg.to(prototypes.dtype)], dim=0)
    return rkd_loss(x_old, x_new, refs, tau_d)


def _matching_ce(x: Tensor, targets: Tensor, refs: Tensor, tau: float) -> Tensor:
    logits = x @ refs.t() / tau
    return F.cross_entropy(logits, targets, reduction="mean")


def rim_loss(
    x_new: Tensor,
    labels: Tensor,
    lut_ids: Tensor,
    prototypes: Tensor,
    queue: Tensor | None,
    tau_r: float = 0.1,
) -> tuple[Tensor, int]:
    """Rehearsal instance matching: cross-entropy of each labeled feature
    against its own prototype, with the other prototypes and the unlabeled
    queue as negatives.

    Returns ``(loss, skipped)`` where ``skipped`` counts proposals whose
    identity has no prototype.
    """
    slot, known = lookup_slots(lut_ids, labels)
    skipped = int((~known).sum())
    if not bool(known.any()):
        return x_new.new_zeros(()), skipped
    refs = prototypes.detach()
    if queue is not None and len(queue):
        refs = torch.cat([refs, queue.detach().to(refs.dtype)], dim=0)
    return _matching_ce(x_new[known], slot[known], refs, tau_r), skipped


def lookup_slots(lut_ids: Tensor, labels: Tensor) -> tuple[Tensor, Tensor]:
    """Row index of each label in ``lut_ids`` and a mask of labels found."""
    if len(lut_ids) == 0 or len(labels) == 0:
        return torch.zeros(len(labels), dtype=torch.long), torch.zeros(len(labels), dtype=torch.bool)
    eq = labels.view(-1, 1) == lut_ids.view(1, -1)
    known = eq.any(dim=1)
    slot = eq.to(torch.long).argmax(dim=1)
    return slot, known


def oim_loss(
    x: Tensor,
    labels: Tensor,
    lut_ids: Tensor,
    lut: Tensor,
    queue: Tensor | None,
    tau: float = 0.1,
) -> tuple[Tensor, int]:
    """Online instance matching over the current domain's LUT and queue.

    Same form as :func:`rim_loss`; the LUT here is the live, momentum-updated
    table of the domain being trained (see :class:`OIMMemory`).
    """
    return rim_loss(x, labels, lut_ids, lut, queue, tau)


class OIMMemory:
    """Momentum-updated identity table plus FIFO queue for one domain."""

    def __init__(self, identity_ids: list[int], dim: int, queue_size: int = 1000, momentum: float = 0.5, dtype=torch.float32):
        self.ids = torch.tensor(sorted(identity_ids), dtype=torch.long)
        self.lut = torch.zeros(len(self.ids), dim, dtype=dtype)
        self.momentum = momentum
        self.queue = UnlabeledQueue(queue_size, dim, dtype=dtype)

    def loss(self, x: Tensor, labels: Tensor, tau: float) -> tuple[Tensor, int]:
        return oim_loss(x, labels, self.ids, self.lut, self.queue.features(), tau)

    @torch.no_grad()
    def update(self, x: Tensor, labels: Tensor, unlabeled: Tensor | None = None) -> None:
        slot, known = lookup_slots(self.ids, labels)
        for s, f in zip(slot[known].tolist(), x.detach()[known]):
            v = self.momentum * self.lut[s] + (1.0 - self.momentum) * f.to(self.lut.dtype)
            self.lut[s] = v / v.norm().clamp_min(1e-12)
        if unlabeled is not None and len(unlabeled):
            self.queue.push(unlabeled.detach())


def dkd_loss(old_feats: Tensor, new_feats: Tensor, old_objectness: Tensor, new_objectness: Tensor) -> Tensor:
    """Detection distillation: mean squared difference of backbone feature
    maps plus mean squared difference of objectness logits, the latter taken
    on the old model's proposal anchors."""
    feat = ((new_feats - old_feats.detach()) ** 2).mean() if old_feats.numel() else new_feats.new_zeros(())
    obj = ((new_objectness - old_objectness.detach()) ** 2).mean() if old_objectness.numel() else new_feats.new_zeros(())
    return feat + obj


def smooth_l1(x: Tensor, beta: float) -> Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def det_loss(
    logits: Tensor,
    labels: Tensor,
    pred_deltas: Tensor | None = None,
    target_deltas: Tensor | None = None,
    beta: float = 1.0 / 9,
) -> Tensor:
    """Binary objectness cross-entropy (mean over samples) plus smooth-L1
    box regression summed over foreground samples and divided by their count."""
    if len(logits) == 0:
        return logits.new_zeros(())
    cls = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))
    if pred_deltas is None or target_deltas is None:
        return cls
    fg = labels > 0
    nfg = int(fg.sum())
    if nfg == 0:
        return cls
    reg = smooth_l1(pred_deltas[fg] - target_deltas[fg], beta).sum() / nfg
    return cls + reg


def total_loss(cfg: LossConfig, components: dict[str, Tensor], has_old_data: bool) -> Tensor:
    """Unweighted sum of the enabled components.

    Rehearsal terms count only while old data exists; missing components are
    treated as zero.
    """
    keys = ["det", "oim"]
    if has_old_data:
        if cfg.use_dkd:
            keys.append("dkd")
        if cfg.use_rkd_plus:
            keys.append("rkd_plus")
        elif cfg.use_rkd_basic:
            keys.append("rkd")
        if cfg.use_rim:
            keys.append("rim")
    terms = [components[k] for k in keys if k in components]
    if not terms:
        return torch.zeros(())
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
