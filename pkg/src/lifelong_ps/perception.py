"""Toy end-to-end person-search network.

A small shared conv backbone feeds two heads: an anchor-grid objectness /
box-regression head that produces proposals, and a norm-aware embedding head
that turns RoI-pooled features into a unit-norm identity vector plus a
detection score taken from the standardized vector norm.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision.ops import box_iou, nms, roi_align

BG = -2
FG_UNLABELED = -1  # same sentinel as synthgen.UNLABELED
MIN_BOX_AREA = 1.0


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    image_size: tuple[int, int] = (64, 64)
    channels: tuple[int, int, int] = (16, 32, 48)
    embed_dim: int = 32
    hidden_dim: int = 128
    anchor_heights: tuple[float, ...] = (16.0, 22.0, 30.0, 40.0)
    anchor_aspect: float = 0.42
    pre_nms_top_n: int = 120
    post_nms_top_n: int = 20
    nms_iou: float = 0.5
    fg_iou_threshold: float = 0.5
    roi_size: tuple[int, int] = (8, 4)

    @property
    def stride(self) -> int:
        return 4


@dataclass
class ProposalSet:
    """Proposals of one image; ``assigned`` holds an identity id (FG),
    FG_UNLABELED or BG, and ``iou`` the best IoU against ground truth."""

    boxes: Tensor
    objectness: Tensor
    assigned: Tensor = field(default=None)  # type: ignore[assignment]
    iou: Tensor = field(default=None)  # type: ignore[assignment]

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def fg_mask(self) -> Tensor:
        return self.assigned != BG

    @property
    def bg_mask(self) -> Tensor:
        return self.assigned == BG


def match_proposals(boxes: Tensor, gt_boxes: Tensor, gt_ids: Tensor, fg_iou_threshold: float = 0.5) -> tuple[Tensor, Tensor]:
    """Assign each box to its best-overlapping ground truth.

    Returns ``(assigned, iou)``; boxes under the threshold become BG.
    """
    n = len(boxes)
    if len(gt_boxes) == 0 or n == 0:
        return torch.full((n,), BG, dtype=torch.long), torch.zeros(n, dtype=boxes.dtype)
    ious = box_iou(boxes, gt_boxes.to(boxes.dtype))
    best, idx = ious.max(dim=1)
    assigned = gt_ids.to(torch.long)[idx].clone()
    assigned[best < fg_iou_threshold] = BG
    return assigned, best


def make_anchors(cfg: NetConfig) -> Tensor:
    H, W = cfg.image_size
    s = cfg.stride
    ys = (torch.arange(H // s, dtype=torch.float32) + 0.5) * s
    xs = (torch.arange(W // s, dtype=torch.float32) + 0.5) * s
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    hs = torch.tensor(cfg.anchor_heights)
    ws = hs * cfg.anchor_aspect
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    # (cells, A, 4) flattened cell-major to line up with the conv head layout
    anchors = torch.stack([cx - ws / 2, cy - hs / 2, cx + ws / 2, cy + hs / 2], dim=-1)
    return anchors.reshape(-1, 4)


def encode_boxes(anchors: Tensor, boxes: Tensor) -> Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    return torch.stack([(bx - ax) / aw, (by - ay) / ah, torch.log(bw / aw), torch.log(bh / ah)], dim=-1)


def decode_boxes(anchors: Tensor, deltas: Tensor) -> Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    dw = deltas[:, 2].clamp(max=4.0)
    dh = deltas[:, 3].clamp(max=4.0)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * torch.exp(dw)
    h = ah * torch.exp(dh)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def clip_boxes(boxes: Tensor, image_size: tuple[int, int]) -> Tensor:
    H, W = image_size
    x = boxes[:, 0::2].clamp(0, W)
    y = boxes[:, 1::2].clamp(0, H)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=-1)


def _block(cin: int, cout: int) -> list[nn.Module]:
    # GroupNorm keeps outputs independent of batch composition
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(4, cout), nn.ReLU(inplace=True)]


class PersonSearchNet(nn.Module):
    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetConfig()
        c0, c1, c2 = cfg.channels
        self.backbone = nn.Sequential(
            *_block(3, c0), *_block(c0, c0), nn.MaxPool2d(2),
            *_block(c0, c1), *_block(c1, c1), nn.MaxPool2d(2),
            *_block(c1, c2),
        )
        A = len(cfg.anchor_heights)
        self.rpn_conv = nn.Conv2d(c2, c2, 3, padding=1)
        self.rpn_cls = nn.Conv2d(c2, A, 1)
        self.rpn_reg = nn.Conv2d(c2, 4 * A, 1)
        rh, rw = cfg.roi_size
        self.embed_head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(c2 * rh * rw, cfg.hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.hidden_dim, cfg.embed_dim),
            nn.BatchNorm1d(cfg.embed_dim),
        )
        # standardizes the embedding norm before the sigmoid detection score
        self.norm_bn = nn.BatchNorm1d(1)
        self.register_buffer("anchors", make_anchors(cfg), persistent=False)
        for m in self.rpn_cls, self.rpn_reg:
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    # -- stages ------------------------------------------------------------
    def features(self, images: Tensor) -> Tensor:
        """images: B x 3 x H x W."""
        return self.backbone(images)

    def rpn(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """Objectness logits (B x N) and box deltas (B x N x 4) per anchor."""
        B = feats.shape[0]
        h = F.relu(self.rpn_conv(feats))
        logits = self.rpn_cls(h).permute(0, 2, 3, 1).reshape(B, -1)
        deltas = self.rpn_reg(h).permute(0, 2, 3, 1).reshape(B, -1, 4)
        return logits, deltas

    def proposals_from(self, logits: Tensor, deltas: Tensor) -> list[ProposalSet]:
        cfg = self.cfg
        out = []
        with torch.no_grad():
            for lg, dl in zip(logits, deltas):
                boxes = clip_boxes(decode_boxes(self.anchors, dl), cfg.image_size)
                scores = torch.sigmoid(lg)
                wh = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
                keep = torch.nonzero(wh >= 4 * MIN_BOX_AREA).squeeze(1)
                boxes, scores = boxes[keep], scores[keep]
                order = scores.argsort(descending=True, stable=True)[: cfg.pre_nms_top_n]
                boxes, scores = boxes[order], scores[order]
                keep = nms(boxes, scores, cfg.nms_iou)[: cfg.post_nms_top_n]
                out.append(ProposalSet(boxes[keep].contiguous(), scores[keep].contiguous()))
        return out

    def embed_features(self, feats: Tensor, boxes: Sequence[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
        """Embed boxes given backbone features.

        Returns unit-norm identity features (N x D), detection scores (N) and
        the pre-sigmoid score logits (N), concatenated over images in order.
        """
        for b in boxes:
            if len(b) and bool((((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])) < MIN_BOX_AREA).any()):
                raise ValueError("degenerate box (area below minimum)")
        rois = [b.to(feats.dtype) for b in boxes]
        n = sum(len(b) for b in rois)
        D = self.cfg.embed_dim
        if n == 0:
            z = feats.new_zeros((0,))
            return feats.new_zeros((0, D)), z, z
        pooled = roi_align(feats, rois, self.cfg.roi_size, spatial_scale=1.0 / self.cfg.stride, sampling_ratio=2, aligned=True)
        single = self.training and n == 1
        if single:
            # batch statistics are undefined for a single box
            self._set_bn_eval(True)
        raw = self.embed_head(pooled)
        norms = raw.norm(dim=1, keepdim=True).clamp_min(1e-12)
        unit = raw / norms
        logit = self.norm_bn(norms).squeeze(1)
        if single:
            self._set_bn_eval(False)
        return unit, torch.sigmoid(logit), logit

    def _set_bn_eval(self, on: bool) -> None:
        for m in (self.embed_head[-1], self.norm_bn):
            m.train(not on)

    # -- public API ----------------------------------------------------------
    def propose(self, images: Tensor) -> list[ProposalSet]:
        logits, deltas = self.rpn(self.features(images))
        return self.proposals_from(logits, deltas)

    def embed(self, images: Tensor, boxes: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
        unit, score, _ = self.embed_features(self.features(images), boxes)
        return unit, score

    @torch.no_grad()
    def detect(self, images: Tensor) -> list[tuple[Tensor, Tensor, Tensor]]:
        """(boxes, scores, features) per image, in eval mode."""
        was = self.training
        self.eval()
        feats = self.features(images)
        props = self.proposals_from(*self.rpn(feats))
        unit, score, _ = self.embed_features(feats, [p.boxes for p in props])
        self.train(was)
        out = []
        i = 0
        for p in props:
            n = len(p)
            out.append((p.boxes, score[i : i + n], unit[i : i + n]))
            i += n
        return out


def to_tensor(images: Sequence[np.ndarray] | np.ndarray, dtype: torch.dtype = torch.float32) -> Tensor:
    """Stack H x W x 3 arrays into a B x 3 x H x W tensor."""
    arr = np.stack(list(images)) if not isinstance(images, np.ndarray) else images
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).to(dtype)


def clone_and_freeze(model: PersonSearchNet) -> PersonSearchNet:
    frozen = copy.deepcopy(model)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: PersonSearchNet, path: str | Path, domain_index: int, config_hash: str = "", extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path / "params.npz", **arrays)
    manifest = {
        "net": asdict(model.cfg),
        "domain_index": domain_index,
        "config_hash": config_hash,
        "params": {k: list(v.shape) for k, v in arrays.items()},
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def net_config_from_dict(d: dict) -> NetConfig:
    return NetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def load_checkpoint(path: str | Path) -> tuple[PersonSearchNet, dict]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise CheckpointError(f"missing checkpoint manifest in {path}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    model = PersonSearchNet(net_config_from_dict(manifest["net"]))
    with np.load(path / "params.npz") as arrays:
        state = model.state_dict()
        for name, t in state.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            if tuple(arrays[name].shape) != tuple(t.shape):
                raise CheckpointError(f"shape mismatch for {name!r}: {arrays[name].shape} vs {tuple(t.shape)}")
            state[name] = torch.from_numpy(arrays[name].copy())
    model.load_state_dict(state)
    model.eval()
    return model, manifest
