"""Rehearsal state: exemplar sampling, the prototype LUT, hard-background
memory and the circular queue of unlabeled features."""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor
from torchvision.ops import box_iou

from lifelong_ps.synthgen import UNLABELED, SceneSample


class SamplingScheme(str, enum.Enum):
    UNIFORM = "uniform"
    RANDOM = "random"
    MAX_BBOX = "max_bbox"
    MAX_ID = "max_id"


def exemplar_count(n_train: int, fraction: float) -> int:
    # round half up; at least one scene per old domain
    return max(1, int(math.floor(fraction * n_train + 0.5)))


def exemplar_indices(scenes: Sequence[SceneSample], scheme: SamplingScheme | str, fraction: float = 0.02, seed: int = 0) -> list[int]:
    scheme = SamplingScheme(scheme)
    n = len(scenes)
    if n == 0:
        raise ValueError("cannot sample exemplars from an empty train split")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    m = min(n, exemplar_count(n, fraction))
    if scheme is SamplingScheme.UNIFORM:
        return [i * n // m for i in range(m)]
    if scheme is SamplingScheme.RANDOM:
        rng = np.random.default_rng(seed)
        return sorted(int(i) for i in rng.choice(n, size=m, replace=False))
    if scheme is SamplingScheme.MAX_BBOX:
        counts = [len(s.gt_boxes) for s in scenes]
    else:
        counts = [len(s.labeled_ids) for s in scenes]
    # ties go to the lower scene index
    order = sorted(range(n), key=lambda i: (-counts[i], i))
    return sorted(order[:m])


def sample_exemplars(scenes: Sequence[SceneSample], scheme: SamplingScheme | str, fraction: float = 0.02, seed: int = 0) -> list[SceneSample]:
    return [scenes[i] for i in exemplar_indices(scenes, scheme, fraction, seed)]


@dataclass
class ExemplarStore:
    scheme: SamplingScheme = SamplingScheme.UNIFORM
    fraction: float = 0.02
    domains: dict[int, tuple[SceneSample, ...]] = field(default_factory=dict)
    indices: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def add_domain(self, domain_id: int, scenes: Sequence[SceneSample], seed: int = 0) -> tuple[SceneSample, ...]:
        if domain_id in self.domains:
            raise ValueError(f"exemplars for domain {domain_id} already stored")
        idx = exemplar_indices(scenes, self.scheme, self.fraction, seed)
        self.indices[domain_id] = tuple(idx)
        self.domains[domain_id] = tuple(scenes[i] for i in idx)
        return self.domains[domain_id]

    def __len__(self) -> int:
        return sum(len(v) for v in self.domains.values())

    def all_scenes(self) -> list[SceneSample]:
        return [s for d in sorted(self.domains) for s in self.domains[d]]


class PrototypeLUT:
    """Ordered identity -> unit-norm prototype table.

    Frozen while a new domain trains; :meth:`extend` is only allowed at a
    domain transition (call :meth:`unfreeze` first).
    """

    def __init__(self, dim: int, dtype: torch.dtype = torch.float32):
        self.dim = dim
        self.ids: list[int] = []
        self.vectors = torch.zeros(0, dim, dtype=dtype)
        self.frozen = False

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def id_tensor(self) -> Tensor:
        return torch.tensor(self.ids, dtype=torch.long)

    def unfreeze(self) -> None:
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True

    def extend(self, ids: Sequence[int], vectors: Tensor) -> None:
        if self.frozen:
            raise RuntimeError("prototype LUT is frozen")
        if len(ids) != len(vectors):
            raise ValueError("ids and vectors differ in length")
        dup = set(ids) & set(self.ids)
        if dup:
            raise ValueError(f"identities already stored: {sorted(dup)[:5]}")
        self.ids.extend(int(i) for i in ids)
        self.vectors = torch.cat([self.vectors, vectors.detach().to(self.vectors.dtype)], dim=0)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.ids, dtype=np.int64).tobytes())
        h.update(self.vectors.contiguous().numpy().tobytes())
        return h.hexdigest()

    def state(self) -> dict:
        return {"ids": list(self.ids), "vectors": self.vectors.numpy().copy(), "frozen": self.frozen}

    @classmethod
    def from_state(cls, state: dict) -> "PrototypeLUT":
        vec = torch.as_tensor(np.asarray(state["vectors"]))
        lut = cls(vec.shape[1] if vec.ndim == 2 else 0, dtype=vec.dtype)
        lut.ids = [int(i) for i in state["ids"]]
        lut.vectors = vec.reshape(len(lut.ids), -1)
        lut.frozen = bool(state["frozen"])
        return lut


def aggregate_prototypes(ids: Sequence[int], features: Tensor) -> tuple[list[int], Tensor]:
    """L2-normalized mean feature of each identity, ids in ascending order."""
    uniq = sorted(set(int(i) for i in ids))
    if not uniq:
        return [], features.new_zeros((0, features.shape[-1]))
    idx = torch.tensor([int(i) for i in ids])
    protos = []
    for u in uniq:
        m = features[idx == u].mean(dim=0)
        protos.append(m / m.norm().clamp_min(1e-12))
    return uniq, torch.stack(protos)


@torch.no_grad()
def build_prototypes(frozen_model, exemplars: Sequence[SceneSample], lut: PrototypeLUT | None = None) -> PrototypeLUT:
    """Append prototypes of the labeled exemplar identities to ``lut``.

    Features come from the frozen old model on ground-truth boxes.
    """
    from lifelong_ps.perception import to_tensor

    if not exemplars:
        raise ValueError("no exemplar scenes")
    lut = lut if lut is not None else PrototypeLUT(frozen_model.cfg.embed_dim)
    ids: list[int] = []
    feats: list[Tensor] = []
    was = frozen_model.training
    frozen_model.eval()
    for s in exemplars:
        mask = s.gt_identities != UNLABELED
        if not mask.any():
            continue
        boxes = torch.from_numpy(s.gt_boxes[mask])
        f, _ = frozen_model.embed(to_tensor([s.image]), [boxes])
        ids.extend(int(i) for i in s.gt_identities[mask])
        feats.append(f)
    frozen_model.train(was)
    new_ids, protos = aggregate_prototypes(ids, torch.cat(feats)) if feats else ([], None)
    # identities already in the table keep their original prototype
    keep = [k for k, i in enumerate(new_ids) if i not in set(lut.ids)]
    lut.unfreeze()
    if keep:
        lut.extend([new_ids[k] for k in keep], protos[keep])
    lut.freeze()
    return lut


@dataclass
class HardBackground:
    feature: Tensor
    box: Tensor
    iou: float


def collect_hard_backgrounds(
    boxes: Tensor,
    assigned: Tensor,
    features: Tensor,
    gt_boxes: Tensor,
    lambda_b: float = 0.1,
    bg_code: int = -2,
) -> list[HardBackground]:
    """Background proposals whose best IoU with a person exceeds ``lambda_b``."""
    if len(gt_boxes) == 0 or len(boxes) == 0:
        return []
    best = box_iou(boxes.to(torch.float64), gt_boxes.to(torch.float64)).max(dim=1).values
    keep = (assigned == bg_code) & (best > lambda_b)
    return [HardBackground(features[i].detach(), boxes[i].detach(), float(best[i])) for i in torch.nonzero(keep).flatten().tolist()]


class UnlabeledQueue:
    """Fixed-capacity FIFO ring buffer of unit-norm features."""

    def __init__(self, capacity: int = 1000, dim: int = 32, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._buf = torch.zeros(capacity, dim, dtype=dtype)
        self._write = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, features: Tensor) -> None:
        for f in features.detach():
            self._buf[self._write] = f.to(self._buf.dtype)
            self._write = (self._write + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def features(self) -> Tensor:
        """Stored features, oldest first."""
        if self._size < self.capacity:
            return self._buf[: self._size].clone()
        return torch.cat([self._buf[self._write :], self._buf[: self._write]]).clone()

    def clear(self) -> None:
        self._write = 0
        self._size = 0
        self._buf.zero_()

    def state(self) -> dict:
        return {"capacity": self.capacity, "features": self.features().numpy()}

    @classmethod
    def from_state(cls, state: dict) -> "UnlabeledQueue":
        feats = torch.as_tensor(np.asarray(state["features"]))
        dim = feats.shape[1] if feats.ndim == 2 and feats.shape[0] else int(state.get("dim", 32))
        q = cls(int(state["capacity"]), dim, dtype=feats.dtype if feats.numel() else torch.float32)
        if feats.numel():
            q.push(feats)
        return q
