"""Synthetic multi-domain person-search datasets.

Every scene is a small RGB image with a handful of person glyphs composited
over a domain-specific background. A glyph's look is driven by an appearance
vector that belongs to its identity (plus a little per-instance jitter), so
re-identification is learnable while each domain keeps its own style.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

UNLABELED = -1
ID_STRIDE = 10_000
APPEARANCE_DIM = 8  # top rgb, bottom rgb, stripe depth, body width
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
ANNOTATIONS = "annotations.jsonl"

_SKIN = np.array([0.85, 0.68, 0.55], dtype=np.float32)


class SpecError(ValueError):
    """A DomainSpec violates its invariants."""


class DatasetError(RuntimeError):
    """A dataset directory cannot be loaded."""


@dataclass(frozen=True)
class DomainStyle:
    background: tuple[float, float, float] = (0.2, 0.2, 0.2)
    background_noise: float = 0.04
    clutter: int = 3
    person_height: tuple[float, float] = (18.0, 30.0)
    persons_per_scene: tuple[int, int] = (2, 4)
    appearance_center: tuple[float, ...] = (0.5,) * APPEARANCE_DIM
    appearance_spread: tuple[float, ...] = (0.5,) * APPEARANCE_DIM


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    style: DomainStyle = field(default_factory=DomainStyle)
    num_scenes: int = 100
    num_identities: int = 10
    unlabeled_fraction: float = 0.2
    seed: int = 0
    num_test_scenes: int | None = None
    image_size: tuple[int, int] = (64, 64)
    jitter: float = 0.03
    min_identity_distance: float = 0.35
    passers_per_identity: int = 4
    queries_per_identity: int = 3

    @property
    def test_scenes(self) -> int:
        if self.num_test_scenes is not None:
            return self.num_test_scenes
        return max(2, self.num_scenes // 3)

    def validate(self) -> None:
        st = self.style
        h, w = self.image_size
        if self.domain_id < 0:
            raise SpecError("domain_id must be >= 0")
        if self.num_identities < 1 or self.num_scenes < 1:
            raise SpecError("num_identities and num_scenes must be >= 1")
        if self.num_identities >= ID_STRIDE:
            raise SpecError(f"num_identities must be < {ID_STRIDE}")
        if not 0.0 <= self.unlabeled_fraction < 1.0:
            raise SpecError("unlabeled_fraction must lie in [0, 1)")
        if self.passers_per_identity < 1:
            raise SpecError("passers_per_identity must be >= 1")
        if self.queries_per_identity < 1:
            raise SpecError("queries_per_identity must be >= 1")
        if self.test_scenes < 2:
            raise SpecError("need at least 2 test scenes")
        if len(st.appearance_center) != APPEARANCE_DIM or len(st.appearance_spread) != APPEARANCE_DIM:
            raise SpecError(f"appearance vectors must have {APPEARANCE_DIM} entries")
        lo, hi = st.person_height
        pmin, pmax = st.persons_per_scene
        if not 0 < lo <= hi:
            raise SpecError("person_height must satisfy 0 < min <= max")
        if hi > h - 2:
            raise SpecError(f"person height {hi} does not fit in a {h}px image")
        if not 0 <= pmin <= pmax:
            raise SpecError("persons_per_scene must satisfy 0 <= min <= max")
        # smallest glyph is lo tall and 0.3*lo wide; keeping every pair under 90%
        # mutual overlap needs at least a tenth of each glyph to stay visible
        min_area = lo * 0.3 * lo
        if pmax * min_area * 0.1 > h * w:
            raise SpecError(
                f"{pmax} persons per scene cannot fit a {h}x{w} image without >90% overlap"
            )


@dataclass
class SceneSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    gt_boxes: np.ndarray  # N x 4 float32 (x1, y1, x2, y2)
    gt_identities: np.ndarray  # N int64, UNLABELED for withheld labels
    domain_id: int
    appearances: np.ndarray | None = None  # N x APPEARANCE_DIM rendered appearance, generator ground truth

    def __post_init__(self) -> None:
        if len(self.gt_boxes) != len(self.gt_identities):
            raise ValueError("gt_boxes and gt_identities differ in length")
        if self.appearances is not None and len(self.appearances) != len(self.gt_boxes):
            raise ValueError("appearances and gt_boxes differ in length")

    @property
    def labeled_ids(self) -> list[int]:
        return [int(i) for i in self.gt_identities if i != UNLABELED]


@dataclass
class DomainDataset:
    spec: DomainSpec
    train: list[SceneSample]
    test_gallery: list[SceneSample]
    test_queries: list[tuple[int, int]]

    @property
    def domain_id(self) -> int:
        return self.spec.domain_id

    def train_identities(self) -> list[int]:
        return sorted({i for s in self.train for i in s.labeled_ids})


def global_identity(domain_id: int, local_id: int) -> int:
    return domain_id * ID_STRIDE + local_id


def _identity_appearances(spec: DomainSpec, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    center = np.asarray(spec.style.appearance_center, dtype=np.float64)
    spread = np.asarray(spec.style.appearance_spread, dtype=np.float64)
    target = spec.min_identity_distance
    out: list[np.ndarray] = []
    while len(out) < spec.num_identities:
        for _ in range(2000):
            cand = np.clip(center + spread * rng.uniform(-1.0, 1.0, APPEARANCE_DIM), 0.0, 1.0)
            if all(np.linalg.norm(cand - o) >= target for o in out):
                out.append(cand)
                break
        else:
            # the requested separation is too tight for this spread; relax it
            target *= 0.8
    arr = np.stack(out)
    if len(arr) > 1:
        d = np.linalg.norm(arr[:, None] - arr[None], axis=-1)
        d_min = float(d[np.triu_indices(len(arr), 1)].min())
    else:
        d_min = float(target)
    return arr, d_min


def _render_person(img: np.ndarray, box: np.ndarray, app: np.ndarray) -> None:
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    h = y2 - y1
    top = app[0:3].astype(np.float32)
    bottom = app[3:6].astype(np.float32)
    stripe = float(app[6])
    head_end = y1 + max(1, int(round(0.2 * h)))
    torso_end = y1 + max(2, int(round(0.6 * h)))
    w = x2 - x1
    hx1 = x1 + int(round(0.25 * w))
    hx2 = max(hx1 + 1, x2 - int(round(0.25 * w)))
    img[y1:head_end, hx1:hx2] = _SKIN
    img[head_end:torso_end, x1:x2] = top
    dark = top * (1.0 - stripe)
    img[head_end + 1 : torso_end : 3, x1:x2] = dark
    gap = max(1, int(round(0.15 * w)))
    mid = (x1 + x2) // 2
    img[torso_end:y2, x1 : max(x1 + 1, mid - gap // 2)] = bottom
    img[torso_end:y2, min(x2 - 1, mid + (gap + 1) // 2) : x2] = bottom


def _box_iou(a: np.ndarray, b: np.ndarray) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter))


class _Deck:
    """Cycles through shuffled identities so every identity gets drawn."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.cards: list[int] = []

    def draw(self, k: int) -> list[int]:
        k = min(k, self.n)
        picked: list[int] = []
        while len(picked) < k:
            if not self.cards:
                self.cards = list(self.rng.permutation(self.n))
            c = int(self.cards.pop())
            if c in picked:
                # put it back at the bottom; the uniqueness prior forbids repeats
                self.cards.insert(0, c)
                if all(x in picked for x in self.cards):
                    self.cards = []
                continue
            picked.append(c)
        return picked


def _render_scene(
    spec: DomainSpec,
    rng: np.random.Generator,
    deck: _Deck,
    appearances: np.ndarray,
    passers: np.ndarray,
    jitter_cap: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    st = spec.style
    H, W = spec.image_size
    img = np.empty((H, W, 3), dtype=np.float32)
    img[:] = np.asarray(st.background, dtype=np.float32)
    for _ in range(st.clutter):
        cw, ch = rng.uniform(0.15, 0.45) * W, rng.uniform(0.05, 0.15) * H
        cx, cy = rng.uniform(0, W - cw), rng.uniform(0, H - ch)
        tint = np.clip(np.asarray(st.background) + rng.uniform(-0.25, 0.25, 3), 0, 1)
        img[int(cy) : int(cy + ch), int(cx) : int(cx + cw)] = tint.astype(np.float32)

    k = int(rng.integers(st.persons_per_scene[0], st.persons_per_scene[1] + 1))
    n_unl = int(rng.binomial(k, spec.unlabeled_fraction)) if spec.unlabeled_fraction > 0 else 0
    n_unl = min(n_unl, len(passers))
    people = [(i, appearances[i]) for i in deck.draw(k - n_unl)]
    if n_unl:
        people += [(UNLABELED, passers[int(j)]) for j in rng.choice(len(passers), size=n_unl, replace=False)]
    boxes: list[np.ndarray] = []
    kept: list[int] = []
    apps: list[np.ndarray] = []
    for local, base in people:
        noise = rng.normal(0.0, spec.jitter, APPEARANCE_DIM)
        norm = np.linalg.norm(noise)
        if norm > jitter_cap:
            noise *= jitter_cap / norm
        app = np.clip(base + noise, 0.0, 1.0)
        ph = rng.uniform(*st.person_height)
        pw = ph * (0.3 + 0.25 * app[7])
        for _ in range(50):
            x1 = rng.uniform(0, W - pw)
            y1 = rng.uniform(0, H - ph)
            cand = np.round(np.array([x1, y1, x1 + pw, y1 + ph]))
            if cand[2] - cand[0] < 2 or cand[3] - cand[1] < 4:
                continue
            if all(_box_iou(cand, b) < 0.3 for b in boxes):
                boxes.append(cand)
                kept.append(local)
                apps.append(app)
                _render_person(img, cand, app)
                break
    img += rng.normal(0.0, st.background_noise, img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    box_arr = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    ids_arr = np.asarray([UNLABELED if i == UNLABELED else global_identity(spec.domain_id, i) for i in kept], dtype=np.int64)
    return img, box_arr, ids_arr, np.asarray(apps, dtype=np.float64).reshape(-1, APPEARANCE_DIM)


def _passer_appearances(spec: DomainSpec, labeled: np.ndarray, d_min: float, rng: np.random.Generator) -> np.ndarray:
    """Appearances of people who are never labeled, kept at least half the
    labeled separation away from every labeled identity."""
    center = np.asarray(spec.style.appearance_center, dtype=np.float64)
    spread = np.asarray(spec.style.appearance_spread, dtype=np.float64)
    n = spec.passers_per_identity * spec.num_identities
    out = []
    for _ in range(50 * n):
        if len(out) == n:
            break
        cand = np.clip(center + spread * rng.uniform(-1.0, 1.0, APPEARANCE_DIM), 0.0, 1.0)
        if np.min(np.linalg.norm(labeled - cand, axis=1)) >= 0.5 * d_min:
            out.append(cand)
    return np.asarray(out).reshape(-1, APPEARANCE_DIM)


def generate_domain(spec: DomainSpec) -> DomainDataset:
    """Render the train and test splits of one domain; deterministic in ``spec``."""
    spec.validate()
    root = np.random.SeedSequence([spec.seed, spec.domain_id])
    app_rng, train_rng, test_rng, passer_rng = (np.random.default_rng(s) for s in root.spawn(4))
    appearances, d_min = _identity_appearances(spec, app_rng)
    passers = _passer_appearances(spec, appearances, d_min, passer_rng) if spec.unlabeled_fraction > 0 else np.zeros((0, APPEARANCE_DIM))
    # keeps every intra-identity distance under the inter-identity minimum
    jitter_cap = 0.4 * d_min

    def split(n: int, rng: np.random.Generator) -> list[SceneSample]:
        deck = _Deck(spec.num_identities, rng)
        out = []
        for _ in range(n):
            img, boxes, ids, apps = _render_scene(spec, rng, deck, appearances, passers, jitter_cap)
            out.append(SceneSample(img, boxes, ids, spec.domain_id, apps))
        return out

    train = split(spec.num_scenes, train_rng)
    gallery = split(spec.test_scenes, test_rng)
    return DomainDataset(spec, train, gallery, _pick_queries(gallery, spec.queries_per_identity))


def _pick_queries(gallery: list[SceneSample], per_identity: int = 1) -> list[tuple[int, int]]:
    """First labeled occurrence in each of up to ``per_identity`` distinct
    scenes, for identities seen in at least two gallery scenes."""
    occurrences: dict[int, list[tuple[int, int]]] = {}
    for si, s in enumerate(gallery):
        for bi, ident in enumerate(s.gt_identities):
            if ident != UNLABELED:
                occurrences.setdefault(int(ident), []).append((si, bi))
    queries = []
    for ident in sorted(occurrences):
        occ = occurrences[ident]
        if len({si for si, _ in occ}) < 2:
            continue
        seen: set[int] = set()
        for si, bi in occ:
            if si not in seen and len(seen) < per_identity:
                seen.add(si)
                queries.append((si, bi))
    return queries


def identity_appearances(spec: DomainSpec) -> np.ndarray:
    """Base appearance vectors of the domain's identities (row = local id)."""
    root = np.random.SeedSequence([spec.seed, spec.domain_id])
    app_rng = np.random.default_rng(root.spawn(4)[0])
    return _identity_appearances(spec, app_rng)[0]


# --------------------------------------------------------------------------
# serialization


def spec_to_dict(spec: DomainSpec) -> dict[str, Any]:
    return asdict(spec)


def spec_from_dict(d: dict[str, Any]) -> DomainSpec:
    d = dict(d)
    style = d.pop("style", None) or {}
    style = DomainStyle(**{k: tuple(v) if isinstance(v, list) else v for k, v in style.items()})
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return DomainSpec(style=style, **d)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(ds: DomainDataset, path: str | Path) -> Path:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    records = []
    ann_lines = []
    for split, scenes in (("train", ds.train), ("test", ds.test_gallery)):
        for idx, s in enumerate(scenes):
            name = f"{split}_{idx:05d}"
            rel = f"images/{name}.npy"
            np.save(path / rel, s.image, allow_pickle=False)
            records.append({"name": name, "split": split, "index": idx, "image": rel, "sha256": _sha256(path / rel)})
            ann_lines.append(
                json.dumps(
                    {
                        "name": name,
                        "domain_id": s.domain_id,
                        "boxes": [[float(v) for v in b] for b in s.gt_boxes],
                        "identities": [int(i) for i in s.gt_identities],
                        "appearances": None if s.appearances is None else s.appearances.tolist(),
                    }
                )
            )
    (path / ANNOTATIONS).write_text("\n".join(ann_lines) + "\n", encoding="utf-8")
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": spec_to_dict(ds.spec),
        "records": records,
        "annotations": ANNOTATIONS,
        "annotations_sha256": _sha256(path / ANNOTATIONS),
        "queries": [list(q) for q in ds.test_queries],
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def load_dataset(path: str | Path) -> DomainDataset:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise DatasetError(f"missing manifest in {path}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        spec = spec_from_dict(manifest["spec"])
        records = manifest["records"]
        ann_name = manifest["annotations"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt manifest {mpath}: {exc}") from exc

    ann_path = path / ann_name
    if not ann_path.is_file():
        raise DatasetError(f"missing annotation file {ann_path}")
    annotations: dict[str, dict[str, Any]] = {}
    for lineno, line in enumerate(ann_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            annotations[rec["name"]] = rec
        except (json.JSONDecodeError, KeyError) as exc:
            raise DatasetError(f"corrupt annotation record at {ann_path}:{lineno}") from exc

    splits: dict[str, list[SceneSample]] = {"train": [], "test": []}
    for rec in records:
        name = rec.get("name", "?")
        try:
            img_path = path / rec["image"]
            split = rec["split"]
        except KeyError as exc:
            raise DatasetError(f"corrupt manifest record {name!r}: missing {exc}") from exc
        if not img_path.is_file():
            raise DatasetError(f"record {name!r}: missing tensor file {img_path}")
        if _sha256(img_path) != rec.get("sha256"):
            raise DatasetError(f"record {name!r}: checksum mismatch for {img_path}")
        if name not in annotations:
            raise DatasetError(f"record {name!r}: no annotation record")
        ann = annotations[name]
        image = np.load(img_path, allow_pickle=False)
        boxes = np.asarray(ann["boxes"], dtype=np.float32).reshape(-1, 4)
        ids = np.asarray(ann["identities"], dtype=np.int64)
        if split not in splits or rec.get("index") != len(splits[split]):
            raise DatasetError(f"record {name!r}: bad split/index")
        apps = ann.get("appearances")
        apps = None if apps is None else np.asarray(apps, dtype=np.float64).reshape(-1, APPEARANCE_DIM)
        splits[split].append(SceneSample(image, boxes, ids, int(ann["domain_id"]), apps))
    queries = [tuple(int(v) for v in q) for q in manifest.get("queries", [])]
    return DomainDataset(spec, splits["train"], splits["test"], queries)


def dataset_digest(ds: DomainDataset) -> str:
    """sha256 over every tensor and annotation of the dataset."""
    h = hashlib.sha256()
    h.update(json.dumps(spec_to_dict(ds.spec), sort_keys=True).encode())
    for scenes in (ds.train, ds.test_gallery):
        for s in scenes:
            h.update(np.ascontiguousarray(s.image).tobytes())
            h.update(np.ascontiguousarray(s.gt_boxes).tobytes())
            h.update(np.ascontiguousarray(s.gt_identities).tobytes())
            if s.appearances is not None:
                h.update(np.ascontiguousarray(s.appearances).tobytes())
            h.update(str(s.domain_id).encode())
    h.update(json.dumps([list(q) for q in ds.test_queries]).encode())
    return h.hexdigest()


def default_styles() -> list[DomainStyle]:
    """Three visually distinct domain styles.

    Each style lets identities differ along a different part of the
    appearance vector, so an embedding tuned on one domain tends to discard
    what the others rely on.
    """
    return [
        DomainStyle(
            background=(0.15, 0.18, 0.30),
            person_height=(16.0, 26.0),
            persons_per_scene=(2, 4),
            appearance_center=(0.5, 0.5, 0.5, 0.45, 0.45, 0.45, 0.2, 0.5),
            appearance_spread=(0.5, 0.5, 0.5, 0.08, 0.08, 0.08, 0.1, 0.3),
        ),
        DomainStyle(
            background=(0.55, 0.50, 0.35),
            person_height=(22.0, 34.0),
            persons_per_scene=(2, 3),
            appearance_center=(0.4, 0.4, 0.4, 0.5, 0.5, 0.5, 0.2, 0.5),
            appearance_spread=(0.08, 0.08, 0.08, 0.5, 0.5, 0.5, 0.1, 0.3),
        ),
        DomainStyle(
            background=(0.30, 0.45, 0.25),
            person_height=(28.0, 44.0),
            persons_per_scene=(1, 3),
            appearance_center=(0.5, 0.3, 0.6, 0.6, 0.3, 0.5, 0.5, 0.5),
            appearance_spread=(0.15, 0.15, 0.15, 0.15, 0.15, 0.15, 0.5, 0.5),
        ),
    ]


def default_specs(
    num_scenes: int = 300,
    num_identities: int = 30,
    seed: int = 0,
    unlabeled_fraction: float = 0.2,
    image_size: tuple[int, int] = (64, 64),
) -> list[DomainSpec]:
    return [
        DomainSpec(
            domain_id=i,
            style=st,
            num_scenes=num_scenes,
            num_identities=num_identities,
            unlabeled_fraction=unlabeled_fraction,
            seed=seed,
            image_size=image_size,
        )
        for i, st in enumerate(default_styles())
    ]
