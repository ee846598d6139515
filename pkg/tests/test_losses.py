from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lifelong_ps import losses as L
from lifelong_ps.memory import UnlabeledQueue

D = 6


def unit(rng: np.random.Generator, n: int, d: int = D) -> torch.Tensor:
    x = rng.normal(size=(n, d))
    return torch.tensor(x / np.linalg.norm(x, axis=1, keepdims=True), dtype=torch.float64)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-300)


def rows(t: torch.Tensor) -> list[list[float]]:
    return t.tolist()


# -- value oracles ------------------------------------------------------------------


@pytest.mark.parametrize("case", range(25))
def test_rkd_matches_oracle(case):
    rng = np.random.default_rng(case)
    n, k = rng.integers(1, 5), rng.integers(1, 6)
    xo, xn, z = unit(rng, n), unit(rng, n), unit(rng, k)
    got = float(L.rkd_loss(xo, xn, z, 0.3))
    want = oracles.rkd(rows(xo), rows(xn), rows(z), 0.3)
    assert rel_err(got, float(want)) < 1e-10


@pytest.mark.parametrize("case", range(25))
def test_rkd_plus_matches_oracle(case):
    rng = np.random.default_rng(100 + case)
    n, k, m = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 4)
    xo, xn, z, hb = unit(rng, n), unit(rng, n), unit(rng, k), unit(rng, m)
    got = float(L.rkd_plus_loss(xo, xn, z, hb, 0.3))
    want = oracles.rkd_plus(rows(xo), rows(xn), rows(z), rows(hb), 0.3)
    assert rel_err(got, float(want)) < 1e-10


@pytest.mark.parametrize("case", range(25))
@pytest.mark.parametrize("fn", [L.rim_loss, L.oim_loss])
def test_matching_losses_match_oracle(fn, case):
    rng = np.random.default_rng(200 + case)
    n, k, q = rng.integers(1, 5), rng.integers(1, 6), rng.integers(0, 5)
    ids = sorted(rng.choice(100, size=k, replace=False).tolist())
    labels = [ids[int(rng.integers(k))] for _ in range(n)]
    x, z, queue = unit(rng, n), unit(rng, k), unit(rng, q)
    got, skipped = fn(x, torch.tensor(labels), torch.tensor(ids), z, queue, 0.1)
    want = oracles.matching_ce(rows(x), labels, ids, rows(z), rows(queue), 0.1)
    assert skipped == 0
    assert rel_err(float(got), float(want)) < 1e-10


@pytest.mark.parametrize("case", range(25))
def test_dkd_matches_oracle(case):
    rng = np.random.default_rng(300 + case)
    fo = torch.tensor(rng.normal(size=(1, 3, 4, 4)))
    fn = torch.tensor(rng.normal(size=(1, 3, 4, 4)))
    oo = torch.tensor(rng.normal(size=(1, 5)))
    on = torch.tensor(rng.normal(size=(1, 5)))
    got = float(L.dkd_loss(fo, fn, oo, on))
    want = oracles.dkd(fo.flatten().tolist(), fn.flatten().tolist(), oo.flatten().tolist(), on.flatten().tolist())
    assert rel_err(got, float(want)) < 1e-10


@pytest.mark.parametrize("case", range(25))
def test_det_matches_oracle(case):
    rng = np.random.default_rng(400 + case)
    n = int(rng.integers(1, 8))
    logits = torch.tensor(rng.normal(size=n) * 2)
    labels = torch.tensor(rng.integers(0, 2, size=n))
    pred = torch.tensor(rng.normal(size=(n, 4)) * 0.3)
    tgt = torch.tensor(rng.normal(size=(n, 4)) * 0.3)
    got = float(L.det_loss(logits, labels, pred, tgt))
    want = oracles.det(logits.tolist(), labels.tolist(), pred.tolist(), tgt.tolist(), 1.0 / 9)
    assert rel_err(got, float(want)) < 1e-10


# -- gradients ----------------------------------------------------------------------


def fd_rel_err(f, x: torch.Tensor, eps: float = 1e-6) -> float:
    """Relative error between autograd and central differences of f at x."""
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    analytic = x.grad.detach().flatten()
    flat = x.detach().flatten()
    numeric = torch.zeros_like(flat)
    for i in range(len(flat)):
        hi, lo = flat.clone(), flat.clone()
        hi[i] += eps
        lo[i] -= eps
        numeric[i] = (f(hi.view_as(x)) - f(lo.view_as(x))) / (2 * eps)
    return float((analytic - numeric).norm() / numeric.norm().clamp_min(1e-12))


@pytest.mark.parametrize("case", range(5))
def test_gradients_match_finite_differences(case):
    rng = np.random.default_rng(500 + case)
    xo, xn, z, hb, q = unit(rng, 3), unit(rng, 3), unit(rng, 4), unit(rng, 2), unit(rng, 3)
    ids = torch.tensor([3, 5, 8, 9])
    labels = torch.tensor([5, 9, 3])
    assert fd_rel_err(lambda x: L.rkd_loss(xo, x, z, 0.3), xn) < 1e-4
    assert fd_rel_err(lambda x: L.rkd_plus_loss(xo, x, z, hb, 0.3), xn) < 1e-4
    assert fd_rel_err(lambda x: L.rim_loss(x, labels, ids, z, q, 0.1)[0], xn) < 1e-4
    assert fd_rel_err(lambda x: L.oim_loss(x, labels, ids, z, q, 0.1)[0], xn) < 1e-4
    fo = torch.tensor(rng.normal(size=(1, 2, 3, 3)))
    oo = torch.tensor(rng.normal(size=(1, 4)))
    on = torch.tensor(rng.normal(size=(1, 4)))
    assert fd_rel_err(lambda f: L.dkd_loss(fo, f, oo, on), torch.tensor(rng.normal(size=(1, 2, 3, 3)))) < 1e-4
    labels01 = torch.tensor([1, 0, 1, 0, 1])
    tgt = torch.tensor(rng.normal(size=(5, 4)) * 0.3)
    pred = torch.tensor(rng.normal(size=(5, 4)) * 0.3)
    assert fd_rel_err(lambda z_: L.det_loss(z_, labels01, pred, tgt), torch.tensor(rng.normal(size=5))) < 1e-4
    logits = torch.tensor(rng.normal(size=5))
    assert fd_rel_err(lambda p: L.det_loss(logits, labels01, p, tgt), pred) < 1e-4


# -- hand-computed values and edge cases ----------------------------------------------


def test_rkd_zero_when_models_agree():
    rng = np.random.default_rng(0)
    x, z = unit(rng, 4), unit(rng, 5)
    assert float(L.rkd_loss(x, x.clone(), z)) == 0.0


def test_rkd_single_prototype_is_zero():
    rng = np.random.default_rng(1)
    assert float(L.rkd_loss(unit(rng, 3), unit(rng, 3), unit(rng, 1))) == pytest.approx(0.0, abs=1e-15)


def test_rkd_hand_case():
    # one proposal, two prototypes e1/e2, old feature e1, new feature e2
    e = torch.eye(2, dtype=torch.float64)
    q = torch.softmax(torch.tensor([1.0, 0.0], dtype=torch.float64) / 0.3, 0)
    p = q.flip(0)
    want = float((q * (q / p).log()).sum()) / 2
    assert float(L.rkd_loss(e[:1], e[1:], e, 0.3)) == pytest.approx(want, rel=1e-12)


def test_rim_hand_case():
    e = torch.eye(3, dtype=torch.float64)
    loss, _ = L.rim_loss(e[:1], torch.tensor([7]), torch.tensor([7, 8]), e[:2], e[2:], 0.1)
    want = -math.log(math.exp(10) / (math.exp(10) + 2))
    assert float(loss) == pytest.approx(want, rel=1e-12)


def test_rim_skips_unknown_identities():
    rng = np.random.default_rng(2)
    x, z = unit(rng, 3), unit(rng, 2)
    loss, skipped = L.rim_loss(x, torch.tensor([1, 99, 2]), torch.tensor([1, 2]), z, None, 0.1)
    ref, _ = L.rim_loss(x[[0, 2]], torch.tensor([1, 2]), torch.tensor([1, 2]), z, None, 0.1)
    assert skipped == 1
    assert float(loss) == pytest.approx(float(ref), rel=1e-12)


def test_empty_inputs():
    z = torch.eye(3, dtype=torch.float64)
    empty = torch.zeros(0, 3, dtype=torch.float64)
    assert float(L.rkd_loss(empty, empty, z)) == 0.0
    loss, skipped = L.rim_loss(empty, torch.zeros(0, dtype=torch.long), torch.tensor([1, 2, 3]), z, None)
    assert float(loss) == 0.0 and skipped == 0
    with pytest.raises(ValueError, match="no references"):
        L.similarity_distribution(z, empty, 0.3)


def test_det_without_foreground_is_classification_only():
    logits = torch.tensor([0.2, -1.0], dtype=torch.float64)
    labels = torch.tensor([0, 0])
    d = torch.ones(2, 4, dtype=torch.float64)
    assert float(L.det_loss(logits, labels, d, -d)) == pytest.approx(float(L.det_loss(logits, labels)), rel=1e-15)


def test_total_loss_sums_enabled_terms():
    comps = {k: torch.tensor(float(i + 1)) for i, k in enumerate(["det", "oim", "rkd_plus", "rim", "dkd"])}
    assert float(L.total_loss(L.LossConfig(), comps, has_old_data=True)) == 15.0
    assert float(L.total_loss(L.LossConfig(), comps, has_old_data=False)) == 3.0
    no_rim = L.apply_ablations(L.LossConfig(), ["no_rim"])
    assert float(L.total_loss(no_rim, comps, has_old_data=True)) == 11.0


def test_ablation_names():
    assert L.apply_ablations(L.LossConfig(), ["rkd_basic"]).use_rkd_basic
    with pytest.raises(ValueError):
        L.apply_ablations(L.LossConfig(), ["no_such"])
    with pytest.raises(ValueError):
        L.LossConfig(use_rkd_basic=True).validate()


def test_oim_memory_momentum_keeps_unit_norm():
    mem = L.OIMMemory([4, 7], 3, queue_size=2, momentum=0.5, dtype=torch.float64)
    x = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
    mem.update(x, torch.tensor([7, 7]), unlabeled=x)
    assert torch.allclose(mem.lut[1].norm(), torch.tensor(1.0, dtype=torch.float64))
    assert float(mem.lut[0].norm()) == 0.0
    assert len(mem.queue) == 2


# -- properties -----------------------------------------------------------------------

vec = st.lists(st.floats(-1, 1, allow_nan=False), min_size=D, max_size=D).filter(lambda v: sum(a * a for a in v) > 1e-3)


def _norm(vs):
    t = torch.tensor(vs, dtype=torch.float64)
    return t / t.norm(dim=1, keepdim=True)


@settings(max_examples=60, deadline=None)
@given(st.lists(vec, min_size=1, max_size=4), st.lists(vec, min_size=1, max_size=5), st.floats(0.05, 2.0))
def test_rkd_nonnegative_and_zero_on_identity(xs, zs, tau):
    x, z = _norm(xs), _norm(zs)
    assert float(L.rkd_loss(x, x, z, tau)) == 0.0
    y = torch.roll(x, 1, dims=1)
    y = y / y.norm(dim=1, keepdim=True)
    assert float(L.rkd_loss(x, y, z, tau)) >= -1e-15


@settings(max_examples=60, deadline=None)
@given(st.lists(vec, min_size=1, max_size=4), st.lists(vec, min_size=1, max_size=5))
def test_rkd_plus_reduces_to_rkd(xs, zs):
    x, z = _norm(xs), _norm(zs)
    y = torch.flip(x, dims=[1])
    assert torch.equal(L.rkd_plus_loss(x, y, z, None), L.rkd_loss(x, y, z))
    assert torch.equal(L.rkd_plus_loss(x, y, z, torch.zeros(0, D, dtype=torch.float64)), L.rkd_loss(x, y, z))


@settings(max_examples=60, deadline=None)
@given(st.lists(vec, min_size=2, max_size=5), st.lists(vec, min_size=0, max_size=4), st.floats(0.05, 1.0))
def test_rim_bounds(zs, qs, tau):
    z = _norm(zs)
    q = _norm(qs) if qs else None
    x = z[:1]
    loss, _ = L.rim_loss(x, torch.tensor([0]), torch.arange(len(z)), z, q, tau)
    # log of the number of references bounds the loss from above for a matching feature
    n_refs = len(z) + (len(q) if q is not None else 0)
    assert 0.0 <= float(loss) <= math.log(n_refs) + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(1, 3000))
def test_queue_keeps_newest(capacity, pushes):
    q = UnlabeledQueue(capacity, 2, dtype=torch.float64)
    data = torch.stack([torch.arange(pushes, dtype=torch.float64), torch.zeros(pushes, dtype=torch.float64)], 1)
    q.push(data)
    kept = q.features()[:, 0].tolist()
    assert kept == list(range(max(0, pushes - capacity), pushes))
