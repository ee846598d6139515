from __future__ import annotations

from collections import Counter

import pytest
import torch

from lifelong_ps import lifelong as LL
from lifelong_ps.losses import LossConfig
from lifelong_ps.perception import parameter_checksum, to_tensor
from lifelong_ps.synthgen import DomainSpec, default_styles, generate_domain

TINY = dict(
    first_domain_epochs=1,
    first_domain_lr_decay_epoch=1,
    epochs_per_domain=2,
    lr_decay_epoch=2,
    warmup_steps=3,
    lr=0.01,
    exemplar_fraction=0.1,
    queue_size=50,
    oim_queue_size=20,
)


@pytest.fixture(scope="module")
def domains():
    return [
        generate_domain(DomainSpec(i, style=st, num_scenes=20, num_identities=5, seed=11, num_test_scenes=6))
        for i, st in enumerate(default_styles()[:2])
    ]


def cfg(**kw) -> LL.TrainConfig:
    return LL.TrainConfig(**{**TINY, **kw})


def test_compose_batch_sizes(domains):
    c = cfg()
    new = domains[1].train[:5]
    import itertools

    iters = [itertools.cycle(domains[0].train[:2]), itertools.cycle(domains[0].train[2:4])]
    batch = LL.compose_batch(new, iters, c)
    assert len(batch) == 9 and sum(b.old for b in batch) == 4
    assert len(LL.compose_batch(new, [], c)) == 5
    with pytest.raises(ValueError):
        LL.compose_batch(new[:4], [], c)


def test_config_validation():
    with pytest.raises(ValueError):
        LL.TrainConfig(lr=0).validate()
    with pytest.raises(ValueError):
        LL.TrainConfig(lr_decay_epoch=9).validate()
    c = LL.TrainConfig(mode=LL.Mode.JOINT)
    assert LL.train_config_from_dict(LL.config_dict(c)) == c


def test_lr_schedule():
    t = LL.LifelongTrainer(cfg(warmup_steps=4, lr=1.0, lr_decay_factor=0.1))
    assert t._lr(0, 0, 3) == 0.25
    assert t._lr(10, 1, 3) == 1.0
    # decayed from the third epoch on (1-based)
    assert t._lr(10, 2, 3) == pytest.approx(0.1)


def test_lps_sequence_contracts(domains):
    records = []
    trainer = LL.LifelongTrainer(cfg(), step_log=records.append)
    LL.continue_sequence(trainer, domains)
    # exemplar store and prototypes
    ex = trainer.exemplars.domains[0]
    assert len(ex) == 2
    assert trainer.lut.ids == sorted({i for s in ex for i in s.labeled_ids})
    assert trainer.lut.frozen
    # old model and LUT never change inside a domain
    for chk in trainer.epoch_checks:
        assert chk["old_model"] == chk["old_model_before"]
        assert chk["lut"] == chk["lut_before"]
    assert trainer.epoch_checks[-1]["old_model"] == parameter_checksum(trainer.old_model)
    # rehearsal terms logged only for the second domain
    first = [r for r in records if r["domain"] == 0]
    second = [r for r in records if r["domain"] == 1]
    assert all("rim" not in r and "dkd" not in r for r in first)
    assert all("rkd_plus" in r and "rim" in r and "dkd" in r for r in second)
    assert len(trainer.history) == 2
    assert set(trainer.history[-1]["metrics"]) == {"0", "1"}


def test_exemplars_cycle(domains, monkeypatch):
    seen = Counter()
    trainer = LL.LifelongTrainer(cfg())
    trainer.train_domain(domains[0])
    trainer.advance_domain()
    orig = trainer._step

    def spy(batch, oim, rehearsal):
        assert len(batch) == 5 + 2
        for it in batch:
            if it.old:
                seen[id(it.scene)] += 1
        return orig(batch, oim, rehearsal)

    monkeypatch.setattr(trainer, "_step", spy)
    trainer.train_domain(domains[1], epochs=2)
    steps = 2 * (len(domains[1].train) // 5)
    # two exemplars drawn twice per step in turn: each appears once per step
    assert sorted(seen.values()) == [steps, steps]


def test_advance_replicates_model(domains):
    trainer = LL.LifelongTrainer(cfg())
    trainer.train_domain(domains[0])
    img = to_tensor([domains[0].test_gallery[0].image])
    trainer.model.eval()
    with torch.no_grad():
        before = trainer.model.rpn(trainer.model.features(img))[0]
    trainer.advance_domain()
    with torch.no_grad():
        after = trainer.old_model.rpn(trainer.old_model.features(img))[0]
    assert torch.equal(before, after)
    assert len(trainer.queue) > 0
    assert trainer.domain_index == 1


def test_single_domain_lps_equals_finetune(domains):
    a = LL.LifelongTrainer(cfg(mode=LL.Mode.LPS))
    b = LL.LifelongTrainer(cfg(mode=LL.Mode.FINETUNE))
    a.train_domain(domains[0])
    b.train_domain(domains[0])
    assert parameter_checksum(a.model) == parameter_checksum(b.model)


def test_finetune_and_joint_skip_rehearsal(domains):
    _, hist, t = LL.train_sequence(domains, cfg(mode=LL.Mode.FINETUNE), LossConfig())
    assert len(t.lut) == 0 and len(t.exemplars) == 0 and t.old_model is None
    _, hist, t = LL.train_sequence(domains, cfg(mode=LL.Mode.JOINT, joint_epochs=1))
    assert len(hist) == 1 and hist[0]["trained_domain"] == "joint"
    assert len(t.lut) == 0 and len(t.queue) == 0


def test_deterministic(domains):
    h1 = LL.train_sequence(domains, cfg())[1]
    h2 = LL.train_sequence(domains, cfg())[1]
    assert h1 == h2


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        LL.train_sequence([], cfg())
