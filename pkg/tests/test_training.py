from dataclasses import replace

import numpy as np
import pytest

from conftest import TITANIC_REFERRALS, TITANIC_VIEWS
from trustfusion.data import SynthSpec, conflict_fixture, split, synth_conflict
from trustfusion.losses import ace_loss, annealing, one_hot
from trustfusion.metrics import summarize
from trustfusion.neural import EvidentialNets
from trustfusion.sl_core import (
    DirichletEvidence,
    MultinomialOpinion,
    bcf_fuse_all,
    evidence_to_opinion,
    opinion_to_evidence,
)
from trustfusion.training import (
    TrainConfig,
    Trainer,
    build_nets,
    evaluate,
    fusion_forward,
    predict,
    predict_full,
    read_config_file,
    train,
)

H = 1e-6


def inv_softplus(e):
    e = np.asarray(e, dtype=float)
    return np.where(e > 30, e, np.log(np.expm1(np.maximum(e, 1e-300))))


def snapshot(params):
    return {k: v.copy() for k, v in params.items()}


def same(a, b):
    return all(a[k].tobytes() == b[k].tobytes() for k in a)


def randomize(nets, rng, scale=0.5):
    for p in nets.all_params().values():
        p[...] = rng.normal(scale=scale, size=p.shape)


def small_cfg(**kw):
    base = dict(stage_epochs=(3, 2, 3), warmup_epochs=1, batch_size=64, hidden=8, d_h=8, d_2=4)
    base.update(kw)
    return TrainConfig(**base)


def fixed_nets(functional_evidence, referral_evidence):
    """Single-feature nets emitting the given evidence for input x = [1]."""
    k = len(functional_evidence[0])
    nets = EvidentialNets.build([1] * len(functional_evidence), k, np.random.default_rng(0), hidden=1, d_h=1, d_2=1)
    for fnet, ev in zip(nets.functional, functional_evidence):
        fnet.layers["hidden"].weight[...] = 1.0
        fnet.layers["hidden"].bias[...] = 0.0
        fnet.layers["head"].weight[...] = 0.0
        fnet.layers["head"].bias[...] = inv_softplus(ev)
    for rnet, ev in zip(nets.referral, referral_evidence):
        rnet.layers["encoder"].weight[...] = 0.0
        rnet.layers["bilinear"].weight[...] = 0.0
        rnet.layers["head"].weight[...] = 0.0
        rnet.layers["head"].bias[...] = inv_softplus(ev)
    return nets


def titanic_nets():
    func = [opinion_to_evidence(MultinomialOpinion(b, u)).evidence for b, u in TITANIC_VIEWS.values()]
    ref = []
    for (t, d, u), _ in TITANIC_REFERRALS.values():
        ref.append(np.array([t, d]) * 2.0 / u)
    return fixed_nets(func, ref)


class TestConfig:
    def test_defaults_valid(self):
        TrainConfig().validate()

    @pytest.mark.parametrize(
        "kw", [dict(lr=0.0), dict(rlr=-1.0), dict(warmup_epochs=-1), dict(smoothing_eta=0.0),
               dict(stage_epochs=(1, 2)), dict(batch_size=0)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()

    def test_dict_round_trip(self):
        cfg = TrainConfig(lr=1e-2, stage_epochs=(4, 5, 6), use_td=False, normalize=True, hidden=12)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_config_file(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("# comment\nlr = 0.01  # inline\nstage_epochs = 2,3,4\nuse_td = false\n")
        cfg = TrainConfig.from_dict(read_config_file(path))
        assert cfg.lr == 0.01 and cfg.stage_epochs == (2, 3, 4) and not cfg.use_td

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": "1"})


class TestPrediction:
    def test_titanic(self):
        nets = titanic_nets()
        label, fused, views, trust = predict(nets, [[1.0]] * 3, use_td=True)
        assert label == 1  # unsafe
        np.testing.assert_allclose(trust, [0.65, 0.95, 0.25], atol=1e-9)
        assert fused.belief[0] == pytest.approx(0.22, abs=0.01)
        assert fused.belief[1] == pytest.approx(0.70, abs=0.01)
        np.testing.assert_allclose(views[0].belief, [0.85, 0.05], atol=1e-9)

    def test_titanic_without_td(self):
        label, fused, _, trust = predict(titanic_nets(), [[1.0]] * 3, use_td=False)
        assert label == 0 and trust == [1.0, 1.0, 1.0]
        assert fused.belief[0] == pytest.approx(0.68, abs=0.01)

    def test_single_view(self):
        nets = fixed_nets([np.array([1.0, 5.0, 2.0])], [np.array([3.0, 1.0])])
        label, fused, views, _ = predict(nets, [[1.0]])
        assert label == 1 == int(np.argmax(views[0].belief))

    def test_tie_lowest_index(self):
        nets = fixed_nets([np.array([2.0, 2.0, 1.0])] * 2, [np.array([3.0, 1.0])] * 2)
        assert predict(nets, [[1.0], [1.0]])[0] == 0

    def test_td_bypass_identity(self, rng):
        nets = EvidentialNets.build([3, 4, 2], 4, rng)
        randomize(nets, rng)
        xs = [rng.normal(size=(20, d)) for d in (3, 4, 2)]
        pred = predict_full(nets, xs, use_td=False)
        for i in range(20):
            ops = [evidence_to_opinion_row(net, x[i]) for net, x in zip(nets.functional, xs)]
            ref = bcf_fuse_all(ops)
            np.testing.assert_allclose(pred.fused_belief[i], ref.belief, atol=1e-12)
            assert pred.fused_uncertainty[i] == pytest.approx(ref.uncertainty, abs=1e-12)


def evidence_to_opinion_row(net, x):
    return evidence_to_opinion(DirichletEvidence(net.forward(x[None, :])[0]))


class TestGradientsThroughFusion:
    @pytest.mark.parametrize("functional", [True, False])
    def test_fd(self, rng, functional):
        for _ in range(5):
            nets = EvidentialNets.build([2, 3], 3, rng, hidden=3, d_h=3, d_2=2)
            randomize(nets, rng)
            xs = [rng.normal(size=(4, 2)), rng.normal(size=(4, 3))]
            y = rng.integers(0, 3, size=4)
            trainer = Trainer(nets, TrainConfig(), 3)
            trainer.epoch = 12
            trainer.fused_loss_and_grads(xs, y, functional=functional)
            params = nets.functional_params() if functional else nets.referral_params()
            grads = snapshot(nets.functional_grads() if functional else nets.referral_grads())
            for name, p in params.items():
                num = np.zeros_like(p)
                for i in np.ndindex(p.shape):
                    old = p[i]
                    p[i] = old + H
                    up = trainer.fused_loss_and_grads(xs, y, functional)[0]
                    p[i] = old - H
                    down = trainer.fused_loss_and_grads(xs, y, functional)[0]
                    p[i] = old
                    num[i] = (up - down) / (2 * H)
                err = np.abs(num - grads[name]).max() / max(np.abs(num).max(), 1e-8)
                assert err < 1e-4, name

    def test_referral_gradient_when_trust_high(self):
        # near-full trust for both views, views disagree
        nets = fixed_nets([np.array([9.0, 1.0]), np.array([1.0, 9.0])], [np.array([20.0, 0.0])] * 2)
        trainer = Trainer(nets, TrainConfig(), 2)
        trainer.fused_loss_and_grads([np.ones((1, 1))] * 2, np.array([0]), functional=False)
        total = sum(np.abs(g).sum() for g in nets.referral_grads().values())
        assert total > 0


def toy_two_view(n=300, k=3):
    """View 0 shows the label, view 1 always shows the next class."""
    rng = np.random.default_rng(5)
    y = rng.integers(0, k, size=n)
    x0 = 3.0 * np.eye(k)[y]
    x1 = 3.0 * np.eye(k)[(y + 1) % k]
    return [x0, x1], y


def label_reading_nets(k):
    nets = EvidentialNets.build([k, k], k, np.random.default_rng(3), hidden=k, d_h=8, d_2=4)
    for f in nets.functional:
        f.layers["hidden"].weight[...] = np.eye(k)
        f.layers["head"].weight[...] = 2.0 * np.eye(k)
    return nets


class TestStages:
    def test_warmup_separates_trust(self):
        xs, y = toy_two_view()
        nets = label_reading_nets(3)
        trainer = Trainer(nets, TrainConfig(warmup_epochs=30, rlr=1e-2, batch_size=50), 3)
        before = snapshot(nets.functional_params())
        trainer.stage1_warmup(xs, y)
        trust = predict_full(nets, xs, use_td=True).trust
        assert trust[:, 0].mean() > 0.5 > trust[:, 1].mean()
        assert same(before, nets.functional_params())

    def test_zero_warmup(self):
        xs, y = toy_two_view()
        nets = label_reading_nets(3)
        before = snapshot(nets.referral_params())
        Trainer(nets, TrainConfig(warmup_epochs=0), 3).stage1_warmup(xs, y)
        assert same(before, nets.referral_params())

    def test_first_warmup_loss_finite(self, rng):
        xs, y = toy_two_view()
        nets = EvidentialNets.build([3, 3], 3, rng)
        assert np.isfinite(Trainer(nets, TrainConfig(), 3).warmup_loss_and_grads(xs, y))

    def test_stage2_freezes_referral(self, rng):
        ds = split(synth_conflict(SynthSpec(n=200)), 0.8, 0)
        xs, y = ds.subset(ds.train_idx)
        nets = EvidentialNets.build(ds.dims, 5, rng, hidden=8, d_h=8, d_2=4)
        trainer = Trainer(nets, small_cfg(), 5)
        ref, func = snapshot(nets.referral_params()), snapshot(nets.functional_params())
        trainer.stage2_functional(xs, y)
        assert same(ref, nets.referral_params())
        assert not same(func, nets.functional_params())

    def test_stage3_freezes_functional(self, rng):
        ds = split(synth_conflict(SynthSpec(n=200)), 0.8, 0)
        xs, y = ds.subset(ds.train_idx)
        nets = EvidentialNets.build(ds.dims, 5, rng, hidden=8, d_h=8, d_2=4)
        trainer = Trainer(nets, small_cfg(), 5)
        ref, func = snapshot(nets.referral_params()), snapshot(nets.functional_params())
        trainer.stage3_referral(xs, y)
        assert same(func, nets.functional_params())
        assert not same(ref, nets.referral_params())

    def test_stage4_freezes_referral(self, rng):
        ds = split(synth_conflict(SynthSpec(n=200)), 0.8, 0)
        xs, y = ds.subset(ds.train_idx)
        nets = EvidentialNets.build(ds.dims, 5, rng, hidden=8, d_h=8, d_2=4)
        trainer = Trainer(nets, small_cfg(), 5)
        ref = snapshot(nets.referral_params())
        trainer.stage4_functional(xs, y)
        assert same(ref, nets.referral_params())

    def test_per_view_loss_non_increasing(self, rng):
        spec = SynthSpec(n=400, separation=(6.0, 6.0, 6.0), noise=(0.5, 0.5, 0.5))
        ds = split(synth_conflict(spec), 0.8, 0)
        xs, y = ds.subset(ds.train_idx)
        nets = EvidentialNets.build(ds.dims, 5, rng)
        trainer = Trainer(nets, TrainConfig(lr=1e-3, batch_size=len(y), use_td=False), 5)

        def view_loss():
            # ACE part only, so the annealed KL weight does not move the target
            return sum(float(ace_loss(f.forward(x) + 1.0, one_hot(y, 5)).value.mean())
                       for f, x in zip(nets.functional, xs))

        losses_seen = [view_loss()]
        for _ in range(5):
            trainer.stage2_functional(xs, y, epochs=1)
            losses_seen.append(view_loss())
        assert np.all(np.diff(losses_seen) <= 0)

    def test_stage3_fused_loss_decreases(self):
        ds = conflict_fixture(0)
        cfg = TrainConfig(stage_epochs=(12, 8, 0), lr=3e-3, rlr=1e-3)
        xs, y = ds.subset(ds.train_idx)
        trainer = Trainer(build_nets(ds, cfg), cfg, 5)
        trainer.stage1_warmup(xs, y)
        trainer.stage2_functional(xs, y)
        trainer.stage3_referral(xs, y)
        ref = [r.mean_loss for r in trainer.reports if r.stage == "referral"]
        assert ref[-1] < ref[0]


class TestPipeline:
    def test_annealing_in_reports(self, rng):
        result = train(synth_conflict(SynthSpec(n=100)), small_cfg(stage_epochs=(6, 3, 6)))
        for i, rep in enumerate(result.reports):
            assert rep.epoch == i
            assert rep.annealing == annealing(i) == min(1.0, i / 10)
        stages = [r.stage for r in result.reports]
        assert stages == ["warmup"] + ["functional"] * 6 + ["referral"] * 3 + ["refine"] * 6

    def test_no_td_skips_referral_stages(self):
        result = train(synth_conflict(SynthSpec(n=100)), small_cfg(use_td=False))
        assert {r.stage for r in result.reports} == {"functional", "refine"}

    def test_gaussian_accuracy(self):
        spec = SynthSpec(separation=(4.0, 4.0, 4.0), noise=(1.0, 1.0, 1.0))
        result = train(synth_conflict(spec), TrainConfig(stage_epochs=(15, 5, 10)))
        record = evaluate(result, result.dataset, use_td=True)
        assert summarize(record, 5)["top1"] >= 0.95

    def test_deterministic(self):
        ds = synth_conflict(SynthSpec(n=150))
        a = train(ds, small_cfg(seed=3))
        b = train(ds, small_cfg(seed=3))
        assert same(a.nets.all_params(), b.nets.all_params())
        c = train(ds, small_cfg(seed=4))
        assert not same(a.nets.all_params(), c.nets.all_params())

    def test_pseudo_view(self):
        result = train(synth_conflict(SynthSpec(n=100)), small_cfg(use_pseudo_view=True))
        assert result.dataset.dims == (8, 8, 8, 24)
        assert result.config.v == 4

    def test_td_not_worse_on_conflict_fixture(self):
        ds = conflict_fixture(0)
        cfg = TrainConfig(stage_epochs=(30, 15, 30), lr=3e-3, rlr=1e-3, seed=0)
        acc = {}
        for td in (True, False):
            result = train(ds, replace(cfg, use_td=td))
            acc[td] = summarize(evaluate(result, result.dataset, td), 5)["top1"]
        assert acc[True] >= acc[False]

    def test_fusion_forward_shapes(self, rng):
        nets = EvidentialNets.build([3, 2], 4, rng)
        fp = fusion_forward(nets, [rng.normal(size=(5, 3)), rng.normal(size=(5, 2))], use_td=True)
        assert fp.fused.shape == (5, 4)
        assert all(t.shape == (5,) for t in fp.trust)
        assert np.all(fp.fused >= 0)
