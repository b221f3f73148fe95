"""MLP, training losses, gradient checks, optimizers and the training loop."""

import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpkit.errors import DivergedTraining, InvalidInput, InvalidParam
from fpkit.flatopt import (
    CrlHistory,
    LossSpec,
    MlpModel,
    SwaState,
    TrainConfig,
    crl_loss,
    forward,
    learning_rate,
    loss_and_grad,
    make_dataset,
    mixup,
    model_evalset,
    sam_perturb,
    sam_step,
    sgd_step,
    swa_update,
    train,
)
from fpkit.flatopt.losses import one_hot
from fpkit.flatopt.train import step_decay_lr
from oracles import central_difference, relative_error
from probes import GRAD_CASES, probe, worst_relative_error

class TestMlp:
    def test_zero_model(self):
        m = MlpModel.zeros((3, 4, 2))
        np.testing.assert_array_equal(forward(m, np.ones((5, 3)))[0], 0.0)

    def test_identity_layer(self, rng):
        m = MlpModel((3, 3), np.concatenate([np.eye(3).ravel(), np.zeros(3)]))
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(forward(m, x)[0], x)

    def test_deterministic(self, rng):
        m = MlpModel.init((2, 8, 8, 3), rng)
        x = rng.normal(size=(10, 2))
        assert np.array_equal(forward(m, x)[0], forward(m, x)[0])

    def test_json_roundtrip(self, rng):
        m = MlpModel.init((2, 5, 3), rng)
        back = MlpModel.from_dict(m.to_dict())
        assert back.sizes == m.sizes and np.array_equal(back.params, m.params)

    def test_bad_input(self, rng):
        with pytest.raises(InvalidInput):
            forward(MlpModel.init((2, 3), rng), np.ones((2, 3)))


class TestLossValues:
    def setup_method(self):
        self.model = MlpModel.zeros((2, 3, 2))
        self.x = np.ones((4, 2))
        self.y = np.array([0, 1, 1, 0])

    def test_ce_half(self):
        loss, _ = loss_and_grad(self.model, self.x, self.y, LossSpec("ce"))
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_focal_example(self):
        loss, _ = loss_and_grad(self.model, self.x, self.y, LossSpec("focal", 3.0))
        assert loss == pytest.approx(0.5**3 * math.log(2), abs=1e-12)
        assert loss == pytest.approx(0.086643397569993163677, abs=1e-12)

    def test_oe_uniform_is_zero(self):
        spec = LossSpec("ce_plus_oe", 0.5)
        loss, _ = loss_and_grad(self.model, self.x, self.y, spec, outliers=np.ones((3, 2)))
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_reductions_to_ce(self, rng):
        m = MlpModel.init((3, 6, 4), rng)
        x, y = rng.normal(size=(20, 3)), rng.integers(0, 4, 20)
        ce = loss_and_grad(m, x, y, LossSpec("ce"))
        for spec in (LossSpec("focal", 0.0), LossSpec("label_smoothing", 0.0)):
            loss, g = loss_and_grad(m, x, y, spec)
            assert loss == pytest.approx(ce[0], abs=1e-12)
            np.testing.assert_allclose(g, ce[1], atol=1e-12)

    @pytest.mark.parametrize("kind,param", [("focal", -1), ("label_smoothing", 1.0),
                                            ("label_smoothing", -0.1), ("logitnorm", 0.0)])
    def test_invalid_params(self, kind, param):
        with pytest.raises(InvalidParam):
            LossSpec(kind, param)

    def test_crl_examples(self):
        assert crl_loss(0.9, 0.1, 0.5, 0.5)[0] == 0.0
        assert crl_loss(0.2, -1.8, 1.0, 0.0)[0] == 0.0
        assert crl_loss(0.5, 0.2, 1.0, 0.0)[0] == pytest.approx(0.7, abs=1e-12)

    def test_crl_history(self):
        h = CrlHistory(3)
        h.update(np.array([0, 1]), np.array([True, False]))
        h.update(np.array([0, 2]), np.array([False, True]))
        np.testing.assert_array_equal(h.rate(np.arange(3)), [0.5, 0.0, 1.0])
        assert np.all(h.correct <= h.examined)

    def test_mixup(self):
        r1, r2 = np.random.default_rng(4), np.random.default_rng(4)
        x = np.arange(6.0).reshape(3, 2)
        t = one_hot(np.array([0, 1, 2]), 3)
        xm, tm, lam = mixup(x, t, 0.4, r1)
        lam2 = r2.beta(0.4, 0.4)
        perm = r2.permutation(3)
        assert lam == lam2
        np.testing.assert_allclose(xm, lam * x + (1 - lam) * x[perm])
        np.testing.assert_allclose(tm.sum(axis=1), 1.0)


class TestGradients:
    @pytest.mark.parametrize("kind,param", GRAD_CASES)
    def test_finite_differences(self, kind, param):
        r = np.random.default_rng(zlib.crc32(f"{kind}:{param}".encode()))
        assert worst_relative_error(kind, param, r) < 1e-4

    def test_mixup_targets_gradient(self):
        r = np.random.default_rng(8)
        spec = LossSpec("focal", 3.0)
        model, x, y, _ = probe(r, spec)
        t = r.dirichlet(np.ones(model.sizes[-1]), size=x.shape[0])
        _, g = loss_and_grad(model, x, y, spec, targets=t)
        fd = central_difference(lambda th: loss_and_grad(model, x, y, spec, th, targets=t)[0], model.params)
        assert relative_error(g, fd) < 1e-4


class TestOptim:
    def test_perturb_examples(self):
        np.testing.assert_allclose(sam_perturb(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], atol=1e-15)
        np.testing.assert_array_equal(sam_perturb(np.zeros(3), 0.5), 0.0)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(1e-3, 10))
    def test_perturb_norm(self, g, rho):
        g = np.array(g)
        if np.linalg.norm(g) >= 1e-12:
            assert np.linalg.norm(sam_perturb(g, rho)) == pytest.approx(rho, rel=1e-12)

    def test_quadratic_toy(self):
        theta, _, loss = sam_step(np.array([1.0]), lambda th: (float(th[0] ** 2), 2 * th), 0.1, 0.1,
                                  momentum=0.0)
        assert loss == 1.0
        assert theta[0] == pytest.approx(0.78, abs=1e-15)

    def test_rho_zero_is_sgd(self, rng):
        theta = rng.normal(size=5)
        a = rng.normal(size=(5, 5))

        def f(th):
            return float(th @ a @ th), (a + a.T) @ th

        buf = rng.normal(size=5)
        t1, b1, _ = sam_step(theta, f, 0.0, 0.05, buf, 0.9, 5e-4)
        t2, b2 = sgd_step(theta, f(theta)[1], buf, 0.05, 0.9, 5e-4)
        assert np.array_equal(t1, t2) and np.array_equal(b1, b2)

    def test_sgd_hand_step(self):
        theta, buf = sgd_step(np.array([2.0]), np.array([0.5]), np.array([0.3]), 0.1, 0.9, 5e-4)
        assert buf[0] == pytest.approx(0.9 * 0.3 + 0.5 + 5e-4 * 2.0, abs=1e-15)
        assert theta[0] == pytest.approx(2.0 - 0.1 * 0.771, abs=1e-15)
        theta, buf = sgd_step(np.array([2.0]), np.array([0.5]), None, 0.1, 0.9, 0.0)
        assert buf[0] == 0.5 and theta[0] == pytest.approx(1.95, abs=1e-15)

    def test_ascent_direction_wins(self):
        r = np.random.default_rng(21)
        wins = 0
        trials = 100
        for _ in range(trials):
            a = r.normal(size=(6, 6))
            h = a @ a.T / 6 + np.eye(6) * 0.1
            c = r.normal(size=6)

            def f(th):
                return float(0.5 * th @ h @ th + c @ th + np.log(np.sum(np.exp(th))))

            def grad(th):
                e = np.exp(th)
                return h @ th + c + e / e.sum()

            theta, rho = r.normal(size=6), 0.05
            worst = f(theta + sam_perturb(grad(theta), rho))
            others = []
            for _ in range(20):
                v = r.normal(size=6)
                others.append(f(theta + rho * v / np.linalg.norm(v)))
            wins += worst >= max(others)
        assert wins >= 0.8 * trials

    def test_swa_examples(self):
        s = swa_update(swa_update(SwaState(), np.array([1.0])), np.array([3.0]))
        assert s.mean[0] == 2.0 and s.count == 2
        one = swa_update(SwaState(), np.array([4.0, 5.0]))
        np.testing.assert_array_equal(one.mean, [4.0, 5.0])

    @given(st.integers(1, 40), st.integers(0, 2**31))
    def test_swa_mean(self, k, seed):
        r = np.random.default_rng(seed)
        ckpts = r.normal(size=(k, 7)) * 10
        s = SwaState()
        for i, c in enumerate(ckpts):
            s = s.update(c, i)
        ref = ckpts.mean(axis=0)
        assert np.max(np.abs(s.mean - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))
        assert s.history == list(range(k))


class TestSchedule:
    def test_step_decay(self):
        assert step_decay_lr(0.1, 0, 100) == 0.1
        assert step_decay_lr(0.1, 50, 100) == pytest.approx(0.01)
        assert step_decay_lr(0.1, 75, 100) == pytest.approx(0.001)

    def test_cycle(self):
        cfg = TrainConfig(method="swa", epochs=100, swa_start=60, swa_cycle=2, base_lr=0.1).resolved()
        assert cfg.swa_lr == pytest.approx(0.01)
        assert learning_rate(cfg, 60, 0, 10) == pytest.approx(0.01)
        assert learning_rate(cfg, 61, 5, 10) == pytest.approx(0.01 * (1 - 0.9 * 0.75))
        assert learning_rate(cfg, 62, 0, 10) == pytest.approx(0.01)
        plain = TrainConfig(method="sgd", epochs=100, base_lr=0.1).resolved()
        assert learning_rate(plain, 61, 5, 10) == pytest.approx(0.01)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"method": "sam", "sam_rho": 0.0},
        {"method": "sgd", "sam_rho": 0.1},
        {"method": "swa", "epochs": 10, "swa_start": 10},
        {"method": "adam"},
        {"swa_cycle": 0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(InvalidParam):
            TrainConfig(**kw).resolved()

    def test_defaults(self):
        cfg = TrainConfig(method="fmfp", epochs=200).resolved()
        assert cfg.sam_rho == 0.05 and cfg.swa_start == 120


def moons(n=200, seed=0, label_noise=0.0):
    return make_dataset("two_moons", n, label_noise=label_noise, seed=seed)


class TestTrain:
    def test_zero_epochs_returns_init(self):
        res = train(TrainConfig(epochs=0, seed=3), moons())
        init = MlpModel.init((2, 32, 32, 2), np.random.default_rng(3))
        assert np.array_equal(res.final_model.params, init.params)
        assert res.history == [] and res.swa_model is None

    def test_deterministic(self):
        cfg = TrainConfig(method="fmfp", epochs=6, seed=7)
        a = train(cfg, moons(), moons(100, 1))
        b = train(cfg, moons(), moons(100, 1))
        assert a.history_csv() == b.history_csv()
        assert np.array_equal(a.model.params, b.model.params)

    def test_fmfp_rho_zero_matches_sgd(self):
        data, test = moons(), moons(100, 1)
        sgd = train(TrainConfig(method="sgd", epochs=5, seed=2), data, test)
        fm = train(TrainConfig(method="fmfp", epochs=5, seed=2, sam_rho=0.0, swa_start=5), data, test,
                   check=False)
        assert np.array_equal(sgd.final_model.params, fm.final_model.params)
        assert sgd.history == fm.history
        assert fm.swa_model is None

    def test_swa_collects_checkpoints(self):
        res = train(TrainConfig(method="swa", epochs=10, swa_start=4, swa_cycle=2, seed=1), moons())
        assert res.swa_state.history == [6, 8, 10]
        assert res.model is res.swa_model

    def test_diverges(self):
        cfg = TrainConfig(epochs=5, base_lr=1e8, momentum=0.0, seed=0)
        with pytest.raises(DivergedTraining) as info:
            train(cfg, moons())
        assert info.value.epoch >= 1

    @pytest.mark.parametrize("kind", ["focal", "label_smoothing", "l1_logit", "logitnorm", "ce_plus_crl"])
    def test_losses_train(self, kind):
        res = train(TrainConfig(epochs=3, loss=LossSpec(kind), mixup_alpha=0.2, seed=0), moons(), moons(50, 1))
        assert all(math.isfinite(h["train_loss"]) for h in res.history)

    def test_oe_needs_outliers(self):
        with pytest.raises(InvalidParam):
            train(TrainConfig(epochs=1, loss=LossSpec("ce_plus_oe")), moons())
        blobs = make_dataset("gaussian_blobs", 100, seed=0)
        res = train(TrainConfig(epochs=2, loss=LossSpec("ce_plus_oe")), blobs,
                    outliers=make_dataset("ring_ood", 50, seed=1))
        assert len(res.history) == 2

    def test_model_evalset_head(self):
        res = train(TrainConfig(epochs=2, seed=0), moons())
        ev = model_evalset(res.model, moons(30, 5))
        np.testing.assert_allclose(ev.head(ev.features), ev.logits, atol=1e-12)

    def test_history_csv_header(self):
        res = train(TrainConfig(epochs=2, seed=0), moons())
        lines = res.history_csv().splitlines()
        assert lines[0] == "epoch,train_loss,test_acc,test_auroc"
        assert lines[1].endswith(",,")


class TestData:
    def test_empty(self):
        d = make_dataset("two_moons", 0)
        assert len(d) == 0 and d.x.shape == (0, 2)

    @pytest.mark.parametrize("kind", ["two_moons", "gaussian_blobs"])
    def test_clean_labels(self, kind):
        d = make_dataset(kind, 300, seed=2)
        assert np.array_equal(d.labels, d.component)

    def test_label_noise_flips(self):
        d = make_dataset("gaussian_blobs", 5000, label_noise=0.2, seed=2)
        flipped = d.labels != d.component
        assert 0.17 < flipped.mean() < 0.23

    def test_byte_identical_csv(self):
        a = make_dataset("two_moons", 50, label_noise=0.1, seed=9).to_csv()
        b = make_dataset("two_moons", 50, label_noise=0.1, seed=9).to_csv()
        assert a == b and a.startswith("x0,x1,label\n")

    def test_ring_far_from_centroids(self):
        from fpkit.flatopt.data import blob_centers

        ring = make_dataset("ring_ood", 500, seed=0)
        dist = np.linalg.norm(ring.x[:, None, :] - blob_centers()[None], axis=2)
        assert dist.min() > 3.5
        assert np.all(ring.labels == -1)
