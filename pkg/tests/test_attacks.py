import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prsl.attacks import PAPER_PRESETS, AttackConfig, bim_attack, bim_step, input_gradient, write_pnm
from prsl.errors import AttackError, InvalidConfigError, InvalidDimensionError, InvalidInputError
from prsl.models import CaptionerSpec, ClassifierSpec, captioner_loss, classifier_loss, init_params, zero_params

CLS = ClassifierSpec(height=4, width=4, channels=3, hidden=(8,), classes=6)
CAP = CaptionerSpec(height=4, width=4, channels=3, feature_hidden=8, d_model=6, mlp_hidden=8,
                    vocab_size=10, context=8)


class TestInputGradient:
    def test_zero_weights_zero_gradient(self, rng):
        g = input_gradient(CLS, zero_params(CLS), rng.uniform(size=(4, 4, 3)), 2)
        assert np.all(g == 0.0)

    def test_classifier_finite_differences(self, rng):
        params = init_params(CLS, 0)
        img = rng.uniform(0.2, 0.8, size=(4, 4, 3))
        g = input_gradient(CLS, params, img, 3)
        f = lambda x: classifier_loss(params, CLS, x, [3], want_params=False).breakdown.total
        h = 1e-5
        flat = np.arange(img.size)
        for idx in rng.choice(flat, size=10, replace=False):
            e = np.zeros(img.size)
            e[idx] = h
            e = e.reshape(img.shape)
            numeric = (f(img + e) - f(img - e)) / (2 * h)
            analytic = g.ravel()[idx]
            assert abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric)) < 1e-5

    def test_captioner_finite_differences(self, rng):
        params = init_params(CAP, 1)
        img = rng.uniform(0.2, 0.8, size=(4, 4, 3))
        ref = [3, 4, 5]
        g = input_gradient(CAP, params, img, ref)
        f = lambda x: captioner_loss(params, CAP, x, ref, want_params=False).breakdown.total
        h = 1e-5
        for idx in rng.choice(img.size, size=10, replace=False):
            e = np.zeros(img.size)
            e[idx] = h
            e = e.reshape(img.shape)
            numeric = (f(img + e) - f(img - e)) / (2 * h)
            analytic = g.ravel()[idx]
            assert abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric)) < 1e-5

    def test_batch_items_independent(self, rng):
        params = init_params(CLS, 2)
        imgs = rng.uniform(size=(3, 4, 4, 3))
        labels = np.array([0, 4, 5])
        batch = input_gradient(CLS, params, imgs, labels)
        for i in range(3):
            np.testing.assert_allclose(batch[i], input_gradient(CLS, params, imgs[i], labels[i]),
                                       rtol=1e-12, atol=1e-15)

    def test_invalid_reference(self, rng):
        with pytest.raises(InvalidInputError):
            input_gradient(CLS, init_params(CLS, 0), rng.uniform(size=(4, 4, 3)), 6)
        with pytest.raises(InvalidInputError):
            input_gradient(CAP, init_params(CAP, 0), rng.uniform(size=(4, 4, 3)), [3, 10])


class TestBimStep:
    def test_sign_delta(self):
        x = np.array([0.5, 0.5, 0.5])
        out = bim_step(x, np.array([0.3, -0.2, 0.0]), 0.01, x, 0.5)
        np.testing.assert_allclose(out - x, [0.01, -0.01, 0.0], atol=1e-15)

    def test_scalar_trace(self):
        origin = np.array([0.5])
        x, trace = origin, []
        for _ in range(3):
            x = bim_step(x, np.ones(1), 0.1, origin, 0.15)
            trace.append(float(x[0]))
        assert trace == pytest.approx([0.6, 0.65, 0.65], abs=1e-15)

    def test_range_clamp(self):
        x = np.array([0.99])
        assert bim_step(x, np.ones(1), 0.05, x, 0.5)[0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(InvalidDimensionError):
            bim_step(np.zeros(3), np.zeros(2), 0.1, np.zeros(3), 0.1)


class TestAttackConfig:
    @pytest.mark.parametrize("kwargs", [{"eps": 0.0}, {"alpha": -1.0}, {"rounds": 0},
                                        {"iters_per_round": 0}, {"clamp": (1.0, 0.0)}])
    def test_rejected(self, kwargs):
        with pytest.raises(InvalidConfigError):
            AttackConfig(**kwargs)

    def test_round_trip(self):
        cfg = AttackConfig(eps=0.3, alpha=0.05, iters_per_round=2, rounds=4)
        assert AttackConfig.from_dict(cfg.to_dict()) == cfg

    def test_presets_recorded(self):
        assert PAPER_PRESETS["vit-gpt2"] == {"eps": 0.5, "alpha": 0.01}
        assert PAPER_PRESETS["blip2-opt"] == {"eps": 1.0, "alpha": 0.5}


class TestBimAttack:
    def test_counts(self, rng):
        trace = bim_attack(CLS, init_params(CLS, 0), rng.uniform(size=(4, 4, 3)), 1,
                           AttackConfig(rounds=2))
        assert len(trace.images) == 3 and len(trace.losses) == 2

    def test_loss_increases_first_round(self, rng):
        params = init_params(CLS, 0)
        img = rng.uniform(0.2, 0.8, size=(4, 4, 3))
        trace = bim_attack(CLS, params, img, 1, AttackConfig(eps=0.05, alpha=0.001, rounds=1))
        clean = classifier_loss(params, CLS, img, [1], want_params=False).breakdown.total
        assert trace.losses[0] > clean

    def test_deterministic(self, rng):
        img = rng.uniform(size=(4, 4, 3))
        a = bim_attack(CAP, init_params(CAP, 0), img, [3, 4], AttackConfig(rounds=3))
        b = bim_attack(CAP, init_params(CAP, 0), img, [3, 4], AttackConfig(rounds=3))
        assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))

    def test_composition(self, rng):
        params = init_params(CLS, 3)
        img = rng.uniform(size=(2, 4, 4, 3))
        cfg = AttackConfig(eps=0.1, alpha=0.03, iters_per_round=2, rounds=1)
        full = bim_attack(CLS, params, img, [0, 1], AttackConfig(eps=0.1, alpha=0.03, iters_per_round=2,
                                                                 rounds=2))
        resumed = bim_attack(CLS, params, img, [0, 1], cfg,
                             resume=bim_attack(CLS, params, img, [0, 1], cfg))
        assert len(resumed.images) == 3
        assert all(np.array_equal(x, y) for x, y in zip(full.images, resumed.images))

    def test_image_outside_clamp(self):
        with pytest.raises(InvalidInputError):
            bim_attack(CLS, init_params(CLS, 0), np.full((4, 4, 3), 1.5), 0, AttackConfig())

    def test_non_finite_loss(self, rng):
        params = init_params(CLS, 0)
        params["fc0.weight"] = np.full((8, 48), 1e308)
        with pytest.raises(AttackError):
            bim_attack(CLS, params, rng.uniform(size=(4, 4, 3)), 1, AttackConfig(rounds=1))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), eps=st.floats(0.01, 0.5), alpha=st.floats(0.005, 0.2),
           rounds=st.integers(1, 4), iters=st.integers(1, 3))
    def test_containment(self, seed, eps, alpha, rounds, iters):
        rng = np.random.default_rng(seed)
        img = rng.uniform(size=(2, 4, 4, 3))
        trace = bim_attack(CLS, init_params(CLS, seed % 7), img, rng.integers(0, 6, size=2),
                           AttackConfig(eps=eps, alpha=alpha, iters_per_round=iters, rounds=rounds))
        for snap in trace.snapshots:
            assert np.max(np.abs(snap - img)) <= eps + 1e-12
            assert snap.min() >= 0.0 and snap.max() <= 1.0

    def test_small_steps_bound(self, rng):
        # alpha * iterations <= eps with the clamp inactive
        img = rng.uniform(0.3, 0.7, size=(4, 4, 3))
        cfg = AttackConfig(eps=0.1, alpha=0.02, iters_per_round=1, rounds=4)
        trace = bim_attack(CLS, init_params(CLS, 1), img, 2, cfg)
        assert np.max(np.abs(trace.images[-1] - img)) <= 0.08 + 1e-12


class TestPnm:
    def test_ppm_text(self, tmp_path):
        path = tmp_path / "x.ppm"
        write_pnm(path, np.array([[[0.0, 0.5, 1.0]]]))
        assert path.read_text().split() == ["P3", "1", "1", "255", "0", "128", "255"]

    def test_pgm(self, tmp_path):
        path = tmp_path / "x.pgm"
        write_pnm(path, np.array([[0.0, 1.0]]))
        assert path.read_text().splitlines()[0] == "P2"
