import math

import numpy as np
import pytest

from conftest import tiny_config
from rgsmvae import checks, rgsm
from rgsmvae.errors import ContractError
from rgsmvae.model import ModelConfig, VoiceVAE

SQRT_008 = math.sqrt(0.08)


def random_candidate_oracle(w, lam, kind, rng, n=10_000):
    """Smallest proximal objective over random points, zero and w itself."""
    scale = np.linalg.norm(w) + 1.0
    cands = np.vstack([rng.uniform(-scale, scale, (n, w.size)), np.zeros(w.size), w])
    norms = np.linalg.norm(cands, axis=1)
    pen = lam * (norms > 0) if kind == "gl0" else lam * norms
    return float(np.min(0.5 * ((cands - w) ** 2).sum(axis=1) + pen))


class TestProxGl0:
    def test_below_threshold_zeroed(self):
        np.testing.assert_array_equal(rgsm.prox_gl0([0.2, 0.1], 0.04), [0.0, 0.0])
        assert checks.brute_force_prox_value(np.array([0.2, 0.1]), 0.04, "gl0") == pytest.approx(0.025)

    def test_above_threshold_kept(self):
        np.testing.assert_array_equal(rgsm.prox_gl0([0.3, 0.2], 0.04), [0.3, 0.2])

    def test_zero_vector(self):
        for lam in (0.0, 0.04, 5.0):
            np.testing.assert_array_equal(rgsm.prox_gl0(np.zeros(3), lam), 0)

    def test_tie_follows_strict_indicator(self):
        w = np.array([SQRT_008, 0.0])
        assert np.linalg.norm(w) == math.sqrt(2 * 0.04)
        np.testing.assert_array_equal(rgsm.prox_gl0(w, 0.04), [0.0, 0.0])
        # both candidates are minimizers at the tie
        assert 0.5 * SQRT_008 ** 2 == pytest.approx(0.04, rel=1e-12)

    def test_idempotent(self, rng):
        for _ in range(20):
            w = rng.standard_normal(4) * 0.3
            once = rgsm.prox_gl0(w, 0.04)
            np.testing.assert_array_equal(rgsm.prox_gl0(once, 0.04), once)

    def test_negative_lambda(self):
        with pytest.raises(ContractError):
            rgsm.prox_gl0([1.0], -0.1)


class TestProxGl:
    def test_shrinks_norm(self):
        np.testing.assert_allclose(rgsm.prox_gl([0.3, 0.4], 0.04), [0.276, 0.368], rtol=1e-12)

    def test_small_group_zeroed(self):
        np.testing.assert_array_equal(rgsm.prox_gl([0.03, 0.0], 0.04), [0.0, 0.0])

    def test_lambda_zero_is_identity(self, rng):
        w = rng.standard_normal(5)
        np.testing.assert_array_equal(rgsm.prox_gl(w, 0.0), w)

    def test_zero_vector_no_nan(self):
        np.testing.assert_array_equal(rgsm.prox_gl(np.zeros(3), 0.0), 0)

    def test_non_expansive(self, rng):
        for _ in range(200):
            a, b = rng.standard_normal(4), rng.standard_normal(4)
            lam = rng.uniform(0, 2)
            assert np.linalg.norm(rgsm.prox_gl(a, lam) - rgsm.prox_gl(b, lam)) <= np.linalg.norm(a - b) + 1e-12


class TestProxOptimality:
    @pytest.mark.parametrize("kind,prox", [("gl0", rgsm.prox_gl0), ("gl", rgsm.prox_gl)])
    def test_beats_random_candidates(self, kind, prox):
        rng = np.random.default_rng(7)
        for _ in range(200):
            dim = int(rng.integers(1, 9))
            w, lam = rng.standard_normal(dim) * rng.uniform(0.1, 2), float(rng.uniform(0.01, 2))
            z = prox(w, lam)
            got = 0.5 * np.sum((z - w) ** 2) + (lam * (np.linalg.norm(z) > 0) if kind == "gl0"
                                                 else lam * np.linalg.norm(z))
            assert got <= random_candidate_oracle(w, lam, kind, rng) + 1e-9

    def test_suite_passes(self):
        res = checks.check_prox()
        assert res.passed and res.cases == 400


class TestColumns:
    def test_prox_columns_matches_per_column(self, rng):
        W = rng.standard_normal((6, 9)) * 0.15
        for kind, prox in (("gl0", rgsm.prox_gl0), ("gl", rgsm.prox_gl)):
            want = np.stack([prox(W[:, j], 0.04) for j in range(9)], axis=1)
            np.testing.assert_allclose(rgsm.prox_columns(W, 0.04, kind), want, rtol=1e-12)

    def test_penalty_values(self):
        W = np.array([[3.0, 0.0], [4.0, 0.0]])
        assert rgsm.penalty_value(W, "gl0") == 1
        assert rgsm.penalty_value(W, "gl") == 5
        assert rgsm.penalty_value(np.zeros((3, 3)), "gl0") == rgsm.penalty_value(np.zeros((3, 3)), "gl") == 0

    def test_prox_never_raises_gl0(self, rng):
        W = rng.standard_normal((4, 20)) * 0.2
        assert rgsm.penalty_value(rgsm.prox_columns(W, 0.04), "gl0") <= rgsm.penalty_value(W, "gl0")

    def test_groups_cover_matrix(self):
        part = rgsm.GroupPartition("w", (3, 4), True)
        flat = np.concatenate(part.groups())
        assert sorted(flat) == list(range(12))
        np.testing.assert_array_equal(part.groups()[1], [1, 5, 9])


class TestPartitions:
    def test_width_rule_at_full_size(self):
        model = VoiceVAE(ModelConfig(), seed=0)
        reg = {p.layer for p in rgsm.build_partitions(model) if p.regularized}
        assert reg == {
            "encoder.fc.0.weight", "decoder.fc.0.weight", "decoder.fc.1.weight",
            "decoder.lstm.0.l0.fwd.weight_ih", "decoder.lstm.0.l0.fwd.weight_hh",
            "decoder.lstm.1.l0.fwd.weight_ih", "decoder.lstm.1.l0.fwd.weight_hh",
            "decoder.lstm.1.l1.fwd.weight_ih", "decoder.lstm.1.l1.fwd.weight_hh",
        }

    def test_biases_and_convs_never_partitioned(self, tiny_model):
        names = {p.layer for p in rgsm.build_partitions(tiny_model, min_width=0)}
        assert not any(n.endswith(".bias") for n in names)
        assert not any(".conv." in n or n.startswith("postnet") or ".attn." in n for n in names)


class TestStep:
    def test_degenerates_to_gradient_descent(self):
        res = checks.check_rgsm(steps=100)
        assert res.passed, res.failures

    def test_hand_evaluated_scalar_group(self):
        cfg = rgsm.RgsmConfig(alpha=0.1, beta_split=0.1, lam=0.04, lambda_l=0.0)
        w = {"w": np.array([[0.1]])}
        out = rgsm.rgsm_step(w, {"w": np.zeros((1, 1))}, {}, cfg, regularized={"w"})
        np.testing.assert_allclose(out["w"], [[0.099]], rtol=1e-12)

    def test_group_above_threshold_only_feels_gl_term(self, rng):
        cfg = rgsm.RgsmConfig(alpha=0.1, beta_split=0.1, lam=0.04, lambda_l=1e-2)
        w = rng.standard_normal((3, 2)) + 2.0
        g = rng.standard_normal((3, 2))
        out = rgsm.rgsm_step({"w": w}, {"w": g}, {}, cfg, regularized={"w"})["w"]
        want = w - 0.1 * (g + 1e-2 * w / np.linalg.norm(w, axis=0))
        np.testing.assert_allclose(out, want, rtol=1e-12)

    def test_zero_group_stays_zero(self):
        cfg = rgsm.RgsmConfig(alpha=0.1, lambda_l=1e-2)
        w = np.zeros((3, 2))
        out = rgsm.rgsm_step({"w": w}, {"w": np.zeros((3, 2))}, {}, cfg, regularized={"w"})["w"]
        np.testing.assert_array_equal(out, 0)

    def test_unregularized_gets_plain_descent(self, rng):
        cfg = rgsm.RgsmConfig(alpha=0.3)
        w, g = rng.standard_normal(4), rng.standard_normal(4)
        np.testing.assert_array_equal(rgsm.rgsm_step({"b": w}, {"b": g}, {}, cfg)["b"], w - 0.3 * g)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            rgsm.rgsm_step({"w": np.zeros((2, 2))}, {"w": np.zeros(4)}, {}, rgsm.RgsmConfig())

    def test_u_refreshed_once_per_epoch(self, tiny_model):
        parts = rgsm.build_partitions(tiny_model, min_width=16)
        opt = rgsm.RGSM(tiny_model.params, parts, rgsm.RgsmConfig())
        name = next(p.layer for p in parts if p.regularized)
        opt.begin_epoch(0)
        u0 = opt.state[name].copy()
        tiny_model.params[name].grad = np.ones_like(tiny_model.params[name].data)
        opt.step()
        np.testing.assert_array_equal(opt.state[name], u0)
        opt.begin_epoch(1)
        assert not np.array_equal(opt.state[name], u0)

    def test_step_decay(self):
        opt = rgsm.RGSM({}, [], rgsm.RgsmConfig(alpha=1.0, lr_decay=0.5, lr_decay_every=2))
        alphas = []
        for e in range(5):
            opt.begin_epoch(e)
            alphas.append(opt.alpha)
        assert alphas == [1.0, 1.0, 0.5, 0.5, 0.25]

    def test_config_validation(self):
        with pytest.raises(ContractError):
            rgsm.RgsmConfig(alpha=0.0)
        with pytest.raises(ContractError):
            rgsm.RgsmConfig(penalty="l1")


class TestPruneAndReport:
    def _setup(self):
        model = VoiceVAE(tiny_config(), seed=0)
        parts = rgsm.build_partitions(model, min_width=16)
        return model, parts

    def test_fresh_init_has_no_zero_groups(self):
        model, parts = self._setup()
        assert rgsm.zero_group_fraction(rgsm.sparsity_report(model.params, parts)) == 0.0

    def test_huge_lambda_prunes_everything(self):
        model, parts = self._setup()
        rgsm.hard_prune(model.params, parts, 1e6)
        report = rgsm.sparsity_report(model.params, parts)
        assert all(r["fraction"] == 1.0 for r in report)
        assert [r["groups"] for r in report] == [p.num_groups for p in parts if p.regularized]

    def test_idempotent_and_consistent(self):
        model, parts = self._setup()
        name = next(p.layer for p in parts if p.regularized)
        model.params[name].data[:, ::3] *= 0.01
        rgsm.hard_prune(model.params, parts, 0.04)
        once = model.state()
        rgsm.hard_prune(model.params, parts, 0.04)
        for k, v in once.items():
            np.testing.assert_array_equal(model.params[k].data, v)
        report = {r["layer"]: r for r in rgsm.sparsity_report(model.params, parts)}
        norms = rgsm.column_norms(model.params[name].data)
        assert report[name]["zero"] == int(np.sum(norms == 0)) > 0

    def test_large_columns_untouched(self):
        model, parts = self._setup()
        before = model.state()
        rgsm.hard_prune(model.params, parts, 1e-6)
        for k, v in before.items():
            np.testing.assert_array_equal(model.params[k].data, v)

    def test_report_lines_are_json(self):
        import json

        model, parts = self._setup()
        lines = rgsm.report_lines(rgsm.sparsity_report(model.params, parts)).splitlines()
        assert set(json.loads(lines[0])) == {"layer", "groups", "zero", "fraction"}
