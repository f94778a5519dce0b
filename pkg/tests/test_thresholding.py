import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyncov.covariance import DynCovEstimate, Stage
from dyncov.data import Dataset
from dyncov.forest import ForestConfig
from dyncov.simulation import ModelSpec, sample_dataset
from dyncov.thresholding import (
    ForestCV,
    LambdaSelection,
    ThresholdRule,
    apply_threshold,
    default_cn,
    lambda_grid,
    pd_correct,
    precision,
    select_lambda,
    shrink,
)
from dyncov.covariance import train_cov_forests

RULES = [
    ThresholdRule("hard"),
    ThresholdRule("soft"),
    ThresholdRule("scad"),
    ThresholdRule("alasso"),
]


class TestRuleParsing:
    def test_round_trip(self):
        for text in ("hard", "soft", "scad:3.7", "alasso:3", "scad:2.5", "alasso:1.5"):
            rule = ThresholdRule.parse(text)
            assert ThresholdRule.parse(str(rule)) == rule

    def test_defaults(self):
        assert ThresholdRule.parse("scad").a == 3.7
        assert ThresholdRule.parse("alasso").eta == 3.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            ThresholdRule.parse("ridge")
        with pytest.raises(ValueError):
            ThresholdRule("scad", a=2.0)
        with pytest.raises(ValueError):
            ThresholdRule("alasso", eta=0.0)
        with pytest.raises(ValueError):
            ThresholdRule.parse("soft:1")


class TestShrinkExamples:
    def test_soft_below_lambda(self):
        assert shrink(0.3, 0.5, ThresholdRule("soft")) == 0.0

    def test_soft_above_lambda(self):
        assert shrink(2.0, 0.5, ThresholdRule("soft")) == 1.5

    def test_hard_keeps_value(self):
        assert shrink(2.0, 0.5, ThresholdRule("hard")) == 2.0

    def test_scad_soft_region(self):
        # |z| = 0.8 <= 2 lambda = 1.0, so the soft rule applies: 0.8 - 0.5.
        assert shrink(0.8, 0.5, ThresholdRule("scad")) == pytest.approx(0.3)

    def test_scad_identity_region(self):
        # |z| = 2.0 > a * lambda = 1.85.
        assert shrink(2.0, 0.5, ThresholdRule("scad")) == 2.0

    def test_scad_middle_region(self):
        a, lam, z = 3.7, 0.5, 1.5
        expected = ((a - 1) * z - a * lam) / (a - 2)
        assert shrink(z, lam, ThresholdRule("scad")) == pytest.approx(expected)

    def test_alasso_heavier_shrink_for_small_z(self):
        rule = ThresholdRule("alasso")
        lam = 0.5
        big, small = 3.0, 0.7
        assert big - shrink(big, lam, rule) < small - shrink(small, lam, rule)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            shrink(1.0, -0.1, ThresholdRule("soft"))

    def test_vectorized(self):
        z = np.array([-2.0, -0.2, 0.0, 0.2, 2.0])
        out = shrink(z, 0.5, ThresholdRule("soft"))
        np.testing.assert_allclose(out, [-1.5, 0.0, 0.0, 0.0, 1.5])


def _check_laws(z, lam, rule):
    # The three laws hold exactly in real arithmetic; the ulp-scale slack
    # (relative to the larger of |z| and lam) only absorbs final rounding
    # of the float subtractions inside shrink.
    s = np.asarray(shrink(z, lam, rule))
    z = np.asarray(z, dtype=float)
    az = np.abs(z)
    ulps = 1e-12 * np.maximum(az, lam)
    assert np.all(np.abs(s) <= az + ulps), f"{rule}: |s(z)| > |z|"
    assert np.all(s[az <= lam] == 0.0), f"{rule}: s(z) != 0 inside [-lam, lam]"
    assert np.all(np.abs(s - z) <= lam + ulps), f"{rule}: |s(z) - z| > lam"


class TestShrinkLaws:
    @pytest.mark.parametrize("rule", RULES, ids=str)
    def test_deterministic_grid(self, rule):
        lams = [0.0, 0.25, 0.5, 1.0, 2.0]
        for lam in lams:
            pts = np.concatenate(
                [np.linspace(-5, 5, 201), [-2 * lam, -lam, lam, 2 * lam, 3.7 * lam]]
            )
            _check_laws(pts, lam, rule)

    @pytest.mark.parametrize("rule", RULES, ids=str)
    def test_random_fuzz(self, rule):
        gen = np.random.default_rng(99)
        for _ in range(50):
            lam = float(gen.uniform(0, 3))
            z = gen.uniform(-10, 10, size=200)
            _check_laws(z, lam, rule)

    @pytest.mark.parametrize("rule", RULES, ids=str)
    @given(z=st.floats(-1e8, 1e8), lam=st.floats(0, 1e8))
    def test_laws_property(self, rule, z, lam):
        _check_laws(np.array([z]), lam, rule)

    @pytest.mark.parametrize("rule", RULES, ids=str)
    @given(z=st.floats(-1e8, 1e8), lam=st.floats(0, 1e8))
    def test_odd_in_z(self, rule, z, lam):
        assert shrink(-z, lam, rule) == -shrink(z, lam, rule)


class TestApplyThreshold:
    def _raw(self, matrix):
        return DynCovEstimate(u=np.zeros(1), matrix=matrix, stage=Stage.RAW)

    def test_lambda_zero_is_identity(self):
        m = np.array([[2.0, 0.3], [0.3, 1.0]])
        for rule in RULES:
            out = apply_threshold(self._raw(m), 0.0, rule)
            np.testing.assert_array_equal(out.matrix, m)
            assert out.stage is Stage.THRESHOLDED

    def test_huge_lambda_hard_gives_diagonal(self):
        m = np.array([[2.0, 0.3, -0.1], [0.3, 1.0, 0.2], [-0.1, 0.2, 0.5]])
        out = apply_threshold(self._raw(m), 10.0, ThresholdRule("hard"))
        np.testing.assert_array_equal(out.matrix, np.diag(np.diagonal(m)))

    def test_small_diagonal_survives(self):
        m = np.array([[0.01, 0.3], [0.3, 0.01]])
        out = apply_threshold(self._raw(m), 0.5, ThresholdRule("soft"))
        assert out.matrix[0, 0] == 0.01
        assert out.matrix[1, 1] == 0.01
        assert out.matrix[0, 1] == 0.0

    def test_symmetry_preserved(self):
        gen = np.random.default_rng(5)
        a = gen.standard_normal((6, 6))
        m = (a + a.T) / 2
        for rule in RULES:
            out = apply_threshold(self._raw(m), 0.4, rule)
            np.testing.assert_array_equal(out.matrix, out.matrix.T)

    def test_stage_mismatch(self):
        est = DynCovEstimate(u=np.zeros(1), matrix=np.eye(2), stage=Stage.THRESHOLDED)
        with pytest.raises(ValueError):
            apply_threshold(est, 0.1, ThresholdRule("soft"))

    def test_zero_set_monotone_in_lambda(self):
        gen = np.random.default_rng(7)
        a = gen.standard_normal((8, 8))
        m = (a + a.T) / 2
        for rule in (ThresholdRule("hard"), ThresholdRule("soft")):
            prev_zeros = None
            for lam in np.linspace(0, 3, 13):
                zeros = {
                    (j, r)
                    for j in range(8)
                    for r in range(8)
                    if j != r and apply_threshold(self._raw(m), lam, rule).matrix[j, r] == 0
                }
                if prev_zeros is not None:
                    assert prev_zeros <= zeros
                prev_zeros = zeros


class TestLambdaGrid:
    def test_shape_and_anchors(self):
        m = np.array([[2.0, 0.5], [0.5, 1.0]])
        grid = lambda_grid(m, size=20)
        assert len(grid) == 21
        assert grid[0] == 0.0
        assert grid[-1] == 0.5
        assert np.all(np.diff(grid) > 0)

    def test_degenerate(self):
        np.testing.assert_array_equal(lambda_grid(np.diag([1.0, 2.0])), [0.0])

    def test_selection_invariants(self):
        grid = np.array([0.0, 0.1, 0.2])
        sel = LambdaSelection(lam=0.1, grid=grid, cv_scores=np.zeros(3))
        assert sel.lam in sel.grid
        with pytest.raises(ValueError):
            LambdaSelection(lam=0.3, grid=grid, cv_scores=np.zeros(3))
        with pytest.raises(ValueError):
            LambdaSelection(lam=0.1, grid=np.array([0.1, 0.2]), cv_scores=np.zeros(2))


class TestSelectLambda:
    def _forests(self, dataset, trees=40):
        cfg = ForestConfig(n_trees=trees, min_leaf=3, seed=0)
        return train_cov_forests(dataset, cfg.resolve(dataset.n, dataset.d))

    def test_degenerate_grid_returns_zero(self):
        # p = 1 has no off-diagonal, so the grid collapses to {0}.
        gen = np.random.default_rng(0)
        ds = Dataset(gen.standard_normal((30, 1)), gen.uniform(-1, 1, (30, 1)))
        forests = self._forests(ds)
        sel = select_lambda(ds, forests, np.zeros(1), ThresholdRule("soft"), folds=3)
        assert sel.lam == 0.0
        assert len(sel.grid) == 1

    def test_scores_align_with_grid(self):
        spec = ModelSpec(model=1, p=4, d=2, n=40)
        ds = sample_dataset(spec, np.random.default_rng(1))
        forests = self._forests(ds)
        sel = select_lambda(ds, forests, np.zeros(2), ThresholdRule("soft"), folds=3, grid_size=20)
        assert len(sel.grid) == 21
        assert len(sel.cv_scores) == 21
        assert sel.lam == sel.grid[int(np.argmin(sel.cv_scores))]

    def test_diagonal_truth_zeroes_off_diagonal(self):
        # Generator 3 with u1 = -0.9 has a diagonal population matrix, so the
        # chosen penalty should kill every off-diagonal entry there.
        spec = ModelSpec(model=3, p=8, d=2, n=200)
        ds = sample_dataset(spec, np.random.default_rng(4))
        cfg = ForestConfig(n_trees=100, min_leaf=4, seed=0).resolve(ds.n, ds.d)
        forests = train_cov_forests(ds, cfg)
        u = np.array([-0.9, 0.0])
        rule = ThresholdRule("soft")
        sel = select_lambda(ds, forests, u, rule, folds=5)
        from dyncov.covariance import raw_cov

        raw = raw_cov(*forests, ds, u)
        final = apply_threshold(raw, sel.lam, rule).matrix
        off = final - np.diag(np.diagonal(final))
        assert np.count_nonzero(off) == 0

    def test_cv_reuse_matches_fresh(self):
        spec = ModelSpec(model=1, p=3, d=2, n=40)
        ds = sample_dataset(spec, np.random.default_rng(2))
        forests = self._forests(ds)
        cv = ForestCV(ds, forests[0].config, folds=3)
        u = np.array([0.2, -0.1])
        fresh = select_lambda(ds, forests, u, ThresholdRule("soft"), folds=3)
        reused = select_lambda(ds, forests, u, ThresholdRule("soft"), folds=3, cv=cv)
        assert fresh.lam == reused.lam
        np.testing.assert_array_equal(fresh.cv_scores, reused.cv_scores)

    def test_too_few_rows(self):
        gen = np.random.default_rng(0)
        ds = Dataset(gen.standard_normal((6, 2)), gen.uniform(-1, 1, (6, 1)))
        with pytest.raises(ValueError):
            ForestCV(ds, ForestConfig(n_trees=5, min_leaf=1), folds=5)


class TestPdCorrect:
    def _thr(self, matrix):
        return DynCovEstimate(u=np.zeros(1), matrix=matrix, stage=Stage.THRESHOLDED)

    def test_shift_identity(self):
        m = np.diag([-0.3, 1.0])
        out, info = pd_correct(self._thr(m), c_n=0.01)
        assert info.applied
        assert info.delta_hat == pytest.approx(0.3)
        np.testing.assert_allclose(np.linalg.eigvalsh(out.matrix)[0], 0.01, atol=1e-12)
        assert out.stage is Stage.PD_CORRECTED

    def test_already_pd_unchanged(self):
        m = np.array([[2.0, 0.1], [0.1, 1.0]])
        out, info = pd_correct(self._thr(m))
        assert not info.applied
        np.testing.assert_array_equal(out.matrix, m)

    def test_zero_matrix_boundary(self):
        # mu_min = 0 counts as "<= 0", so the zero matrix becomes c_n * I.
        out, info = pd_correct(self._thr(np.zeros((2, 2))), c_n=0.05)
        assert info.applied
        np.testing.assert_allclose(out.matrix, 0.05 * np.eye(2))

    def test_default_cn_scale(self):
        m = np.diag([3.0, -1.0])
        assert default_cn(m) == pytest.approx(3e-4)
        assert default_cn(-np.eye(2)) == 1e-8

    def test_requires_thresholded_stage(self):
        est = DynCovEstimate(u=np.zeros(1), matrix=np.eye(2), stage=Stage.RAW)
        with pytest.raises(ValueError):
            pd_correct(est)

    def test_invalid_cn(self):
        with pytest.raises(ValueError):
            pd_correct(self._thr(np.eye(2)), c_n=0.0)


class TestPrecision:
    def _pd(self, matrix):
        return DynCovEstimate(u=np.zeros(1), matrix=matrix, stage=Stage.PD_CORRECTED)

    def test_diagonal(self):
        np.testing.assert_allclose(precision(self._pd(np.diag([1.0, 4.0]))), np.diag([1.0, 0.25]))

    def test_scaled_identity(self):
        np.testing.assert_allclose(precision(self._pd(0.01 * np.eye(3))), 100.0 * np.eye(3))

    def test_residual_contract(self):
        gen = np.random.default_rng(11)
        a = gen.standard_normal((5, 5))
        m = a @ a.T + 0.5 * np.eye(5)
        inv = precision(self._pd(m))
        assert np.abs(m @ inv - np.eye(5)).max() < 1e-8

    def test_stage_guard(self):
        est = DynCovEstimate(u=np.zeros(1), matrix=np.eye(2), stage=Stage.RAW)
        with pytest.raises(ValueError):
            precision(est)
