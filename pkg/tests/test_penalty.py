import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as hst

from fsgl_mstate import msm_core, penalty
from fsgl_mstate.msm_core import Transition, TransitionStructure
from fsgl_mstate.penalty import build_structure, penalty_value, row_tuning

from conftest import illness_death


def two_transitions(pairs=((1, 2),)):
    return TransitionStructure(3, (Transition(1, 1, 2), Transition(2, 1, 3)), pairs)


def closed_forms(beta, P, Q, pairs, w):
    B = beta.reshape(P, Q)
    lasso = np.abs(beta).sum()
    fusion = sum(np.abs(B[:, a - 1] - B[:, b - 1]).sum() for a, b in pairs)
    group = w * np.linalg.norm(B, axis=0).sum()
    return lasso, fusion, group


class TestBuildStructure:
    def test_aml_dimensions(self):
        ps = build_structure(msm_core.aml_structure(), 2)
        assert ps.K.shape == (36, 16)
        assert ps.n_fusion == 4
        np.testing.assert_array_equal(ps.K[:16], np.eye(16))

    def test_single_cell(self):
        ps = build_structure(TransitionStructure(2, (Transition(1, 1, 2),)), 1)
        np.testing.assert_array_equal(ps.K, [[1.0], [1.0]])

    def test_fusion_row(self):
        ps = build_structure(two_transitions(), 1)
        np.testing.assert_array_equal(ps.K[2], [1.0, -1.0])
        assert ps.row_labels[2] == "fuse:X1.(1,2)"

    def test_row_shapes(self):
        st = msm_core.aml_structure()
        P, Q = 3, 8
        ps = build_structure(st, P)
        assert ps.n_rows == P * Q + len(st.similar_pairs) * P + P * Q
        fus = ps.K[P * Q: P * Q + ps.n_fusion]
        for row in fus:
            nz = np.flatnonzero(row)
            assert sorted(row[nz]) == [-1.0, 1.0]
            assert nz[0] // Q == nz[1] // Q  # same covariate
        # pair-major, then covariate
        assert ps.row_labels[P * Q: P * Q + 3] == ("fuse:X1.(3,7)", "fuse:X2.(3,7)", "fuse:X3.(3,7)")
        for q in range(1, Q + 1):
            rows = ps.K[ps.group_rows(q - 1)]
            cols = sorted(np.flatnonzero(rows.any(axis=0)))
            assert cols == [p * Q + q - 1 for p in range(P)]

    def test_unpenalized_removed_everywhere(self):
        st = msm_core.aml_structure()
        ps = build_structure(st, 2, penalized_flags=[True, False])
        Q = 8
        np.testing.assert_array_equal(ps.zeta[Q:], 0.0)
        np.testing.assert_array_equal(ps.zeta[:Q], 1.0)
        assert not ps.K[16:, Q:].any()
        assert ps.n_fusion == 2 and list(ps.group_sizes) == [1] * Q

    def test_all_unpenalized_transition_has_empty_group(self):
        ps = build_structure(illness_death(), 1, penalized_flags=[False])
        assert list(ps.group_sizes) == [0, 0, 0]
        assert penalty_value(ps, np.array([1.0, 2.0, 3.0]), 1.0, 0.3, 0.7) == 0.0

    def test_unknown_pair(self):
        st = TransitionStructure(3, (Transition(1, 1, 2), Transition(2, 1, 3)))
        object.__setattr__(st, "similar_pairs", ((1, 5),))
        with pytest.raises(ValueError, match="unknown transition"):
            build_structure(st, 1)

    def test_full_column_rank(self):
        ps = build_structure(msm_core.aml_structure(), 2)
        assert np.linalg.matrix_rank(ps.K) == 16

    def test_csv_labels(self, tmp_path):
        ps = build_structure(illness_death(), 2)
        p = tmp_path / "K.csv"
        ps.to_csv(p)
        df = pd.read_csv(p)
        assert df["row"].iloc[0] == "lasso:X1.1"
        assert "group:3:X2.3" in set(df["row"])
        np.testing.assert_array_equal(df.iloc[:, 1:].to_numpy(), ps.K)


class TestPenaltyValue:
    def test_zero(self):
        ps = build_structure(illness_death(), 2)
        assert penalty_value(ps, np.zeros(6), 3.0, 0.4, 0.6) == 0.0

    def test_lasso_example(self):
        ps = build_structure(two_transitions(()), 1)
        assert penalty_value(ps, np.array([1.0, -2.0]), 2.0, 1.0, 1.0) == pytest.approx(6.0)

    def test_fusion_example(self):
        ps = build_structure(two_transitions(), 1)
        assert penalty_value(ps, np.array([3.0, 1.0]), 1.0, 1.0, 0.0) == pytest.approx(2.0)

    @pytest.mark.parametrize("lam, alpha, gamma", [(0.0, 1, 1), (-1.0, 1, 1), (1.0, 1.5, 1), (1.0, 0.5, -0.1)])
    def test_invalid(self, lam, alpha, gamma):
        ps = build_structure(two_transitions(), 1)
        with pytest.raises(ValueError):
            penalty_value(ps, np.zeros(2), lam, alpha, gamma)

    def test_reductions(self, rng):
        st = msm_core.aml_structure()
        P, Q = 2, 8
        ps = build_structure(st, P)
        w = np.sqrt(P)
        for _ in range(200):
            beta = rng.normal(size=P * Q) * rng.integers(0, 2, size=P * Q)
            lam = float(rng.uniform(0.1, 10))
            lasso, fusion, group = closed_forms(beta, P, Q, st.similar_pairs, w)
            assert penalty_value(ps, beta, lam, 1, 1) == pytest.approx(lam * lasso, rel=1e-12, abs=1e-12)
            assert penalty_value(ps, beta, lam, 0, 1) == pytest.approx(lam * group, rel=1e-12, abs=1e-12)
            v10 = penalty_value(ps, beta, lam, 1, 0)
            assert v10 == pytest.approx(lam * fusion, rel=1e-12, abs=1e-12)
            assert penalty_value(ps, beta, lam, 0, 0) == v10


class TestRowTuning:
    def test_lasso_only_when_one_one(self):
        ps = build_structure(illness_death(), 2)
        thr = row_tuning(ps, 4.0, 1.0, 1.0)
        assert not thr.scalar[ps.n_coef:].any() and not thr.group.any()
        np.testing.assert_allclose(thr.scalar[: ps.n_coef], 4.0)

    def test_zero_zeta(self):
        ps = build_structure(illness_death(), 2, penalized_flags=[True, False])
        thr = row_tuning(ps, 4.0, 1.0, 1.0)
        np.testing.assert_array_equal(thr.scalar[3:6], 0.0)

    def test_arithmetic(self):
        P = 3
        ps = build_structure(illness_death(), P)
        thr = row_tuning(ps, 10.0, 0.75, 0.5)
        np.testing.assert_allclose(thr.scalar[: ps.n_coef], 3.75)
        np.testing.assert_allclose(thr.scalar[ps.n_coef:], 5.0)
        np.testing.assert_allclose(thr.group, 1.25 * np.sqrt(P))

    def test_lambda_zero_allowed(self):
        ps = build_structure(illness_death(), 1)
        assert row_tuning(ps, 0.0, 0.5, 0.5).all_zero


@settings(max_examples=100, deadline=None)
@given(hst.integers(0, 2**32 - 1), hst.floats(0.01, 50), hst.floats(0, 1), hst.floats(0, 1))
def test_matrix_form_equals_closed_form(seed, lam, alpha, gamma):
    rng = np.random.default_rng(seed)
    pen = rng.random(3) < 0.7
    ps = build_structure(msm_core.aml_structure(), 3, penalized_flags=pen)
    beta = rng.normal(size=24)
    direct = penalty_value(ps, beta, lam, alpha, gamma)
    via_K = penalty.penalty_from_thresholds(ps, row_tuning(ps, lam, alpha, gamma), beta)
    assert via_K == pytest.approx(direct, rel=1e-12, abs=1e-12)
