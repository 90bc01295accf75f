import itertools
import json

import numpy as np
import pandas as pd
import pytest
from scipy import integrate, stats

from fsgl_mstate import admm, coxlik, msm_core, simstudy
from fsgl_mstate.msm_core import Transition, TransitionStructure
from fsgl_mstate.simstudy import CovariateSpec, DgmSpec, StudyConfig
from fsgl_mstate.tuning import TuningGrid

from conftest import illness_death


def one_exit(h=0.3):
    st = TransitionStructure(2, (Transition(1, 1, 2),))
    return DgmSpec(st, (h,), (CovariateSpec("X1"),), np.zeros((1, 1)), n_individuals=10)


def tiny_config(**kw):
    # smaller samples leave some replicates with monotone likelihood in the unpenalized fit
    spec = simstudy.aml_dgm(n_individuals=500)
    grid = TuningGrid(alphas=(0.5, 1.0), gammas=(0.5, 1.0), lambda_min=0.5, lambda_max=50, n_lambda=3)
    base = dict(dgm=spec, grid=grid, n_sim=2, seed=3, refine=False)
    base.update(kw)
    return StudyConfig(**base)


class TestGeneratePath:
    def test_exponential_mean(self):
        spec = one_exit(0.3)
        rng = np.random.default_rng(0)
        w = np.array([simstudy.generate_path(spec, [0.0], rng)[0][2] for _ in range(100_000)])
        se = w.std(ddof=1) / np.sqrt(len(w))
        assert abs(w.mean() - 1 / 0.3) < 3 * se

    def test_equal_hazards_split(self):
        st = TransitionStructure(3, (Transition(1, 1, 2), Transition(2, 1, 3)))
        spec = DgmSpec(st, (0.2, 0.2), (CovariateSpec("X1"),), np.zeros((1, 2)))
        rng = np.random.default_rng(1)
        dest = np.array([simstudy.generate_path(spec, [1.0], rng)[0][3] for _ in range(100_000)])
        frac = np.mean(dest == 2)
        assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / len(dest))

    def test_aml_paths_follow_edges(self):
        spec = simstudy.aml_dgm()
        st = spec.structure
        edges = {(t.from_state, t.to_state) for t in st.transitions}
        rng = np.random.default_rng(2)
        for _ in range(2000):
            path = simstudy.generate_path(spec, rng.integers(0, 2, 2).astype(float), rng)
            for (s, a, b, nxt), following in zip(path, path[1:] + [None]):
                assert (s, nxt) in edges and b > a
                if following is not None:
                    assert following[0] == nxt and following[1] == b
            assert st.is_absorbing(path[-1][3])

    def test_non_absorbing_dead_end(self):
        st = TransitionStructure(3, (Transition(1, 1, 2),), absorbing_states=(3,))
        spec = DgmSpec(st, (0.5,), (CovariateSpec("X1"),), np.zeros((1, 1)))
        with pytest.raises(ValueError, match="not marked absorbing"):
            simstudy.generate_path(spec, [0.0], np.random.default_rng(0))

    def test_censoring(self):
        spec = DgmSpec(illness_death(), (0.5, 0.5, 0.5), (CovariateSpec("X1"),), np.zeros((1, 3)),
                       censoring_time=0.3)
        rng = np.random.default_rng(3)
        for _ in range(200):
            path = simstudy.generate_path(spec, [0.0], rng)
            assert all(b <= 0.3 for _, _, b, _ in path)


class TestGenerateDataset:
    def test_absorbed_at_first_jump(self):
        st = TransitionStructure(3, (Transition(1, 1, 2), Transition(2, 1, 3)))
        spec = DgmSpec(st, (1e6, 1e-9), (CovariateSpec("X1", p=0.0),), np.zeros((1, 2)), n_individuals=1)
        ds = simstudy.generate_dataset(spec, np.random.default_rng(0))
        assert ds.trans.tolist() == [1, 2] and ds.status.tolist() == [1, 0]

    def test_censoring_zero(self):
        spec = simstudy.aml_dgm(n_individuals=50)
        spec = DgmSpec(spec.structure, spec.baseline_hazards, spec.covariates, spec.true_beta,
                       n_individuals=50, censoring_time=0.0)
        ds = simstudy.generate_dataset(spec, np.random.default_rng(0))
        assert np.all(ds.status == 0)

    def test_valid_long_format(self):
        spec = simstudy.aml_dgm(n_individuals=300)
        ds = simstudy.generate_dataset(spec, np.random.default_rng(4))
        assert msm_core.validate(ds, spec.structure).ok
        assert ds.n_individuals == 300

    def test_event_counts_match_numerical_integration(self):
        spec = simstudy.aml_dgm(n_individuals=1000)
        st, h0, B = spec.structure, np.array(spec.baseline_hazards), spec.true_beta
        expected = np.zeros(8)
        for x in itertools.product((0.0, 1.0), repeat=2):
            h = h0 * np.exp(np.array(x) @ B)
            reach = {1: 1.0}
            for t in st.transitions:  # transitions are listed in topological order
                H = sum(h[e.id - 1] for e in st.exits(t.from_state))
                p, _ = integrate.quad(lambda s: h[t.id - 1] * np.exp(-H * s), 0, np.inf)
                expected[t.id - 1] += 0.25 * reach[t.from_state] * p
                reach[t.to_state] = reach.get(t.to_state, 0.0) + reach[t.from_state] * p
        ds = simstudy.generate_dataset(spec, np.random.default_rng(5))
        counts = np.bincount(ds.trans[ds.status == 1], minlength=9)[1:]
        se = np.sqrt(1000 * expected * (1 - expected))
        assert np.all(np.abs(counts - 1000 * expected) < 3 * se)

    def test_spec_validation(self):
        st = illness_death()
        with pytest.raises(ValueError):
            DgmSpec(st, (0.1, 0.1), (CovariateSpec("X1"),), np.zeros((1, 3)))
        with pytest.raises(ValueError):
            DgmSpec(st, (0.1, 0.0, 0.1), (CovariateSpec("X1"),), np.zeros((1, 3)))
        with pytest.raises(ValueError):
            DgmSpec(st, (0.1, 0.1, 0.1), (CovariateSpec("X1"),), np.zeros((2, 3)))


class TestMetrics:
    def test_tpr(self):
        truth = np.array([1, 1, 1, 1, 1, 0, 0])
        est = np.array([1, 1, 1, 1, 0, 0, 0.0])
        sc = simstudy.selection_metrics(est, truth)
        assert sc.tpr == 0.8 and sc.fdr == 0.0

    def test_fdr(self):
        truth = np.array([1, 1, 1, 1, 0, 0, 0])
        est = np.array([1, 1, 1, 1, 2, 2, 0.0])
        sc = simstudy.selection_metrics(est, truth)
        assert sc.fdr == pytest.approx(1 / 3)
        assert (sc.tp, sc.fp, sc.tn, sc.fn) == (4, 2, 1, 0)

    def test_no_selection(self):
        sc = simstudy.selection_metrics(np.zeros(4), np.array([1.0, 0, 0, 1]))
        assert sc.fdr == 0.0 and sc.tpr == 0.0

    def test_counts_sum_over_penalized(self, rng):
        for _ in range(20):
            pen = rng.random(10) < 0.7
            sc = simstudy.selection_metrics(rng.normal(size=10) * (rng.random(10) < 0.5),
                                            rng.normal(size=10) * (rng.random(10) < 0.5), pen)
            assert sc.tp + sc.tn + sc.fp + sc.fn == pen.sum()

    def test_accuracy_exact(self):
        t = np.array([1.0, 0.0, -2.0])
        acc = simstudy.accuracy_metrics(np.tile(t, (3, 1)), t)
        assert acc.bias_mean == 0 and acc.mse_nz_mean == 0

    def test_accuracy_two_replicates(self):
        acc = simstudy.accuracy_metrics(np.array([[0.9], [1.1]]), np.array([1.0]))
        assert acc.bias_mean == pytest.approx(0.0, abs=1e-15)
        assert acc.mse_nz_mean == pytest.approx(0.01)
        assert acc.mcse_bias == pytest.approx(np.std([-0.1, 0.1], ddof=1) / np.sqrt(2))

    def test_accuracy_no_nonzero(self):
        with pytest.raises(ValueError, match="d = 0"):
            simstudy.accuracy_metrics(np.zeros((2, 2)), np.zeros(2))

    def test_required_nsim(self):
        assert simstudy.required_nsim(0.9, 0.02) == 225
        assert simstudy.required_nsim(0.5, 0.05) == 100
        assert simstudy.required_nsim(sd=0.15, mcse_cap=0.02) == 57
        with pytest.raises(ValueError):
            simstudy.required_nsim(1.0, 0.02)


class TestRecovery:
    def test_transition_one_effect(self):
        spec = simstudy.aml_dgm(n_individuals=4000)
        ds = simstudy.generate_dataset(spec, np.random.default_rng(6))
        d = msm_core.stack_design(ds, spec.structure)
        f = admm.unpenalized_fit(d)
        se = np.sqrt(np.diag(np.linalg.inv(coxlik.hessian(d, f.beta_scaled))))
        assert abs(f.beta_hat[0] - 1.5) < 3 * se[0]


class TestConfig:
    def test_defaults_are_leukemia_design(self):
        cfg = simstudy.study_config_from_dict({})
        assert cfg.dgm.structure == msm_core.aml_structure()
        assert cfg.dgm.n_individuals == 1000 and cfg.n_sim == 25
        assert cfg.grid == TuningGrid()

    @pytest.mark.parametrize("doc, key", [({"bogus": 1}, "bogus"), ({"dgm": {"nn": 3}}, "dgm.nn"),
                                          ({"grid": {"steps": 3}}, "grid.steps"),
                                          ({"solver": {"rho": 2}}, "solver.rho")])
    def test_unknown_keys(self, doc, key):
        with pytest.raises(KeyError, match=key):
            simstudy.study_config_from_dict(doc)

    def test_structure_path(self, tmp_path):
        from conftest import FIXTURES

        doc = {"dgm": {"structure": str(FIXTURES / "illness_death.json"), "true_beta": [[1, 0, 0]],
                       "covariates": [{"name": "Z"}], "baseline_hazards": [0.1, 0.1, 0.1]}}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(doc))
        cfg = simstudy.load_study_config(p)
        assert cfg.dgm.structure.n_transitions == 3 and cfg.dgm.covariate_names == ("Z",)

    def test_custom_structure_needs_truth(self):
        with pytest.raises(KeyError, match="true_beta"):
            simstudy.study_config_from_dict({"dgm": {"structure": illness_death().to_dict()}})

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            tiny_config(methods=("ridge",))


@pytest.fixture(scope="module")
def result():
    return simstudy.run_study(tiny_config())


class TestStudy:
    def test_schema(self, result):
        s = result.summary
        for c in ("method", "tpr_median", "fdr_median", "bias_mean", "mse_mean", "mcse_bias", "mcse_mse"):
            assert c in s.columns
        assert list(s.method) == list(simstudy.METHODS)
        reps = result.replicates
        assert set(reps.rep) == {1, 2} and (reps.status == "ok").all()
        assert "b_X1.1" in reps.columns and "b_X2.8" in reps.columns

    def test_lasso_is_one_one_cell(self, result):
        lasso = result.replicates[result.replicates.method == "lasso_mstate"]
        assert (lasso.alpha == 1.0).all() and (lasso.gamma == 1.0).all()
        pb = result.pair_best
        for _, row in lasso.iterrows():
            cell = pb[(pb.rep == row.rep) & (pb.alpha == 1.0) & (pb.gamma == 1.0)].iloc[0]
            assert cell["lambda"] == row["lambda"]

    def test_fsgl_is_global_best(self, result):
        pb = result.pair_best
        fs = result.replicates[result.replicates.method == "fsgl_mstate"]
        for _, row in fs.iterrows():
            assert row.gcv == pb[pb.rep == row.rep].gcv.min()

    def test_deterministic_and_order_invariant(self, result, tmp_path):
        again = simstudy.run_study(tiny_config(), jobs=2)
        pd.testing.assert_frame_equal(result.replicates, again.replicates)
        a, b = tmp_path / "a", tmp_path / "b"
        result.write(a)
        again.write(b)
        for name in ("replicates.csv", "summary.csv", "gcv_curves.csv", "pair_best.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_unpenalized_only(self):
        res = simstudy.run_study(tiny_config(methods=("unpenalized",), n_sim=2))
        cols = set(res.summary.columns)
        assert not any(c.startswith(("tpr", "fdr")) for c in cols)
        assert {"bias_mean", "mse_mean"} <= cols

    def test_modal_pair(self, result):
        a, g = result.modal_pair()
        assert (a, g) in tiny_config().grid.pairs

    def test_failures_tolerated_until_half(self, monkeypatch):
        calls = {"n": 0}
        real = simstudy.unpenalized_fit

        def flaky(*a, **k):
            calls["n"] += 1
            if calls["n"] % 2 == 0:
                raise ValueError("synthetic failure")
            return real(*a, **k)

        monkeypatch.setattr(simstudy, "unpenalized_fit", flaky)
        res = simstudy.run_study(tiny_config(methods=("unpenalized",), n_sim=4))
        assert res.n_failed == 2
        calls["n"] = 0
        monkeypatch.setattr(simstudy, "unpenalized_fit",
                            lambda *a, **k: (_ for _ in ()).throw(ValueError("always")))
        with pytest.raises(RuntimeError, match="replicates failed"):
            simstudy.run_study(tiny_config(methods=("unpenalized",), n_sim=3))
