import json

import numpy as np
import pytest
from scipy import stats

from ctbounds import DgpSpec, ForestConfig, generate, oracle_truths, run_monte_carlo
from ctbounds.errors import ConfigError
from ctbounds.simulation import VARIANTS, conditional_oracle, default_config, potential_outcomes

import oracles


@pytest.fixture(scope="module")
def quadrature():
    return oracles.aggregated_truth()


@pytest.fixture(scope="module")
def paper_truths():
    return oracle_truths("paper", draws=4 * 10 ** 6, seed=1)


def test_generate_is_deterministic():
    a = generate(DgpSpec(n=1000, seed=5))
    b = generate(DgpSpec(n=1000, seed=5))
    c = generate(DgpSpec(n=1000, seed=6))
    assert a == b
    assert not a == c
    assert a.covariate_names[0] == "x1" and a.n_covariates == 10
    assert np.all(a.p == 0.5)


def test_spec_validation():
    with pytest.raises(ConfigError):
        DgpSpec(n=0)
    with pytest.raises(ConfigError):
        DgpSpec(n=10, variant="flip", p_covariates=1)
    with pytest.raises(ConfigError):
        DgpSpec(n=10, variant="other")


def test_analytic_ate(paper_truths, quadrature):
    analytic = 1.25 + 1.5 * (np.cos(0.7) - np.cos(1.3))
    assert quadrature["ate"] == pytest.approx(analytic, abs=1e-10)
    assert paper_truths.ate == pytest.approx(1.996, abs=0.01)


def test_oracle_matches_quadrature(paper_truths, quadrature):
    for key in ("ctb_lower", "ctb_upper", "tb_lower", "tb_upper", "ate_always_responders", "q"):
        assert getattr(paper_truths, key) == pytest.approx(quadrature[key], abs=0.01), key


def test_conditional_oracle_matches_quadrature():
    for x1 in (0.1, 0.5, 0.9):
        mc = conditional_oracle("paper", [x1, 0.5], draws=2 * 10 ** 6, seed=3)
        qd = oracles.conditional_truth(x1)
        assert mc["lower"] == pytest.approx(qd["lower"], abs=0.01)
        assert mc["upper"] == pytest.approx(qd["upper"], abs=0.01)
        assert mc["q"] == pytest.approx(qd["q"], abs=0.005)


@pytest.mark.parametrize("variant", VARIANTS)
def test_chain_holds_for_every_variant(variant):
    t = oracle_truths(variant, draws=2 * 10 ** 6, seed=2)
    assert t.chain_holds(), t.scalars()


def test_null_variant_has_zero_effect():
    t = oracle_truths("null", draws=10 ** 6, seed=0)
    assert t.ate == 0 and t.ate_always_responders == 0
    assert t.ctb_lower < 0 < t.ctb_upper


def test_flip_regions_on_a_grid():
    for x1 in np.linspace(0.05, 0.95, 7):
        for x2, negative in ((0.2, True), (0.8, False)):
            out = conditional_oracle("flip", [x1, x2], draws=2 * 10 ** 5, seed=4)
            assert (out["q"] > 1) == negative
            assert out["direction"] == ("negative" if negative else "positive")
            assert out["lower"] <= out["cate_always_responders"] <= out["upper"]


def test_noise_covariates_are_independent():
    data = generate(DgpSpec(n=100_000, seed=9))
    rng = np.random.default_rng(0)
    y = np.nan_to_num(data.y)
    for j in range(1, 10):
        x = data.X[:, j]
        for target in (data.s, data.d, y):
            r = stats.pearsonr(x, target)[0]
            perm = np.array([stats.pearsonr(rng.permutation(x), target)[0] for _ in range(49)])
            # 27 comparisons: 4.5 permutation SDs keeps the family-wise error tiny
            assert abs(r) <= 4.5 * perm.std(ddof=1)


def test_strata_follow_positive_monotonicity():
    rng = np.random.default_rng(1)
    n = 100_000
    x1, x2, u = rng.uniform(size=(3, n))
    _, _, s0, s1 = potential_outcomes("paper", x1, x2, u, rng.standard_normal(n),
                                      rng.standard_normal(n))
    assert not np.any(s0 & ~s1)


def test_monte_carlo_smoke(paper_truths, tmp_path):
    cfg = default_config("paper", forest=ForestConfig(num_trees=20, mtry=10))
    rep = run_monte_carlo("paper", [300], reps=2, config=cfg, truths=paper_truths, seed=3)
    again = run_monte_carlo("paper", [300], reps=2, config=cfg, truths=paper_truths, seed=3)
    assert rep.records == again.records
    assert len(rep.records) == 8
    row = rep.row("ctb", 300, "lower")
    assert row["reps_ok"] == 2 and row["truth"] == paper_truths.ctb_lower
    assert {r["estimator"] for r in rep.rows} == {"ctb", "tb", "ols", "ipw"}
    rep.write_json(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    assert json.loads((tmp_path / "r.json").read_text())["reps"] == 2
    assert (tmp_path / "r.csv").read_text().startswith("estimator,n,target")
    with pytest.raises(ConfigError):
        run_monte_carlo("paper", [300], reps=0, truths=paper_truths)
