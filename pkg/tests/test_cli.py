import json
from pathlib import Path

import numpy as np
import pytest

import oracles
from rerand.cli import main
from rerand.criteria import load_document
from rerand.engine import RandomizationPlan, draw_batch
from rerand.stats import load_population

FIXTURES = Path(__file__).parent / "fixtures"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def in_fixtures(monkeypatch):
    monkeypatch.chdir(FIXTURES)


def test_design_golden(capsys, in_fixtures):
    code, out, _ = run(capsys, "design", "--data", "pop.csv", "--criterion", "criterion.json", "--seed", "7")
    assert code == 0
    assert out == (FIXTURES / "design_golden.json").read_text()


def test_design_golden_cross_checked(in_fixtures):
    golden = json.loads((FIXTURES / "design_golden.json").read_text())
    x = load_population("pop.csv").values
    w = np.array(golden["assignment"])
    h = oracles.tier_scores(x, (1, 2), w)
    assert golden["scores"]["tier:0"] == pytest.approx(h[0], rel=1e-10)
    assert golden["scores"]["tier:1"] == pytest.approx(h[1], rel=1e-10)
    assert golden["scores"]["mahalanobis"] == pytest.approx(oracles.mahalanobis(x, w), rel=1e-10)
    assert h[0] <= 0.5 and h[1] <= 1.0
    # earlier draws in index order were all rejected
    used = golden["draws_used"]
    earlier = draw_batch(RandomizationPlan.complete(5), 10, 7, 0, used)
    assert np.array_equal(earlier[-1], w)
    for v in earlier[:-1]:
        s = oracles.tier_scores(x, (1, 2), v)
        assert s[0] > 0.5 or s[1] > 1.0


def test_design_always_accept(capsys, in_fixtures):
    code, out, _ = run(capsys, "design", "--data", "pop.csv", "--criterion", "always.json")
    assert code == 0
    assert json.loads(out)["draws_used"] == 1


def test_missing_file_is_io_error(capsys, tmp_path):
    code, out, err = run(capsys, "design", "--data", str(tmp_path / "nope.csv"), "--criterion", str(FIXTURES / "always.json"))
    assert code == 2
    assert out == ""
    assert json.loads(err)["error"]["kind"] == "io"


def test_usage_errors(capsys):
    code, _, err = run(capsys, "design", "--data", "x.csv")
    assert code == 2
    assert json.loads(err)["error"]["kind"] == "usage"
    assert run(capsys)[0] == 2
    assert run(capsys, "calibrate", "--dofs", "2", "--format", "csv")[0] == 2


def test_calibrate_examples(capsys):
    code, out, _ = run(capsys, "calibrate", "--dofs", "2", "--p", "0.5")
    assert code == 0
    rep = json.loads(out)
    assert rep["threshold"] == pytest.approx(1.3862944, abs=1e-7)
    assert rep["config"]["p"] == 0.5
    code, _, err = run(capsys, "calibrate", "--dofs", "2", "--p", "1.5")
    assert code == 1
    assert json.loads(err)["error"]["kind"] == "invalid_probability"


def test_calibrate_mixture_rerun_identical(capsys):
    args = ("calibrate", "--dofs", "2,3", "--weights", "2,1", "--p", "0.05", "--draws", "200000", "--seed", "4")
    first = run(capsys, *args)[1]
    assert json.loads(first)["method"] == "monte_carlo"
    assert run(capsys, *args)[1] == first


def test_evaluate_always_accept(capsys, in_fixtures):
    code, out, _ = run(capsys, "evaluate", "--data", "pop.csv", "--criterion", "always.json", "--draws", "3000")
    assert code == 0
    rep = json.loads(out)
    assert rep["mean_diff"] == rep["mean_diff_all"]
    assert rep["acceptance_rate"] == 1.0


def test_evaluate_threads_and_exact(capsys, in_fixtures):
    base = ("evaluate", "--data", "pop.csv", "--criterion", "criterion.json", "--draws", "20000", "--seed", "3")
    one = run(capsys, *base, "--threads", "1")[1]
    four = run(capsys, *base, "--threads", "4")[1]
    assert one == four
    code, out, _ = run(capsys, "evaluate", "--data", "pop.csv", "--criterion", "criterion.json", "--exact")
    rep = json.loads(out)
    assert rep["method"] == "exact" and rep["draws"] == 252
    assert max(abs(v) for v in rep["mean_diff"]) < 1e-12


def test_evaluate_csv_dump(capsys, in_fixtures):
    code, out, _ = run(capsys, "evaluate", "--data", "pop.csv", "--criterion", "criterion.json", "--exact", "--format", "csv")
    lines = out.strip().splitlines()
    assert lines[0] == "matrix,row,age,income,score"
    assert len(lines) == 7


def test_compare_self(capsys, in_fixtures):
    code, out, _ = run(capsys, "compare", "--criterion", "criterion.json", "--against", "criterion.json", "--dofs", "1,2", "--draws", "100000")
    assert code == 0
    assert json.loads(out)["dominated"] is False


def test_compare_score_csv(capsys, tmp_path, in_fixtures):
    rng = np.random.default_rng(0)
    h = rng.chisquare(2, size=(5000, 2))
    path = tmp_path / "h.csv"
    np.savetxt(path, h, delimiter=",", header="a,b", comments="")
    code, out, _ = run(capsys, "compare", "--criterion", "criterion.json", "--against", "always.json", "--scores", str(path))
    rep = json.loads(out)
    assert rep["draws"] == 5000
    assert rep["acceptance_delta"] > 0


def test_weights_examples(capsys, in_fixtures):
    code, out, _ = run(capsys, "weights", "--r2", "0.2,0.2", "--dofs", "3,3")
    assert json.loads(out)["weights"] == [1.0, 1.0]
    code, _, err = run(capsys, "weights", "--data", "pop.csv")
    assert code == 1  # no outcomes in the fixture
    assert json.loads(err)["error"]["kind"] == "invalid_data"


def test_simulate_and_reuse(capsys, tmp_path):
    dgp = json.dumps({"kind": "ellipsoidal", "mu": [0, 0, 0], "sigma": [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
                      "tier_sizes": [1, 2], "outcomes": {"beta1": [1, 1, 0], "beta0": [1, 0, 1], "a1": 1.0}})
    data = tmp_path / "sim.csv"
    code, out, _ = run(capsys, "simulate", "--dgp", dgp, "--n", "40", "--seed", "2", "--data", str(data))
    assert code == 0
    pop = load_population(data)
    assert pop.tier_sizes == (1, 2) and pop.y1 is not None
    code, out, _ = run(capsys, "weights", "--data", str(data))
    rep = json.loads(out)
    assert rep["method"] == "optimal_tier" and max(rep["weights"]) == 1.0


def test_criterion_fixture_round_trip():
    doc = json.loads((FIXTURES / "criterion.json").read_text())
    spec, tiers = load_document(doc)
    assert tiers is None
    assert len(spec.children) == 2
