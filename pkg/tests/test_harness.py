import csv
import json

import numpy as np
import pytest

from dspi.certificates import REGISTRY, available_checks
from dspi.errors import ConfigError
from dspi.garnet import GarnetSpec, generate_garnet, generate_layered_ssp
from dspi.harness import (
    OUTPUT_ROOT_ENV,
    ExperimentConfig,
    apply_override,
    expand_grid,
    run_experiment,
    sweep,
)
from dspi.mdp import save_mdp


def small(**solver):
    return {
        "instance": {"kind": "garnet", "n": 6, "m": 3, "branching": 3, "gamma": 0.9, "seed": 3},
        "solver": {"id": "dspi", "k_max": 80, **solver},
    }


class TestGarnet:
    def test_deterministic(self, tmp_path):
        a = generate_garnet(GarnetSpec(8, 3, 4, 0.9, seed=5))
        b = generate_garnet(GarnetSpec(8, 3, 4, 0.9, seed=5))
        save_mdp(a, tmp_path / "a.json")
        save_mdp(b, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert generate_garnet(GarnetSpec(8, 3, 4, 0.9, seed=6)) != a

    def test_dense_when_branching_full(self):
        mdp = generate_garnet(GarnetSpec(5, 2, 5, 0.9, seed=1))
        assert np.all(mdp.transition > 0)

    def test_branching_respected(self):
        mdp = generate_garnet(GarnetSpec(10, 3, 2, 0.9, seed=1))
        assert np.all((mdp.transition > 0).sum(axis=2) <= 2)

    def test_thousand_valid(self):
        rng = np.random.default_rng(0)
        for seed in range(1000):
            n = int(rng.integers(1, 12))
            spec = GarnetSpec(n, int(rng.integers(1, 5)), int(rng.integers(1, n + 1)), float(rng.uniform(0.05, 0.99)), seed)
            generate_garnet(spec).validate()

    @pytest.mark.parametrize("kw", [dict(n=0), dict(branching=9), dict(gamma=1.0)])
    def test_bad_spec(self, kw):
        args = dict(n=5, m=2, branching=2, gamma=0.9, seed=0) | kw
        with pytest.raises(ConfigError):
            GarnetSpec(**args)


class TestConfig:
    def test_override_parsing(self):
        doc = apply_override({}, "solver.beta=0.25")
        doc = apply_override(doc, "checks.names=[\"lemma1-monotone\"]")
        doc = apply_override(doc, "solver.nu=zero")
        assert doc == {"solver": {"beta": 0.25, "nu": "zero"}, "checks": {"names": ["lemma1-monotone"]}}

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            apply_override({}, "nonsense")

    def test_unknown_check_lists_available(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict(small() | {"checks": {"names": ["thm99-bogus"]}})
        assert "thm1.2-envelope" in str(exc.value)

    def test_inapplicable_check(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(small() | {"checks": {"names": ["thmD1-envelope"]}})

    def test_unknown_solver_and_section(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(small(id="magic"))
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(small() | {"plots": {}})

    def test_toml_file(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('[instance]\nkind = "garnet"\nn = 5\nm = 2\nseed = 1\n[solver]\nid = "pi"\nk_max = 20\n')
        cfg = ExperimentConfig.load(path, ["instance.gamma=0.8"])
        assert cfg.instance["gamma"] == 0.8 and cfg.solver_id == "pi"

    def test_every_check_has_a_solver(self):
        for name, spec in REGISTRY.items():
            assert spec.solvers, name


class TestRunExperiment:
    def test_all_checks_pass_and_persist(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        res = run_experiment(small() | {"output": {"dir": "run1"}})
        assert res.report.passed, res.report.summary_lines()
        names = [c.name for c in res.report.checks]
        assert sorted(names) == sorted(available_checks("dspi"))
        assert len(names) == len(set(names))
        out = tmp_path / "run1"
        with open(out / "trace.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["k", "v_gap", "qbar_gap", "envelope", "eta", "beta"]
        assert len(rows) == 82
        report = json.loads((out / "report.json").read_text())
        assert report["schema_version"] == "1.0" and report["passed"] is True
        assert "records" in json.loads((out / "trace.json").read_text())

    def test_negative_control(self):
        doc = small(tau=3.0) | {"checks": {"names": ["thm1.2-envelope"], "envelope_constant_scale": 0.0}}
        res = run_experiment(doc)
        c = res.report.check("thm1.2-envelope")
        assert not c.passed and c.worst_k is not None and c.max_slack > 0
        assert res.report.exit_code == 1

    def test_deterministic_report(self, tmp_path, monkeypatch):
        reports = []
        for root in ("a", "b"):
            monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / root))
            reports.append(run_experiment(small() | {"output": {"dir": "out"}}).report.to_dict())
        assert reports[0] == reports[1]
        for f in ("report.json", "trace.csv", "trace.json"):
            assert (tmp_path / "a" / "out" / f).read_bytes() == (tmp_path / "b" / "out" / f).read_bytes()

    @pytest.mark.parametrize(
        "doc",
        [
            small(id="pi", k_max=40),
            small(id="vi", k_max=40),
            small(id="npg", k_max=150),
            small(id="pda", k_max=80),
            small(id="dpi", k_max=400),
            small(id="dspi-lfa") | {"features": {"kind": "gaussian", "d": 6, "seed": 1}},
            small(id="npg-lfa") | {"features": {"kind": "tile", "group": 2}},
            {"instance": {"kind": "layered_ssp", "layers": 3, "width": 2, "m": 2, "seed": 1}, "solver": {"id": "dspi-ssp", "k_max": 80}},
            {"instance": {"kind": "garnet_ssp", "n": 5, "m": 2, "branching": 2, "termination_prob": 0.3, "seed": 2}, "solver": {"id": "npg-ssp", "k_max": 80}},
        ],
        ids=lambda d: d["solver"]["id"],
    )
    def test_each_solver_passes(self, doc):
        res = run_experiment(doc, write=False)
        assert res.report.passed, res.report.summary_lines()

    def test_instance_from_file(self, tmp_path):
        ssp = generate_layered_ssp(3, 2, 2, seed=2)
        path = tmp_path / "ssp.json"
        path.write_text(json.dumps(ssp.to_dict()))
        res = run_experiment({"instance": {"kind": "file", "path": str(path)}, "solver": {"id": "dspi-ssp", "k_max": 30}})
        assert res.report.instance["type"] == "ssp"


class TestSweep:
    def test_budget_across_gamma(self):
        rep = sweep(small(id="npg", beta=0.5), {"gamma": [0.8, 0.9, 0.95], "seed": [0, 1]}, eps=1e-3)
        assert len(rep.cells) == 6
        assert [c["index"] for c in rep.cells] == list(range(6))
        assert rep.passed
        assert all(c["first_k"] <= c["budget"] for c in rep.cells)

    def test_single_cell_matches_run(self):
        base = small(id="npg", beta=0.5)
        rep = sweep(base, {"gamma": [0.9]}, eps=1e-3)
        doc = base | {"solver": base["solver"] | {"k_max": rep.cells[0]["budget"]}}
        res = run_experiment(doc, write=False)
        assert rep.cells[0]["checks"] == [c.to_dict() for c in res.report.checks]

    def test_parallel_matches_serial(self, tmp_path):
        grid = {"gamma": [0.8, 0.9], "seed": [4, 5]}
        a = sweep(small(id="npg"), grid, workers=1)
        b = sweep(small(id="npg"), grid, workers=2)
        a.to_csv(tmp_path / "a.csv")
        b.to_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()

    def test_empty_grid(self):
        with pytest.raises(ConfigError):
            sweep(small(), {})
        with pytest.raises(ConfigError):
            expand_grid({"gamma": []})
        with pytest.raises(ConfigError):
            expand_grid({"tau": [1.0]})
