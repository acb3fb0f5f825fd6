"""Command-line interface, exit codes, manifests and determinism."""

import json
from pathlib import Path

import pytest

from hierfit.cli import (
    EXIT_BAD_COMPARISON,
    EXIT_NONCONVERGENCE,
    EXIT_OK,
    EXIT_USER,
    main,
)

CONFIG = """\
n_blocks = 2
n_plants = 1
time_points = 30,60
formula = height ~ time
beta.(Intercept) = 10
beta.time = 0.5
sigma2_plot = 2
sigma2_subplot = 1
sigma2_plant = 0.5
sigma2 = 1
"""

MODEL = "height ~ time, random = block/plot/subplot/plant"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config file plus one simulated dataset + fit, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "truth.cfg"
    cfg.write_text(CONFIG)
    data = root / "data.csv"
    assert main(["simulate", "--config", str(cfg), "--seed", "11",
                 "--out", str(data)]) == EXIT_OK
    fit_dir = root / "fit"
    assert main(["fit", "--data", str(data), "--model", MODEL,
                 "--n-starts", "1", "--out", str(fit_dir)]) == EXIT_OK
    return root, cfg, data, fit_dir


class TestSimulate:
    def test_deterministic_and_manifest(self, workspace, tmp_path):
        root, cfg, data, _ = workspace
        again = tmp_path / "again.csv"
        assert main(["simulate", "--config", str(cfg), "--seed", "11",
                     "--out", str(again)]) == EXIT_OK
        assert again.read_bytes() == data.read_bytes()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["seed"] == 11
        assert str(again) in manifest["outputs"]
        assert "wall_time_seconds" in manifest

    def test_reps_writes_numbered_files(self, workspace, tmp_path):
        _, cfg, _, _ = workspace
        out = tmp_path / "rep.csv"
        assert main(["simulate", "--config", str(cfg), "--seed", "5",
                     "--reps", "3", "--out", str(out)]) == EXIT_OK
        files = sorted(p.name for p in tmp_path.glob("rep_*.csv"))
        assert files == ["rep_1.csv", "rep_2.csv", "rep_3.csv"]
        # consecutive seeds give different draws
        assert (tmp_path / "rep_1.csv").read_bytes() != (tmp_path / "rep_2.csv").read_bytes()

    def test_missing_config_is_user_error(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.cfg"),
                     "--seed", "1", "--out", str(tmp_path / "x.csv")]) == EXIT_USER

    def test_bad_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("growth_rate = 3\n")
        assert main(["simulate", "--config", str(cfg), "--seed", "1",
                     "--out", str(tmp_path / "x.csv")]) == EXIT_USER


class TestFit:
    def test_outputs_and_manifest(self, workspace):
        _, _, data, fit_dir = workspace
        doc = json.loads((fit_dir / "fit.json").read_text())
        assert doc["converged"] is True
        assert doc["model"] == MODEL
        assert "loglik" in doc and "n_params" in doc
        anova = (fit_dir / "anova.txt").read_text()
        assert "time" in anova and "F-value" in anova
        manifest = json.loads((fit_dir / "manifest.json").read_text())
        assert manifest["command"] == "fit"
        assert manifest["model"] == MODEL

    def test_varfunc_flag(self, workspace, tmp_path):
        _, _, data, _ = workspace
        out = tmp_path / "vf"
        assert main(["fit", "--data", str(data), "--model", MODEL,
                     "--varfunc", "power:time", "--n-starts", "1",
                     "--out", str(out)]) == EXIT_OK
        doc = json.loads((out / "fit.json").read_text())
        assert "power(time)" in doc["model"]
        assert doc["variance_components"]["delta"] is not None

    def test_conflicting_varfunc(self, workspace, tmp_path):
        _, _, data, _ = workspace
        assert main(["fit", "--data", str(data),
                     "--model", MODEL + ", varfunc = power(time)",
                     "--varfunc", "power:time",
                     "--out", str(tmp_path / "x")]) == EXIT_USER

    def test_malformed_model(self, workspace, tmp_path):
        _, _, data, _ = workspace
        assert main(["fit", "--data", str(data), "--model", "height ~~ time",
                     "--out", str(tmp_path / "x")]) == EXIT_USER

    def test_missing_data_file(self, tmp_path):
        assert main(["fit", "--data", str(tmp_path / "none.csv"),
                     "--model", MODEL, "--out", str(tmp_path / "x")]) == EXIT_USER

    def test_gg_nonpositive_response_exit3_with_json(self, workspace, tmp_path):
        _, _, data, _ = workspace
        # zero out one height: table loads, but GG support check fails
        lines = Path(data).read_text().splitlines()
        header = lines[0].split(",")
        h = header.index("height")
        row = lines[1].split(",")
        row[h] = "0.0"
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join([lines[0], ",".join(row)] + lines[2:]) + "\n")
        out = tmp_path / "ggfail"
        code = main(["fit", "--data", str(bad), "--model",
                     "height ~ time, random = block/plot, family = GG",
                     "--out", str(out)])
        assert code == EXIT_NONCONVERGENCE
        doc = json.loads((out / "fit.json").read_text())
        assert doc["converged"] is False
        assert "error" in doc


class TestCompare:
    def _write(self, path, loglik, n_params):
        path.write_text(json.dumps({"loglik": loglik, "n_params": n_params}))

    def test_reported_statistic(self, tmp_path, capsys):
        f0, f1 = tmp_path / "f0.json", tmp_path / "f1.json"
        self._write(f0, -5676.09, 41)
        self._write(f1, -5660.39, 71)
        assert main(["compare", "--fit0", str(f0), "--fit1", str(f1)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "31.40" in out
        assert "p = 0.39" in out

    def test_identical_fits_ok(self, tmp_path):
        f0, f1 = tmp_path / "a.json", tmp_path / "b.json"
        self._write(f0, -100.0, 5)
        self._write(f1, -100.0, 6)
        assert main(["compare", "--fit0", str(f0), "--fit1", str(f1)]) == EXIT_OK

    def test_swapped_order_rejected(self, tmp_path):
        f0, f1 = tmp_path / "a.json", tmp_path / "b.json"
        self._write(f0, -5660.39, 71)
        self._write(f1, -5676.09, 41)
        assert main(["compare", "--fit0", str(f0), "--fit1", str(f1)]) == EXIT_BAD_COMPARISON

    def test_unreadable_json(self, tmp_path):
        f0 = tmp_path / "junk.json"
        f0.write_text("{not json")
        f1 = tmp_path / "ok.json"
        self._write(f1, -1.0, 2)
        assert main(["compare", "--fit0", str(f0), "--fit1", str(f1)]) == EXIT_USER


class TestDiagnose:
    def test_panels_by_time(self, workspace, tmp_path):
        _, _, data, fit_dir = workspace
        out = tmp_path / "diag"
        assert main(["diagnose", "--fit", str(fit_dir / "fit.json"),
                     "--data", str(data), "--wp-by", "time", "--wp-k", "2",
                     "--out", str(out)]) == EXIT_OK
        csv_lines = (out / "worm_panels.csv").read_text().strip().splitlines()
        assert csv_lines[0] == "panel,x,y,band"
        panels = {line.split(",")[0] for line in csv_lines[1:]}
        assert panels == {"time=30.0", "time=60.0"}
        report = json.loads((out / "diagnostics.json").read_text())
        assert set(report["worm_flags"]) == panels
        assert "shapiro_wilk" in report
        assert (out / "worm_panels.svg").read_text().startswith("<svg")
        assert (out / "residual_summary.json").exists()

    def test_pooled_default(self, workspace, tmp_path):
        _, _, data, fit_dir = workspace
        out = tmp_path / "pooled"
        assert main(["diagnose", "--fit", str(fit_dir / "fit.json"),
                     "--data", str(data), "--out", str(out)]) == EXIT_OK
        report = json.loads((out / "diagnostics.json").read_text())
        assert len(report["worm_flags"]) == 1

    def test_too_many_panels_user_error(self, workspace, tmp_path):
        _, _, data, fit_dir = workspace
        assert main(["diagnose", "--fit", str(fit_dir / "fit.json"),
                     "--data", str(data), "--wp-by", "plant", "--wp-k", "16",
                     "--out", str(tmp_path / "x")]) == EXIT_USER

    def test_unknown_covariate(self, workspace, tmp_path):
        _, _, data, fit_dir = workspace
        assert main(["diagnose", "--fit", str(fit_dir / "fit.json"),
                     "--data", str(data), "--wp-by", "humidity",
                     "--out", str(tmp_path / "x")]) == EXIT_USER

    def test_unconverged_fit_rejected(self, workspace, tmp_path):
        _, _, data, _ = workspace
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"converged": False, "error": "x"}))
        assert main(["diagnose", "--fit", str(bad), "--data", str(data),
                     "--out", str(tmp_path / "d")]) == EXIT_NONCONVERGENCE


def _canonical_tree(root: Path) -> dict:
    """All pipeline outputs keyed by relative path, manifests normalized."""
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_dir():
            continue
        rel = str(p.relative_to(root))
        if p.name == "manifest.json":
            doc = json.loads(p.read_text())
            doc.pop("wall_time_seconds", None)  # timing is not reproducible
            doc["inputs"] = [Path(s).name for s in doc["inputs"]]
            doc["outputs"] = [Path(s).name for s in doc["outputs"]]
            out[rel] = json.dumps(doc, sort_keys=True)
        else:
            out[rel] = p.read_bytes()
    return out


class TestEndToEndDeterminism:
    def test_pipeline_byte_identical(self, tmp_path):
        cfg = tmp_path / "truth.cfg"
        cfg.write_text(CONFIG)

        def run(root: Path):
            root.mkdir()
            data = root / "data.csv"
            assert main(["simulate", "--config", str(cfg), "--seed", "7",
                         "--out", str(data)]) == EXIT_OK
            assert main(["fit", "--data", str(data), "--model", MODEL,
                         "--n-starts", "1", "--out", str(root / "fit")]) == EXIT_OK
            assert main(["diagnose", "--fit", str(root / "fit" / "fit.json"),
                         "--data", str(data), "--wp-by", "time", "--wp-k", "2",
                         "--out", str(root / "diag")]) == EXIT_OK
            return _canonical_tree(root)

        t1 = run(tmp_path / "run1")
        t2 = run(tmp_path / "run2")
        assert set(t1) == set(t2)
        for rel in t1:
            assert t1[rel] == t2[rel], rel
