import json
import re
from pathlib import Path

import pytest

import kgfe
from kgfe.cli import COLOR_GENERATED, COLOR_KNOWN, SVG_HEIGHT, SVG_WIDTH, importance_svg, main
from kgfe.transforms import CATALOG

DATA = Path(kgfe.__file__).parent / "data"
OUTPUTS = {"report.json", "augmented.csv", "decomp.dot", "decomp.json", "importance.svg", "timings.json"}


def _job(out, *extra):
    return ["run", "--data", str(DATA / "trips_sample.csv"), "--schema", str(DATA / "trips_sample.schema.json"),
            "--target", "duration_min", "--out", str(out), *extra]


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(_job(out, "--episodes", "20")) == 0
    return out, json.loads((out / "report.json").read_text())


def test_run_writes_every_output(finished):
    out, _ = finished
    assert {p.name for p in out.iterdir()} == OUTPUTS


def test_demo_run_improves_on_base(finished):
    ev = finished[1]["evaluation"]
    assert ev["final"]["mean"] >= ev["base"]["mean"]


def test_report_objective_consistent(finished):
    r = finished[1]
    obj = r["objective"]
    assert obj["value"] == pytest.approx(obj["lambda"] * obj["performance"]
                                         + (1 - obj["lambda"]) * obj["mean_interpretability"], abs=1e-12)


def test_score_feature_matches_report(finished, capsys):
    out, report = finished
    name, want = next(iter(sorted(report["interpretability"]["features"].items())))
    assert main(["score-feature", name, "--run", str(out)]) == 0
    assert json.loads(capsys.readouterr().out) == {"feature": name, "interpretability": want}


def test_score_feature_unknown_name(finished, capsys):
    assert main(["score-feature", "ghost", "--run", str(finished[0])]) == 2
    assert "ghost" in capsys.readouterr().err


def test_zero_episodes_matches_exploited_baseline(tmp_path):
    assert main(_job(tmp_path, "--episodes", "0")) == 0
    r = json.loads((tmp_path / "report.json").read_text())
    assert r["evaluation"]["final"] == r["evaluation"]["exploited"]
    assert r["search"]["generated"] == [] and r["search"]["pipeline"] == []


def test_bare_flags_mean_run(tmp_path):
    assert main(_job(tmp_path, "--episodes", "0")[1:]) == 0
    assert (tmp_path / "report.json").exists()


def test_runs_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(_job(out, "--episodes", "3", "--m", "2")) == 0
    for name in ("report.json", "augmented.csv", "decomp.dot", "decomp.json", "importance.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_missing_target_names_column(tmp_path, capsys):
    out = tmp_path / "out"
    args = _job(out)
    args[args.index("duration_min")] = "fare"
    assert main(args) == 2
    assert "fare" in capsys.readouterr().err
    assert not out.exists() or not any(out.iterdir())


def test_missing_data_flag(tmp_path, capsys):
    assert main(["run", "--target", "y", "--out", str(tmp_path)]) == 2
    assert "--data" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "job.json"
    cfg.write_text(json.dumps({"episodes": 1, "bogus": 3}))
    assert main(["run", "--config", str(cfg)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "job.json"
    cfg.write_text(json.dumps({"data": str(DATA / "trips_sample.csv"), "schema": str(DATA / "trips_sample.schema.json"),
                               "target": "duration_min", "episodes": 50, "lambda": 0.5}))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--episodes", "0", "--out", str(out)]) == 0
    echo = json.loads((out / "report.json").read_text())["config"]["job"]
    assert echo["episodes"] == 0 and echo["lambda"] == 0.5
    assert "out" not in echo


@pytest.mark.parametrize("flag", [["--lambda", "2"], ["--k", "1"], ["--learner", "svm"]])
def test_bad_settings_exit_2(tmp_path, flag):
    assert main(_job(tmp_path / "out", *flag)) == 2
    assert not (tmp_path / "out").exists()


def test_check_kg_demo(capsys):
    assert main(["check-kg"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("OK:")
    assert re.search(r"\d+ concepts", text) and re.search(r"\d+ derivation rules", text)


def test_check_kg_bad_file(tmp_path, capsys):
    bad = tmp_path / "bad.kg"
    bad.write_text("concept A\nmap a -> concept:Nope\n")
    assert main(["check-kg", str(bad)]) == 2
    assert "Nope" in capsys.readouterr().err


def test_space_size_counts(capsys):
    # p=2: two unary on each of 2 features, one binary on 2 ordered pairs
    assert main(["space-size", "--p", "2", "--unary", "2", "--binary", "1"]) == 0
    assert capsys.readouterr().out.strip() == "6"


def test_space_size_full_catalog(capsys):
    assert main(["space-size", "--p", "20"]) == 0
    assert capsys.readouterr().out.strip() == "121040"


def test_space_size_rejects_bad_p(capsys):
    assert main(["space-size", "--p", "0"]) == 2


@pytest.mark.parametrize("argv", [["list-transforms"], ["--list-transforms"]])
def test_list_transforms(argv, capsys):
    assert main(argv) == 0
    listed = json.loads(capsys.readouterr().out)
    assert len(listed) == len(CATALOG.describe())
    assert {t["id"] for t in listed} >= {"log", "square", "div", "haversine_km"}


def test_no_command_exit_2(capsys):
    assert main([]) == 2


def test_oracle_over_budget(tmp_path, capsys):
    args = _job(tmp_path)
    args[0] = "oracle"
    assert main([*args, "--depth", "2"]) == 2
    assert "budget" in capsys.readouterr().err.lower()


def test_svg_dimensions_and_colors():
    svg = importance_svg([("g1", 0.5), ("raw", 0.25), ("neg", -0.1)], {"g1"})
    assert f'width="{SVG_WIDTH}" height="{SVG_HEIGHT}"' in svg
    bars = re.findall(r'<rect x="[^"]+" y="[^"]+" width="([^"]+)" height="[^"]+" fill="([^"]+)"', svg)
    assert [c for _, c in bars] == [COLOR_GENERATED, COLOR_KNOWN, COLOR_KNOWN]
    widths = [float(w) for w, _ in bars]
    assert widths[0] == 2 * widths[1] and widths[2] == 0.0


def test_svg_escapes_names():
    assert "a&lt;b" in importance_svg([("a<b", 1.0)], set())
