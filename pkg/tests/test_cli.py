import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import SMALL_CITY
from urbanprice.cli import main
from urbanprice.model import load_params, save_params


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def city_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "city.json"
    cfg.write_text(json.dumps({"synth": {**SMALL_CITY, "bbox": list(SMALL_CITY["bbox"])}, "training": {"max_epochs": 40}}))
    assert main(["generate", "--config", str(cfg), "--seed", "11", "--out", str(root / "gen")]) == 0
    assert main(["build-graph", "--pois", str(root / "gen/pois.jsonl"), "--road-model", "manhattan",
                 "--out", str(root / "graph")]) == 0
    assert main(["train", "--pois", str(root / "gen/pois.jsonl"), "--graph", str(root / "graph/graph.jsonl"),
                 "--config", str(cfg), "--seed", "0", "--out", str(root / "train")]) == 0
    return root


def test_generate_outputs_and_manifest(city_dir):
    gen = city_dir / "gen"
    assert (gen / "pois.jsonl").stat().st_size > 0
    manifest = json.loads((gen / "manifest-generate.json").read_text())
    assert manifest["command"] == "generate" and manifest["seed"] == 11
    assert manifest["outputs"][str(gen / "pois.jsonl")] == sha(gen / "pois.jsonl")


def test_generate_same_seed_same_hashes(tmp_path, city_dir):
    cfg = city_dir / "city.json"
    assert main(["generate", "--config", str(cfg), "--seed", "11", "--out", str(tmp_path)]) == 0
    for name in ("pois.jsonl", "planted.json"):
        assert sha(tmp_path / name) == sha(city_dir / "gen" / name)


def test_generate_rejects_empty_city(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_blocks": 0}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "positive" in capsys.readouterr().err


def test_train_outputs(city_dir):
    out = city_dir / "train"
    for name in ("model.json", "final.json", "epochs.jsonl", "test_report.json", "test_report.txt", "manifest-train.json"):
        assert (out / name).is_file()
    report = json.loads((out / "test_report.json").read_text())[0]
    pois = [json.loads(line) for line in (city_dir / "gen/pois.jsonl").read_text().splitlines()]
    mean = np.mean([p["price"] for p in pois if p["price"] is not None])
    assert report["rmse"] < 0.01 * mean
    epochs = [json.loads(line) for line in (out / "epochs.jsonl").read_text().splitlines()]
    assert {"epoch", "loss", "grad_norms", "seconds"} <= set(epochs[0])


def test_missing_input_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert main(["train", "--pois", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_resume_is_refused(tmp_path, capsys, city_dir):
    code = main(["train", "--pois", str(city_dir / "gen/pois.jsonl"), "--resume", "--out", str(tmp_path)])
    assert code == 2
    assert "not supported" in capsys.readouterr().err


def test_bad_config_json(tmp_path, capsys, city_dir):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{oops")
    assert main(["train", "--pois", str(city_dir / "gen/pois.jsonl"), "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_graph_radius_mismatch(tmp_path, capsys, city_dir):
    code = main(["train", "--pois", str(city_dir / "gen/pois.jsonl"), "--graph", str(city_dir / "graph/graph.jsonl"),
                 "--radius-km", "2.0", "--out", str(tmp_path)])
    assert code == 2
    assert "radius" in capsys.readouterr().err


def evaluate(city_dir, out, *extra):
    return main(["evaluate", "--pois", str(city_dir / "gen/pois.jsonl"), "--graph", str(city_dir / "graph/graph.jsonl"),
                 "--seed", "0", "--out", str(out), *extra])


def test_evaluate_is_repeatable(tmp_path, city_dir):
    args = ["--snapshot", str(city_dir / "train/model.json"), "--baseline", "citywide_avg", "--baseline", "macro_avg",
            "--baseline", "micro_avg", "--baseline", "linear_regression"]
    assert evaluate(city_dir, tmp_path / "a", *args) == 0
    assert evaluate(city_dir, tmp_path / "b", *args) == 0
    for name in ("report.json", "report.txt"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)
    rows = {r["method"]: r for r in json.loads((tmp_path / "a/report.json").read_text())}
    assert rows["neighbour_value"]["mae"] < rows["macro_avg"]["mae"]
    assert set(rows) == {"neighbour_value", "citywide_avg", "macro_avg", "micro_avg", "linear_regression"}


def test_evaluate_split_mismatch(tmp_path, capsys, city_dir):
    code = evaluate(city_dir, tmp_path, "--snapshot", str(city_dir / "train/model.json"), "--split-seed", "5")
    assert code == 2
    assert "split mismatch" in capsys.readouterr().err


def test_evaluate_needs_something(tmp_path, city_dir):
    assert evaluate(city_dir, tmp_path) == 2


def test_predict_known_and_adhoc(tmp_path, city_dir):
    pois = [json.loads(line) for line in (city_dir / "gen/pois.jsonl").read_text().splitlines()]
    block = next(p for p in pois if p["kind"] == "residential_block")
    adhoc = tmp_path / "adhoc.json"
    adhoc.write_text(json.dumps([{"id": "nowhere", "lat": 0.0, "lon": 0.0, "attributes": block["attributes"]}]))
    code = main(["predict", "--snapshot", str(city_dir / "train/model.json"), "--pois", str(city_dir / "gen/pois.jsonl"),
                 "--block", block["id"], "--blocks-json", str(adhoc), "--top", "3", "--out", str(tmp_path)])
    assert code == 0
    preds = json.loads((tmp_path / "predictions.json").read_text())
    assert [p["status"] for p in preds] == ["ok", "uncoverable"]
    assert len(preds[0]["contributions"]) == 3
    assert preds[0]["price"] == pytest.approx(block["price"], rel=0.01)
    assert "uncoverable" in (tmp_path / "predictions.txt").read_text()


def test_report_outputs(tmp_path, city_dir):
    code = main(["report", "--snapshot", str(city_dir / "train/model.json"), "--pois", str(city_dir / "gen/pois.jsonl"),
                 "--min-observers", "3", "--out", str(tmp_path)])
    assert code == 0
    bundle = json.loads((tmp_path / "report.json").read_text())
    assert set(bundle) == {"attribute_preferences", "distance_preferences", "facilities", "min_observers"}
    for ranking in bundle["facilities"]["rankings"].values():
        keys = [(-r["price"], r["id"]) for r in ranking]
        assert keys == sorted(keys)
    assert "CNY/m²" in (tmp_path / "report.txt").read_text()


def test_report_zero_theta_is_uniform(tmp_path, city_dir):
    params = load_params(city_dir / "train/model.json")
    params.theta[:] = 0.0
    save_params(params, tmp_path / "zero.json")
    assert main(["report", "--snapshot", str(tmp_path / "zero.json"), "--pois", str(city_dir / "gen/pois.jsonl"),
                 "--out", str(tmp_path / "r")]) == 0
    prefs = json.loads((tmp_path / "r/report.json").read_text())["attribute_preferences"]
    assert len(set(prefs.values())) == 1


def test_sweep_writes_curve(tmp_path, city_dir):
    code = main(["sweep", "--pois", str(city_dir / "gen/pois.jsonl"), "--radii", "0.5,1.0", "--road-model", "manhattan",
                 "--max-epochs", "3", "--seed", "0", "--out", str(tmp_path)])
    assert code == 0
    curve = json.loads((tmp_path / "curve.json").read_text())
    assert [c["radius_km"] for c in curve] == [0.5, 1.0]
    assert "best radius" in (tmp_path / "curve.txt").read_text()


def test_sweep_bad_radii(tmp_path, city_dir):
    assert main(["sweep", "--pois", str(city_dir / "gen/pois.jsonl"), "--radii", "1,x", "--out", str(tmp_path)]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "urbanprice", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("urbanprice ")
