import csv
import json
from pathlib import Path

import numpy as np
import pytest

from hazardfuse.cli import main
from hazardfuse.dataset import read_png

TINY = {"height": 32, "width": 48}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    summary = json.loads(out[-1]) if out else {}
    assert (code == 0) == bool(summary.get("ok")), (code, summary)
    return code, summary


def tiny_run_config(**over):
    cfg = {
        "synth": {"seed": 7, "n_frames": 8, "config": TINY},
        "parents": {"seed": 1007, "n_frames": 2, "config": TINY},
        "approaches": [["none", ["rgb"]]],
        "hyperparams": {"max_iterations": 2, "val_every": 1},
        "grid": None,
        "thresholds": [0.0, 0.25, 0.5, 0.75, 1.0],
    }
    cfg.update(over)
    return cfg


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--seed", "7", "--frames", "4", "--out", str(root), "--config",
                 str(_write(root.parent / "synth.json", {"synth": TINY}))]) == 0
    return root


def _write(path, doc):
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path


def test_synth_manifest(tmp_path, capsys):
    code, s = run(capsys, "--seed", 7, "synth", "--frames", 20, "--out", tmp_path)
    assert code == 0 and s["frames"] == 20
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 7 and len(manifest["frames"]) == 20
    assert len(list(tmp_path.glob("*/rgb/*.png"))) == 20
    inv = json.loads((tmp_path / "invocation-synth.json").read_text())
    assert inv["options"]["seed"] == 7 and "version" in inv


def test_encode_hha_count_and_idempotence(corpus, tmp_path, capsys):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    _, s = run(capsys, "encode-hha", "--corpus", corpus, "--out", out_a)
    run(capsys, "encode-hha", "--corpus", corpus, "--out", out_b)
    assert s["encoded"] == 4 and s["skipped_no_depth"] == 0
    files = sorted(p.relative_to(out_a) for p in out_a.rglob("*") if p.is_file() and "invocation" not in p.name)
    assert len([f for f in files if f.suffix == ".png"]) == 4
    for f in files:
        assert (out_a / f).read_bytes() == (out_b / f).read_bytes()


def test_encode_hha_clean_floor_height(tmp_path, capsys):
    from hazardfuse.dataset import LabeledFrame, save_frame
    from hazardfuse.dataset.synth import Camera, Scene, render
    from hazardfuse.hha import DepthImage, Intrinsics

    k = Intrinsics(80.0, 80.0, 47.5, 31.5, 96, 64)
    z = render(Scene(Camera(1.8, 25.0, 0.0), (120, 120, 120), [], 30.0), k).depth
    z[~np.isfinite(z) | (z > 5.0)] = 0
    depth = DepthImage(np.rint(z * 1000).astype(np.uint16), k)
    save_frame(tmp_path / "c", LabeledFrame("0000", "floor", np.zeros((64, 96, 3), np.uint8), depth))
    run(capsys, "encode-hha", "--corpus", tmp_path / "c", "--out", tmp_path / "h")
    hha = read_png(tmp_path / "h" / "floor" / "hha" / "0000.png")
    assert hha[..., 1][depth.depth > 0].mean() < 2


def test_train_predict_eval_fuse(corpus, tmp_path, capsys):
    hp = _write(tmp_path / "hp.json", {"max_iterations": 2})
    for m in ("rgb", "hha"):
        code, s = run(capsys, "train", "--corpus", corpus, "--modalities", m, "--hyperparams", hp,
                      "--out", tmp_path / m)
        assert code == 0 and Path(s["checkpoint"]).exists()
        code, s = run(capsys, "predict", "--checkpoint", tmp_path / m / "checkpoint.json", "--corpus", corpus,
                      "--out", tmp_path / f"pred-{m}")
        assert s["predictions"] == 4
    code, s = run(capsys, "eval", "--corpus", corpus, "--predictions", tmp_path / "pred-rgb",
                  "--out", tmp_path / "eval")
    assert code == 0
    rows = list(csv.reader((tmp_path / "eval" / "curve.csv").open()))
    assert len(rows) == 102
    a = next((tmp_path / "pred-rgb").glob("*/*.json"))
    b = tmp_path / "pred-hha" / a.relative_to(tmp_path / "pred-rgb")
    code, s = run(capsys, "fuse", "--mode", "late_proportional", "--a", a, "--b", b, "--out", tmp_path / "fused")
    assert Path(s["fused"]).exists() and Path(s["fused"]).with_suffix(".bin").exists()
    depth = corpus / a.parent.name / "depth" / f"{a.stem}.png"
    code, s = run(capsys, "fuse", "--mode", "late_overlay", "--a", a, "--b", b, "--depth", depth,
                  "--out", tmp_path / "fused2")
    assert code == 0
    code, _ = run(capsys, "fuse", "--mode", "late_overlay", "--a", a, "--b", b, "--out", tmp_path / "fused3")
    assert code == 2


def test_eval_masks_equal_to_ground_truth(corpus, tmp_path, capsys):
    from hazardfuse.dataset import load_corpus, write_png

    for f in load_corpus(corpus):
        write_png(tmp_path / "m" / f.floor / f"{f.frame_id}.png", f.trip_mask().astype(np.uint8) * 255)
    code, s = run(capsys, "eval", "--corpus", corpus, "--masks", tmp_path / "m", "--out", tmp_path / "e")
    r = s["report"]
    assert (r["precision"], r["recall"], r["f1"], r["trip_iou"], r["trip_obj_detection"]) == (1, 1, 1, 1, 1)


def test_usage_errors(corpus, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--no-such-flag"])
    assert exc.value.code != 0
    bad = _write(tmp_path / "bad.json", {"frobnicate": 1})
    code, s = run(capsys, "synth", "--config", bad, "--out", tmp_path / "x")
    assert code == 2 and "frobnicate" in s["error"]
    code, s = run(capsys, "eval", "--corpus", corpus, "--out", tmp_path / "y")
    assert code == 2
    code, s = run(capsys, "train", "--corpus", tmp_path / "missing", "--out", tmp_path / "z")
    assert code == 1


def test_gradcheck_command(tmp_path, capsys):
    code, s = run(capsys, "gradcheck", "--samples", 20, "--out", tmp_path)
    assert code == 0 and all(c["passed"] for c in s["cases"].values())
    assert (tmp_path / "gradcheck.json").exists()


# -- crossval ---------------------------------------------------------------------------

def test_crossval_cardinality(tmp_path, capsys):
    cfg = _write(tmp_path / "run.json", tiny_run_config())
    code, s = run(capsys, "crossval", "--config", cfg, "--out", tmp_path / "cv")
    assert code == 0 and s["folds"] == ["scene0", "scene1", "scene2", "scene3"]
    out = tmp_path / "cv"
    assert len(list(out.glob("folds/*/none-rgb/report.json"))) == 4
    assert (out / "averaged" / "none-rgb.json").exists()
    assert (out / "curves" / "none-rgb.csv").exists()
    frozen = json.loads((out / "config.json").read_text())
    assert frozen["synth"]["n_frames"] == 8 and "version" in frozen
    for fold in json.loads((out / "folds.json").read_text())["folds"]:
        assert fold["test"] not in fold["train"]


def test_crossval_overlay_without_arms(tmp_path, capsys):
    cfg = _write(tmp_path / "run.json", tiny_run_config(approaches=[["late_overlay", ["rgb", "hha"]]]))
    code, s = run(capsys, "crossval", "--config", cfg, "--out", tmp_path / "cv")
    assert code == 1
    assert "train the single-modality arms first" in s["error"]
    assert (tmp_path / "cv" / "FAILED.json").exists()
    assert (tmp_path / "cv" / "config.json").exists()


def test_crossval_rejects_unknown_config_key(tmp_path, capsys):
    cfg = _write(tmp_path / "run.json", {**tiny_run_config(), "learning_rate": 3})
    code, s = run(capsys, "crossval", "--config", cfg, "--out", tmp_path / "cv")
    assert code == 1 and "learning_rate" in s["error"]
