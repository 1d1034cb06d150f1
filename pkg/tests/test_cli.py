import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from diffopt.cli import main

TINY_CFG = {
    "iters_warmup": 40,
    "iters_stage2_outer": 2,
    "inner_human": 4,
    "inner_camera": 10,
    "iters_finetune": 10,
    "seed": 0,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Prior + scene + run + eval + plots, produced once through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    ckpt = root / "ckpt"
    scene = root / "scene"
    run = root / "run"
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY_CFG))
    assert main(["train-prior", "--corpus-seed", "0", "--epochs", "2",
                 "--corpus-size", "8", "--out", str(ckpt)]) == 0
    assert main(["make-scene", "--scenario", "walk-line", "--corruption", "default",
                 "--frames", "60", "--seed", "0", "--out", str(scene)]) == 0
    assert main(["reconstruct", "--scene", str(scene), "--prior", str(ckpt),
                 "--config", str(cfg), "--out", str(run)]) == 0
    return root, ckpt, scene, run, cfg


def test_every_output_dir_has_one_manifest(workspace):
    root, ckpt, scene, run, _ = workspace
    for d in (ckpt, scene, run):
        manifests = list(d.glob("manifest.json"))
        assert len(manifests) == 1
        doc = json.loads(manifests[0].read_text())
        assert doc["version"].startswith("diffopt-")
        assert "config_hash" in doc and "wall_time_s" in doc


def test_train_prior_outputs(workspace):
    _, ckpt, _, _, _ = workspace
    assert (ckpt / "prior.dopt").read_bytes()[:4] == b"DOPT"
    assert (ckpt / "loss_curve.csv").exists()
    assert (ckpt / "skeleton.json").exists()
    manifest = json.loads((ckpt / "prior.manifest.json").read_text())
    assert manifest["trained"] is True
    assert "corpus_hash" in manifest and len(manifest["loss_curve"]) == 3


def test_train_prior_zero_epochs_flags_untrained(tmp_path):
    out = tmp_path / "ckpt0"
    assert main(["train-prior", "--corpus-seed", "1", "--epochs", "0",
                 "--corpus-size", "4", "--out", str(out)]) == 0
    manifest = json.loads((out / "prior.manifest.json").read_text())
    assert manifest["trained"] is False


def test_train_prior_deterministic_bytes(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train-prior", "--corpus-seed", "3", "--epochs", "1",
                     "--corpus-size", "4", "--out", str(out)]) == 0
        outs.append((out / "prior.dopt").read_bytes())
    assert outs[0] == outs[1]


def test_make_scene_writes_bundle(workspace):
    _, _, scene, _, _ = workspace
    for name in ("scene.json", "gt_motion.csv", "camera.json", "keypoints.csv",
                 "init_motion.csv", "gt_camera.json"):
        assert (scene / name).exists()


def test_make_scene_zero_corruption(tmp_path):
    out = tmp_path / "clean"
    assert main(["make-scene", "--scenario", "turn-in-place", "--corruption", "none",
                 "--frames", "20", "--out", str(out)]) == 0
    doc = json.loads((out / "scene.json").read_text())
    assert doc["corruption"]["kp_noise_std"] == 0.0


def test_make_scene_lists_five_kinds():
    from diffopt.synthdata import SCENARIO_KINDS

    assert len(SCENARIO_KINDS) == 5
    assert main(["make-scene", "--scenario", "not-a-kind", "--out", "/tmp/x"]) == 1


def test_reconstruct_outputs(workspace):
    _, _, _, run, _ = workspace
    assert (run / "motion.csv").exists()
    assert (run / "report.json").exists()
    assert (run / "correction.npz").exists()
    assert list(run.glob("curve_*.csv"))


def test_reconstruct_missing_prior_is_clear_error(workspace, tmp_path, capsys):
    _, _, scene, _, cfg = workspace
    code = main(["reconstruct", "--scene", str(scene), "--prior", str(tmp_path),
                 "--config", str(cfg), "--out", str(tmp_path / "r")])
    assert code == 1
    assert "prior" in capsys.readouterr().err.lower()


def test_reconstruct_untrained_prior_with_mdm_is_clear_error(tmp_path, workspace, capsys):
    _, _, scene, _, cfg = workspace
    ckpt0 = tmp_path / "ckpt0"
    assert main(["train-prior", "--corpus-seed", "1", "--epochs", "0",
                 "--corpus-size", "4", "--out", str(ckpt0)]) == 0
    code = main(["reconstruct", "--scene", str(scene), "--prior", str(ckpt0),
                 "--config", str(cfg), "--out", str(tmp_path / "r")])
    assert code == 1
    assert "untrained" in capsys.readouterr().err.lower()


def test_reconstruct_ablation_mode(workspace, tmp_path):
    _, ckpt, scene, _, cfg = workspace
    out = tmp_path / "single"
    assert main(["reconstruct", "--scene", str(scene), "--prior", str(ckpt),
                 "--config", str(cfg), "--ablation", "single-stage", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["stages"] == ["single"]


def test_reconstruct_deterministic_motion_bytes(workspace, tmp_path):
    _, ckpt, scene, _, cfg = workspace
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["reconstruct", "--scene", str(scene), "--prior", str(ckpt),
                     "--config", str(cfg), "--out", str(out)]) == 0
        outs.append((out / "motion.csv").read_bytes())
    assert outs[0] == outs[1]


def test_evaluate_writes_metrics(workspace, tmp_path):
    _, _, scene, run, _ = workspace
    out = tmp_path / "eval" / "eval.csv"
    assert main(["evaluate", "--run", str(run), "--scene", str(scene),
                 "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("name,")
    assert {l.split(",")[0] for l in lines[1:]} == {"init", "recovered"}
    assert out.with_suffix(".txt").exists()


def test_evaluate_zero_corruption_run_near_zero(tmp_path):
    ckpt = tmp_path / "ckpt"
    scene = tmp_path / "scene"
    run = tmp_path / "run"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**TINY_CFG, "iters_warmup": 600,
                               "iters_stage2_outer": 0, "iters_finetune": 0}))
    assert main(["train-prior", "--corpus-seed", "0", "--epochs", "1",
                 "--corpus-size", "4", "--out", str(ckpt)]) == 0
    assert main(["make-scene", "--scenario", "walk-line", "--corruption", "none",
                 "--frames", "60", "--out", str(scene)]) == 0
    assert main(["reconstruct", "--scene", str(scene), "--prior", str(ckpt),
                 "--config", str(cfg), "--out", str(run)]) == 0
    out = tmp_path / "eval.csv"
    assert main(["evaluate", "--run", str(run), "--scene", str(scene),
                 "--out", str(out)]) == 0
    row = out.read_text().strip().splitlines()[-1].split(",")
    g_mpjpe = float(row[2])
    assert g_mpjpe < 30.0  # zero-corruption round trip


def test_evaluate_mismatched_run_and_scene(workspace, tmp_path):
    _, _, _, run, _ = workspace
    other = tmp_path / "other_scene"
    assert main(["make-scene", "--scenario", "jog", "--frames", "30",
                 "--out", str(other)]) == 0
    code = main(["evaluate", "--run", str(run), "--scene", str(other),
                 "--out", str(tmp_path / "e.csv")])
    assert code == 1


def test_plot_outputs_and_svg_contract(workspace, tmp_path):
    _, _, scene, run, _ = workspace
    out = tmp_path / "plots"
    assert main(["plot", "--run", str(run), "--scene", str(scene),
                 "--out", str(out)]) == 0
    tree = ET.parse(out / "trajectory.svg")
    ns = {"svg": "http://www.w3.org/2000/svg"}
    polylines = tree.getroot().findall(".//svg:polyline", ns)
    assert len(polylines) == 2
    labels = {el.text for el in tree.getroot().findall(".//svg:text", ns)}
    assert {"gt", "pred"} <= labels
    assert (out / "trajectory.png").exists()
    loss_svgs = list(out.glob("loss_*.svg"))
    assert loss_svgs
    for svg in loss_svgs:
        ET.parse(svg)  # valid XML


def test_plot_idempotent_bytes(workspace, tmp_path):
    _, _, scene, run, _ = workspace
    snaps = []
    for name in ("p1", "p2"):
        out = tmp_path / name
        assert main(["plot", "--run", str(run), "--scene", str(scene),
                     "--out", str(out)]) == 0
        snaps.append({p.name: p.read_bytes() for p in out.glob("*.svg")})
    assert snaps[0] == snaps[1]


def test_plot_reads_scene_from_run_manifest(workspace, tmp_path):
    _, _, _, run, _ = workspace
    out = tmp_path / "plots_auto"
    assert main(["plot", "--run", str(run), "--out", str(out)]) == 0
    assert (out / "trajectory.svg").exists()


def test_exit_codes_distinguishable(workspace, tmp_path):
    _, ckpt, scene, _, _ = workspace
    # usage error -> 1
    assert main(["reconstruct", "--prior", str(ckpt), "--out", str(tmp_path / "x")]) == 1
    assert main(["no-such-command"]) == 1
    # numerical failure -> 2: a divergent learning rate overflows the warm-up
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY_CFG, "iters_warmup": 200, "lr_fields": 1e160}))
    code = main(["reconstruct", "--scene", str(scene), "--prior", str(ckpt),
                 "--config", str(bad), "--out", str(tmp_path / "boom")])
    assert code == 2


def test_jobs_env_cap(monkeypatch):
    from diffopt.cli import _job_cap

    monkeypatch.setenv("DIFFOPT_THREADS", "2")
    assert _job_cap(8) == 2
    assert _job_cap(1) == 1
    monkeypatch.delenv("DIFFOPT_THREADS")
    assert _job_cap(8) == 8


def test_batch_reconstruct(workspace, tmp_path, monkeypatch):
    _, ckpt, _, _, cfg = workspace
    batch = tmp_path / "scenes"
    for i, kind in enumerate(("walk-line", "jog")):
        assert main(["make-scene", "--scenario", kind, "--frames", "60",
                     "--seed", str(i), "--out", str(batch / f"s{i}")]) == 0
    out = tmp_path / "runs"
    monkeypatch.setenv("DIFFOPT_THREADS", "1")
    assert main(["reconstruct", "--batch", str(batch), "--prior", str(ckpt),
                 "--config", str(cfg), "--jobs", "4", "--out", str(out)]) == 0
    assert (out / "s0" / "motion.csv").exists()
    assert (out / "s1" / "motion.csv").exists()
