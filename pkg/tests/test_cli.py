import json
import subprocess
import sys

import numpy as np
import pytest

from hytnas import cli
from hytnas.checkpoint import load_checkpoint


def run_cli(*argv):
    return cli.main(list(argv))


def test_ops_dump_lists_both_menus(capsys, tmp_path):
    assert run_cli("ops-dump") == 0
    menus = json.loads(capsys.readouterr().out)
    assert [e["name"] for e in menus["spa"]][:2] == ["acon_3-1", "acon_5-1"]
    assert {e["name"] for e in menus["spe"]} >= {"econ_5-1", "skip_connection"}
    out = tmp_path / "menus.json"
    assert run_cli("ops-dump", "--out", str(out)) == 0
    assert json.loads(out.read_text()) == menus


def test_synth_writes_loadable_cube(tmp_path):
    out = tmp_path / "cube"
    assert run_cli("synth", "--out", str(out), "--bands", "6", "--height", "16",
                   "--width", "16", "--classes", "3", "--seed", "1") == 0
    from hytnas.data import load_cube

    cube = load_cube(out)
    assert cube.bands == 6 and cube.num_classes == 3
    assert (out / "manifest.json").exists()


def test_missing_cube_dir_is_usage_error(tmp_path):
    rc = run_cli("search", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"),
                 "--preset", "desk")
    assert rc == 2


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        run_cli("search", "--frobnicate")
    assert exc.value.code == 2


def test_preset_flags_reach_config():
    cfg = cli.load_config(preset="pavia")
    assert (cfg.supernet.patch, cfg.supernet.batch, cfg.supernet.warmup_epochs) == (24, 6, 15)
    cfg = cli.load_config(preset="houston")
    assert (cfg.supernet.patch, cfg.supernet.batch, cfg.supernet.warmup_epochs) == (14, 5, 30)
    assert cfg.train.batch == 16
    cfg = cli.load_config(preset="desk", overrides={"supernet.patch": 10})
    assert cfg.supernet.patch == 10


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "hytnas", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0


@pytest.fixture(scope="module")
def micro_pipeline(tmp_path_factory):
    """synth -> search -> derive -> train -> predict -> eval at micro scale."""
    root = tmp_path_factory.mktemp("micro")
    cube_dir = root / "cube"
    assert run_cli("synth", "--out", str(cube_dir), "--bands", "8", "--height", "20",
                   "--width", "20", "--classes", "3", "--seed", "3") == 0
    search_dir = root / "search"
    assert run_cli("search", "--data", str(cube_dir), "--out", str(search_dir),
                   "--preset", "desk", "--seed", "0",
                   "--supernet.layers", "1", "--supernet.width", "4",
                   "--supernet.warmup_epochs", "1", "--supernet.search_epochs", "2",
                   "--supernet.iters_per_epoch", "2", "--supernet.patch", "8",
                   "--supernet.batch", "2",
                   "--split.n_train", "6", "--split.n_val", "3") == 0
    derive_dir = root / "derive"
    assert run_cli("derive", "--checkpoint", str(search_dir / "search_checkpoint.bin"),
                   "--out", str(derive_dir)) == 0
    train_dir = root / "train"
    assert run_cli("train", "--data", str(cube_dir),
                   "--genotype", str(derive_dir / "genotype.json"),
                   "--out", str(train_dir), "--preset", "desk", "--seed", "0",
                   "--supernet.layers", "1", "--supernet.width", "4",
                   "--train.patch", "10", "--train.batch", "3",
                   "--train.iters", "30", "--train.val_iters", "15",
                   "--infer.window", "10",
                   "--split.n_train", "6", "--split.n_val", "3") == 0
    pred_dir = root / "pred"
    assert run_cli("predict", "--data", str(cube_dir),
                   "--model", str(train_dir / "model_checkpoint.bin"),
                   "--out", str(pred_dir)) == 0
    eval_dir = root / "eval"
    assert run_cli("eval", "--data", str(cube_dir), "--pred", str(pred_dir / "prediction.bin"),
                   "--out", str(eval_dir), "--set", "test") == 0
    return root


def test_micro_pipeline_artifacts(micro_pipeline):
    root = micro_pipeline
    geno = json.loads((root / "derive" / "genotype.json").read_text())
    assert geno["num_layers"] == 1
    stats = json.loads((root / "derive" / "genotype_stats.json").read_text())
    assert abs(sum(stats["overall"].values()) - 1.0) < 1e-9
    metrics = json.loads((root / "eval" / "metrics.json").read_text())
    assert 0.0 <= metrics["oa"] <= 1.0
    assert (root / "pred" / "classmap.ppm").exists()
    assert (root / "eval" / "metrics.txt").exists()


def test_derive_is_byte_deterministic(micro_pipeline, tmp_path):
    root = micro_pipeline
    again = tmp_path / "derive2"
    assert run_cli("derive", "--checkpoint", str(root / "search" / "search_checkpoint.bin"),
                   "--out", str(again)) == 0
    a = (root / "derive" / "genotype.json").read_bytes()
    b = (again / "genotype.json").read_bytes()
    assert a == b


def test_predict_no_overlap_flag(micro_pipeline, tmp_path):
    root = micro_pipeline
    out = tmp_path / "pred_no_ov"
    assert run_cli("predict", "--data", str(root / "cube"),
                   "--model", str(root / "train" / "model_checkpoint.bin"),
                   "--out", str(out), "--no-overlap") == 0
    arrays, extra = load_checkpoint(out / "prediction.bin")
    assert extra["overlap"] is False
    assert arrays["coverage"].max() == 1
    arrays_ov, extra_ov = load_checkpoint(root / "pred" / "prediction.bin")
    assert extra_ov["overlap"] is True
    assert arrays_ov["coverage"].max() > 1


def test_eval_table_matches_json(micro_pipeline):
    root = micro_pipeline
    metrics = json.loads((root / "eval" / "metrics.json").read_text())
    text = (root / "eval" / "metrics.txt").read_text()
    assert f"OA    {metrics['oa']:.4f}" in text
    assert f"kappa {metrics['kappa']:.4f}" in text


def test_attention_dump_writes_index(micro_pipeline, tmp_path):
    root = micro_pipeline
    out = tmp_path / "pred_attn"
    dump = tmp_path / "attn"
    assert run_cli("predict", "--data", str(root / "cube"),
                   "--model", str(root / "train" / "model_checkpoint.bin"),
                   "--out", str(out), "--dump-attention", str(dump)) == 0
    index = json.loads((dump / "attention_index.json").read_text())
    assert index["entries"], "attention dump is empty"
    arrays, extra = load_checkpoint(dump / "attention.bin")
    first = index["entries"][0]
    attn = arrays[first["key"]]
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-5)
