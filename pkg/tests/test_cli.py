import json
import os

import numpy as np
import pytest

from uqdenoise.cli import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_VALIDATION,
    ConfigError,
    main,
    resolve_config,
    set_dotted,
)
from uqdenoise.tensorio import read_tensor

SMALL_SYNTH = [
    "--set", "synth.size=[16,16]",
    "--set", "synth.n_images=3",
]
SMALL_TRAIN = [
    "--set", "members=2",
    "--set", "graph.depth=3",
    "--set", "graph.channels=2",
    "--set", "train.epochs=2",
]


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Shared synth -> train -> calibrate artifacts for the read-only tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data = str(root / "data")
    ens = str(root / "ens")
    calib = str(root / "calib")
    assert run(["synth", "--out", data] + SMALL_SYNTH) == EXIT_OK
    assert run(["train", "--out", ens, "--set", f"data_dir={data}"]
               + SMALL_TRAIN) == EXIT_OK
    assert run(["calibrate", "--out", calib, "--set", f"data_dir={data}",
                "--set", f"ensemble_dir={ens}"]) == EXIT_OK
    return {"root": root, "data": data, "ens": ens, "calib": calib}


# ---------------------------------------------------------------------------
# config plumbing


def test_resolve_config_defaults_file_and_overrides(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"seed": 7, "synth": {"order": 2}}))
    cfg = resolve_config("synth", str(cfg_file), ["synth.sigma=0.5"])
    assert cfg["seed"] == 7                 # from file
    assert cfg["synth"]["order"] == 2       # from file, deep-merged
    assert cfg["synth"]["sigma"] == 0.5     # from override
    assert cfg["synth"]["kappa"] == 2.0     # untouched default


def test_set_dotted_parses_json_values():
    cfg = {}
    set_dotted(cfg, "a.b=3")
    set_dotted(cfg, "a.c=[1,2]")
    set_dotted(cfg, "a.d=null")
    set_dotted(cfg, "a.e=plain-string")
    assert cfg == {"a": {"b": 3, "c": [1, 2], "d": None, "e": "plain-string"}}


def test_set_dotted_rejects_missing_equals():
    with pytest.raises(ConfigError):
        set_dotted({}, "no-assignment")


def test_invalid_config_file_is_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["synth", "--config", str(bad),
                "--out", str(tmp_path / "out")]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert err.startswith("uqdenoise-error kind=validation command=synth")


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_snapshot_and_dataset(pipeline):
    data = pipeline["data"]
    snap = json.load(open(os.path.join(data, "synth_config.json")))
    assert snap["command"] == "synth"
    assert snap["config"]["synth"]["size"] == [16, 16]
    manifest = json.load(open(os.path.join(data, "manifest.json")))
    assert set(manifest["splits"]) == {"train", "calibration", "test"}
    sample = read_tensor(os.path.join(data, "train_00_observed.bt"))
    assert sample.shape == (1, 16, 16)


def test_synth_refuses_overwrite_then_allows_it(pipeline, capsys):
    data = pipeline["data"]
    assert run(["synth", "--out", data] + SMALL_SYNTH) == EXIT_VALIDATION
    assert "--overwrite" in capsys.readouterr().err
    before = read_tensor(os.path.join(data, "test_00_target.bt"))
    assert run(["synth", "--out", data, "--overwrite"] + SMALL_SYNTH) == EXIT_OK
    np.testing.assert_array_equal(
        read_tensor(os.path.join(data, "test_00_target.bt")), before)


def test_synth_reruns_are_byte_identical(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run(["synth", "--out", a] + SMALL_SYNTH) == EXIT_OK
    assert run(["synth", "--out", b] + SMALL_SYNTH) == EXIT_OK
    names = [n for n in os.listdir(a) if n.endswith(".bt")]
    assert names
    for name in names:
        assert open(os.path.join(a, name), "rb").read() == \
            open(os.path.join(b, name), "rb").read()


# ---------------------------------------------------------------------------
# netgen


def test_netgen_outputs(tmp_path):
    out = str(tmp_path / "nets")
    assert run(["netgen", "--out", out, "--set", "count=3",
                "--set", "graph.depth=5"]) == EXIT_OK
    specs = sorted(n for n in os.listdir(out) if n.startswith("spec_"))
    assert specs == ["spec_000.json", "spec_001.json", "spec_002.json"]
    stats = open(os.path.join(out, "netgen_stats.csv")).read().splitlines()
    assert stats[0].split(",")[:3] == ["index", "seed", "edges"]
    assert len(stats) == 4


# ---------------------------------------------------------------------------
# train


def test_train_outputs(pipeline):
    ens = pipeline["ens"]
    assert os.path.exists(os.path.join(ens, "member_00.model"))
    assert os.path.exists(os.path.join(ens, "member_01.model"))
    manifest = json.loads(open(os.path.join(ens, "ensemble.json")).read())
    assert len(manifest["member_seeds"]) == 2
    loss = open(os.path.join(ens, "loss_history.csv")).read().splitlines()
    assert loss[0] == "member,epoch,batch,task,loss"
    assert len(loss) > 1


def test_train_resume_skips_finished_members(pipeline):
    ens = pipeline["ens"]
    data = pipeline["data"]
    kept = os.path.join(ens, "member_00.model")
    redo = os.path.join(ens, "member_01.model")
    kept_stamp = os.stat(kept).st_mtime_ns
    os.unlink(redo)
    assert run(["train", "--out", ens, "--set", f"data_dir={data}"]
               + SMALL_TRAIN) == EXIT_OK
    assert os.stat(kept).st_mtime_ns == kept_stamp
    assert os.path.exists(redo)


def test_train_missing_data_dir_is_validation_error(tmp_path, capsys):
    assert run(["train", "--out", str(tmp_path / "out"),
                "--set", "data_dir=/nonexistent"]) == EXIT_VALIDATION
    assert "kind=validation" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# calibrate


def test_calibrate_outputs_and_determinism(pipeline, tmp_path):
    doc = json.load(open(os.path.join(pipeline["calib"], "calibration.json")))
    assert doc["alpha"] == 0.1
    assert len(doc["correction"]) == 1
    assert np.isfinite(doc["correction"][0])
    again = str(tmp_path / "calib2")
    assert run(["calibrate", "--out", again,
                "--set", f"data_dir={pipeline['data']}",
                "--set", f"ensemble_dir={pipeline['ens']}"]) == EXIT_OK
    assert open(os.path.join(again, "calibration.json")).read() == \
        open(os.path.join(pipeline["calib"], "calibration.json")).read()


def test_calibrate_tiny_alpha_gives_guidance(pipeline, tmp_path, capsys):
    code = run(["calibrate", "--out", str(tmp_path / "c"),
                "--set", f"data_dir={pipeline['data']}",
                "--set", f"ensemble_dir={pipeline['ens']}",
                "--set", "alpha=1e-9"])
    assert code == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "raise alpha" in err or "calibration data" in err


# ---------------------------------------------------------------------------
# infer


def test_infer_whole_image(pipeline, tmp_path):
    out = str(tmp_path / "inf")
    image = os.path.join(pipeline["data"], "test_00_observed.bt")
    code = run(["infer", "--out", out,
                "--set", f"ensemble_dir={pipeline['ens']}",
                "--set", f"input={image}",
                "--set", f"calibration={pipeline['calib']}/calibration.json",
                "--set", "threshold=0.0"])
    assert code == EXIT_OK
    lower = read_tensor(os.path.join(out, "lower.bt"))
    median = read_tensor(os.path.join(out, "median.bt"))
    upper = read_tensor(os.path.join(out, "upper.bt"))
    assert lower.shape == median.shape == upper.shape == (1, 16, 16)
    assert np.all(lower <= median) and np.all(median <= upper)
    exceed = read_tensor(os.path.join(out, "exceedance.bt"))
    assert exceed.dtype == np.int32
    assert set(np.unique(exceed)) <= {0, 1}
    assert not os.path.exists(os.path.join(out, "grid.json"))


def test_infer_tiled_matches_extents(pipeline, tmp_path):
    out = str(tmp_path / "tiled")
    image = os.path.join(pipeline["data"], "test_01_observed.bt")
    code = run(["infer", "--out", out,
                "--set", f"ensemble_dir={pipeline['ens']}",
                "--set", f"input={image}",
                "--set", "patch=[8,8]", "--set", "overlap=[4,4]"])
    assert code == EXIT_OK
    median = read_tensor(os.path.join(out, "median.bt"))
    assert median.shape == (1, 16, 16)
    grid = json.load(open(os.path.join(out, "grid.json")))
    assert tuple(grid["patch_shape"]) == (8, 8)


def test_infer_missing_ensemble_is_validation_error(tmp_path, capsys):
    assert run(["infer", "--out", str(tmp_path / "o"),
                "--set", "ensemble_dir=/nonexistent",
                "--set", "input=/nonexistent.bt"]) == EXIT_VALIDATION
    assert "kind=validation" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# tokenize


def test_tokenize_outputs_and_determinism(pipeline, tmp_path):
    image = os.path.join(pipeline["data"], "test_00_observed.bt")
    outs = []
    for name in ("t1", "t2"):
        out = str(tmp_path / name)
        code = run(["tokenize", "--out", out,
                    "--set", f"ensemble_dir={pipeline['ens']}",
                    "--set", f"input={image}",
                    "--set", "rank=2", "--set", "k=3"])
        assert code == EXIT_OK
        outs.append(out)
    tokens = read_tensor(os.path.join(outs[0], "token_map.bt"))
    assert tokens.shape == (16, 16)
    assert tokens.dtype == np.int32
    assert set(np.unique(tokens)) <= set(range(3))
    hist = open(os.path.join(outs[0], "token_histograms.csv")).read().splitlines()
    assert hist[0] == "token,mean,count,bin_edges,counts"
    assert open(os.path.join(outs[0], "token_map.bt"), "rb").read() == \
        open(os.path.join(outs[1], "token_map.bt"), "rb").read()


# ---------------------------------------------------------------------------
# sweep + report (smallest possible run)


def test_sweep_and_report_ensemble_size(pipeline, tmp_path):
    out = str(tmp_path / "sweep")
    code = run(["sweep", "--out", out,
                "--set", f"data_dir={pipeline['data']}",
                "--set", "graph.depth=3", "--set", "graph.channels=2",
                "--set", "train.epochs=1",
                "--set", "ensemble_size.pool=2",
                "--set", "ensemble_size.sizes=[1,2]",
                "--set", "ensemble_size.repeats=2"])
    assert code == EXIT_OK
    csv_path = os.path.join(out, "ensemble_size_sweep.csv")
    lines = open(csv_path).read().splitlines()
    assert lines[0].startswith("size,repeat,member_indices")
    assert len(lines) == 5
    rep = str(tmp_path / "report")
    assert run(["report", "--out", rep, "--set", f"input={csv_path}"]) == EXIT_OK
    summary = open(os.path.join(rep, "ensemble_size_summary.csv")).read().splitlines()
    assert summary[0].startswith("size,repeats,cc_median")
    assert len(summary) == 3


def test_sweep_unknown_mode_is_validation_error(pipeline, tmp_path, capsys):
    assert run(["sweep", "--out", str(tmp_path / "s"),
                "--set", f"data_dir={pipeline['data']}",
                "--set", "mode=nonsense"]) == EXIT_VALIDATION
    assert "kind=validation" in capsys.readouterr().err


def test_report_missing_input_is_validation_error(tmp_path, capsys):
    assert run(["report", "--out", str(tmp_path / "r"),
                "--set", "input=/nonexistent.csv"]) == EXIT_VALIDATION
    assert "kind=validation" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# runtime errors


def test_corrupt_model_file_is_runtime_or_validation(pipeline, tmp_path, capsys):
    # A truncated model file fails at load; the CLI must not crash with a
    # traceback but exit with a reported error.
    ens = str(tmp_path / "brokenens")
    os.makedirs(ens)
    src = pipeline["ens"]
    manifest = open(os.path.join(src, "ensemble.json")).read()
    open(os.path.join(ens, "ensemble.json"), "w").write(manifest)
    blob = open(os.path.join(src, "member_00.model"), "rb").read()
    for name in ("member_00.model", "member_01.model"):
        open(os.path.join(ens, name), "wb").write(blob[: len(blob) // 2])
    image = os.path.join(pipeline["data"], "test_00_observed.bt")
    code = run(["infer", "--out", str(tmp_path / "o"),
                "--set", f"ensemble_dir={ens}", "--set", f"input={image}"])
    assert code in (EXIT_RUNTIME, EXIT_VALIDATION)
    assert "uqdenoise-error" in capsys.readouterr().err
