import json

import numpy as np
import pytest

from mvrestore import synth
from mvrestore.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from mvrestore.ingest import load_dataset, read_png
from mvrestore.metrics import read_report
from mvrestore.pairing import build_observations
from mvrestore.restore import read_f32, restore_image, run_restoration, write_f32
from mvrestore.uifm import read_fit_report

SMALL = ["--set", "n_views=5", "--set", "width=48", "--set", "height=36", "--set", "focal=40"]


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["simulate", "--preset", "corridor", *SMALL, "--out", str(root)]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def run(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["restore", "--dataset", str(data), "--out", str(out), "--targets", "0,2"]) == EXIT_OK
    return out


# -- simulate ----------------------------------------------------------------------


def test_simulate_corridor_writes_twenty_views(tmp_path):
    assert main(["simulate", "--preset", "corridor", "--out", str(tmp_path)]) == EXIT_OK
    assert len(load_dataset(tmp_path)) == 20
    assert len(list((tmp_path / "truth").glob("view_*.png"))) == 20


def test_simulate_same_seed_same_tree(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--preset", "corridor", *SMALL, "--seed", "5", "--out", str(tmp_path / d)]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_simulate_scene_file_reproduces_preset(data, tmp_path):
    assert main(["simulate", "--scene", str(data / "scene.txt"), "--out", str(tmp_path)]) == EXIT_OK
    assert _tree(tmp_path) == _tree(data)


@pytest.mark.parametrize(
    "argv",
    [
        ["--preset", "reef"],
        [],
        ["--preset", "corridor", "--set", "n_views"],
        ["--preset", "corridor", "--set", "warp=2"],
    ],
)
def test_simulate_usage_errors(tmp_path, argv):
    assert main(["simulate", *argv, "--out", str(tmp_path)]) == EXIT_USAGE


# -- restore -------------------------------------------------------------------------


def test_restore_outputs(run):
    for name in ("view_000", "view_002"):
        for ext in ("png", "f32", "fit.txt", "J.npy"):
            assert (run / "restored" / f"{name}.{ext}").is_file()
        assert (run / "observations" / f"{name}.obs").is_file()
    assert not (run / "restored" / "view_001.png").exists()
    cfg = json.loads((run / "run_config.json").read_text())
    assert cfg["targets"] == [0, 2] and cfg["steps"] == 200 and cfg["learning_rate"] == 0.05
    lines = (run / "timings.csv").read_text().splitlines()
    assert lines[0].startswith("target_id") and len(lines) == 3


def test_restore_matches_library(data, run):
    views = load_dataset(data)
    img, params, _ = restore_image(views, 2)
    raw = read_f32(run / "restored" / "view_002.f32", img.mask.shape)
    np.testing.assert_array_equal(raw[img.mask], img.values[img.mask].astype(np.float32))
    fitted, _, _ = read_fit_report(run / "restored" / "view_002.fit.txt")
    assert fitted.allclose(params)


def test_freeze_params_gives_closed_form(data, tmp_path):
    truth = synth.load_truth_params(data)
    cfg = tmp_path / "c.json"
    # the run starts from the default init, so the frozen values are the init values
    cfg.write_text(json.dumps({"targets": [1], "freeze": "beta,B,gamma"}))
    assert main(["restore", "--config", str(cfg), "--dataset", str(data), "--out", str(tmp_path / "r")]) == 0
    fitted, _, _ = read_fit_report(tmp_path / "r" / "restored" / "view_001.fit.txt")
    views = load_dataset(data)
    lib = run_restoration(views, 1, frozen=["beta", "B", "gamma"])
    p = lib.params
    assert fitted.allclose(p) and not fitted.allclose(truth)
    J = np.load(tmp_path / "r" / "restored" / "view_001.J.npy")
    m = lib.image.mask
    # closed form: weighted least squares per pixel with the params held
    obs = build_observations(views[1], views)
    k = np.searchsorted(np.flatnonzero(m.ravel()), obs.pixel_index)
    for c in range(3):
        b, B, g = p.channel(c)
        e = np.exp(-b * obs.distance)
        num = np.bincount(k, (obs.intensity[:, c] - B * (1 - np.exp(-g * obs.distance))) * e)
        closed = num / np.bincount(k, e * e)
        assert np.max(np.abs(J[m][:, c] - closed)) < 1e-4


def test_window_zero_is_self_only(data, tmp_path):
    assert main(["restore", "--dataset", str(data), "--out", str(tmp_path), "--targets", "3", "--window", "0"]) == 0
    views = load_dataset(data)
    self_only, _, _ = restore_image([v for v in views if v.id == 3], 3)
    raw = read_f32(tmp_path / "restored" / "view_003.f32", self_only.mask.shape)
    np.testing.assert_array_equal(raw[self_only.mask], self_only.values[self_only.mask].astype(np.float32))


def test_flags_override_config(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": 3, "window": 1, "targets": [0]}))
    argv = ["restore", "--config", str(cfg), "--dataset", str(data), "--out", str(tmp_path / "r"), "--steps", "2"]
    assert main(argv) == EXIT_OK
    echoed = json.loads((tmp_path / "r" / "run_config.json").read_text())
    assert echoed["steps"] == 2 and echoed["window"] == 1 and echoed["targets"] == [0]
    _, trace, _ = read_fit_report(tmp_path / "r" / "restored" / "view_000.fit.txt")
    assert trace[-1].step == 2


@pytest.mark.parametrize(
    "extra,config",
    [
        (["--freeze", "J,beta,B,gamma"], None),
        (["--freeze", "alpha"], None),
        (["--window", "-1"], None),
        (["--lr", "0"], None),
        (["--low-pct", "99"], None),
        (["--targets", "a,b"], None),
        ([], "{not json"),
        ([], '{"colour": 1}'),
    ],
)
def test_restore_usage_errors(data, tmp_path, extra, config):
    argv = ["restore", "--dataset", str(data), "--out", str(tmp_path / "r"), *extra]
    if config is not None:
        (tmp_path / "c.json").write_text(config)
        argv += ["--config", str(tmp_path / "c.json")]
    assert main(argv) == EXIT_USAGE


def test_missing_flag_value_is_usage_error(data, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["restore", "--dataset", str(data), "--out", str(tmp_path), "--steps"])
    assert e.value.code == EXIT_USAGE


def test_data_errors(data, tmp_path):
    assert main(["restore", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert main(["restore", "--dataset", str(data), "--out", str(tmp_path / "r"), "--targets", "42"]) == EXIT_DATA


@pytest.mark.filterwarnings("ignore:overflow")
def test_numerical_failure_exit_code(data, tmp_path):
    argv = ["restore", "--dataset", str(data), "--out", str(tmp_path), "--targets", "0", "--lr", "1e6"]
    assert main(argv) == EXIT_NUMERIC


def test_jobs_give_same_outputs(data, run, tmp_path):
    argv = ["restore", "--dataset", str(data), "--out", str(tmp_path), "--targets", "0,2", "--jobs", "2"]
    assert main(argv) == EXIT_OK
    for name in ("view_000", "view_002"):
        for ext in ("png", "f32", "fit.txt"):
            f = f"restored/{name}.{ext}"
            assert (tmp_path / f).read_bytes() == (run / f).read_bytes()


# -- evaluate ----------------------------------------------------------------------


def test_evaluate_truth_against_truth(data, tmp_path):
    d = tmp_path / "fake"
    d.mkdir()
    truth = read_png(data / "truth" / "view_000.png")
    (d / "view_000.png").write_bytes((data / "truth" / "view_000.png").read_bytes())
    write_f32(d / "view_000.f32", truth / 255.0)
    assert main(["evaluate", "--restored", str(d), "--truth", str(data), "--out", str(tmp_path / "m.csv")]) == 0
    got = {r[2]: r[3] for r in read_report(tmp_path / "m.csv")}
    assert got["psnr"] == float("inf") and got["ssim"] == pytest.approx(1.0, abs=1e-12)
    assert got["ciede2000"] == 0.0


def test_evaluate_chart_truth_gives_zero_psi(tmp_path):
    data = tmp_path / "chart"
    assert main(["simulate", "--preset", "flat_chart", "--set", "n_views=2", "--out", str(data)]) == 0
    d = tmp_path / "fake"
    d.mkdir()
    for p in sorted((data / "images").glob("*.png")):
        (d / p.name).write_bytes((data / "truth" / p.name).read_bytes())
        write_f32(d / f"{p.stem}.f32", read_png(data / "truth" / p.name) / 255.0)
    argv = ["evaluate", "--restored", str(d), "--charts", str(data / "charts.txt"), "--metrics", "psi",
            "--dataset", str(data), "--out", str(tmp_path / "m.csv")]
    assert main(argv) == EXIT_OK
    psi = [r[3] for r in read_report(tmp_path / "m.csv") if r[2].startswith("psi:")]
    assert len(psi) == 2 and max(psi) < 1e-3


def test_restored_beats_input(data, run, tmp_path):
    argv = ["evaluate", "--restored", str(run / "restored"), "--truth", str(data), "--dataset", str(data),
            "--include-input", "--metrics", "psnr", "--raw", "--out", str(tmp_path / "m.csv")]
    assert main(argv) == EXIT_OK
    rows = read_report(tmp_path / "m.csv")
    for name in ("view_000", "view_002"):
        score = {r[0]: r[3] for r in rows if r[1] == name}
        assert score["input"] < score["restored"]


@pytest.mark.parametrize(
    "metrics,with_truth", [("psi", True), ("lpips", True), ("psnr", False)]
)
def test_evaluate_usage_errors(run, data, tmp_path, metrics, with_truth):
    argv = ["evaluate", "--restored", str(run / "restored"), "--metrics", metrics, "--out", str(tmp_path / "m.csv")]
    if with_truth:
        argv += ["--truth", str(data)]
    assert main(argv) == EXIT_USAGE


def test_evaluate_empty_directory(tmp_path, data):
    assert main(["evaluate", "--restored", str(tmp_path), "--truth", str(data), "--out", str(tmp_path / "m")]) == 2


# -- diagnose and stitch ------------------------------------------------------------


def test_diagnose(data, run, tmp_path):
    assert main(["diagnose", "--dataset", str(data), "--run", str(run), "--out", str(tmp_path)]) == EXIT_OK
    for name in ("view_000", "view_002"):
        for f in ("residual_hist.csv", "residual_qq.csv", "residual_moments.csv", "fit_curves.csv"):
            assert (tmp_path / name / f).is_file()
    rows = (tmp_path / "param_scan.csv").read_text().splitlines()
    assert len(rows) == 3
    assert not (tmp_path / "timing.csv").exists()  # only two timed runs


def test_diagnose_without_run(data, tmp_path):
    assert main(["diagnose", "--dataset", str(data), "--run", str(tmp_path)]) == EXIT_DATA


def test_stitch(data, tmp_path):
    assert main(["stitch", "--dataset", str(data), "--out", str(tmp_path), "--targets", "1"]) == EXIT_OK
    assert (tmp_path / "stitched" / "view_001.png").is_file()
    assert (tmp_path / "run_config.json").is_file()


def test_rerun_is_byte_identical(data, tmp_path):
    argv = ["restore", "--dataset", str(data), "--out", str(tmp_path), "--targets", "0,2"]
    assert main(argv) == EXIT_OK
    first = _tree(tmp_path)
    assert main(argv) == EXIT_OK
    second = _tree(tmp_path)
    # timings are measurements, not data outputs
    first.pop("timings.csv")
    second.pop("timings.csv")
    assert first == second
