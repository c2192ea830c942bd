"""Command line entry point.

Commands::

    mvrestore simulate  --preset corridor --out data/
    mvrestore restore   --dataset data/ --out runs/a [--config run.json] [flags]
    mvrestore stitch    --dataset data/ --out runs/a [flags]
    mvrestore evaluate  --restored runs/a/restored --truth data/ [--charts data/charts.txt]
    mvrestore diagnose  --dataset data/ --run runs/a

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import diagnostics, metrics, synth
from .errors import DatasetError, DomainError, NumericalError
from .ingest import load_dataset, read_png
from .optimizer import AdamConfig
from .pairing import DISTANCE_MODES, build_observations, load_observations, save_observations
from .restore import read_f32, run_restoration, save_outputs, stitch_baseline
from .uifm import GROUPS, RestorationState, read_fit_report

logger = logging.getLogger("mvrestore")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run configuration -----------------------------------------------------------


@dataclass
class RunConfig:
    dataset: str = ""
    out: str = ""
    targets: object = "all"  # "all" or list of ids
    window: Optional[int] = None
    learning_rate: float = 0.05
    steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    log_every: int = 10
    low_pct: float = 1.0
    high_pct: float = 99.0
    distance_mode: str = "range"
    freeze: list = field(default_factory=list)
    seed: int = 0
    jobs: int = 1

    def validate(self) -> None:
        if not self.dataset:
            raise UsageError("a dataset root is required")
        if not self.out:
            raise UsageError("an output directory is required")
        if self.targets != "all":
            if not isinstance(self.targets, list) or not all(isinstance(t, int) for t in self.targets):
                raise UsageError("targets must be 'all' or a list of image ids")
        if self.window is not None and self.window < 0:
            raise UsageError("window must be >= 0")
        if self.distance_mode not in DISTANCE_MODES:
            raise UsageError(f"distance_mode must be one of {DISTANCE_MODES}")
        if not (0 <= self.low_pct < self.high_pct <= 100):
            raise UsageError("percentiles must satisfy 0 <= low < high <= 100")
        bad = set(self.freeze) - set(GROUPS)
        if bad:
            raise UsageError(f"unknown freeze groups {sorted(bad)}; choose from {', '.join(GROUPS)}")
        if set(self.freeze) >= set(GROUPS):
            raise UsageError("no free parameters: cannot freeze every group")
        if self.jobs < 1:
            raise UsageError("jobs must be >= 1")
        try:
            self.adam()
        except DomainError as e:
            raise UsageError(str(e)) from e

    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, self.steps, self.beta1, self.beta2, self.epsilon, self.log_every)


def _parse_targets(text: str):
    if text == "all":
        return "all"
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise UsageError(f"bad target list {text!r}") from e


def _parse_groups(text: str) -> list:
    return [g.strip() for g in text.split(",") if g.strip()]


def build_config(args) -> RunConfig:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise DatasetError(f"cannot read config {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config {args.config} is not valid JSON: {e}") from e
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        for k, v in data.items():
            setattr(cfg, k, v)
        if isinstance(cfg.freeze, str):
            cfg.freeze = _parse_groups(cfg.freeze)
    for name in known:
        v = getattr(args, name, None)
        if v is None:
            continue
        if name == "targets":
            v = _parse_targets(v)
        elif name == "freeze":
            v = _parse_groups(v)
        setattr(cfg, name, v)
    cfg.validate()
    cfg.freeze = sorted(set(cfg.freeze), key=GROUPS.index)
    return cfg


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=2) + "\n")


def _select(dataset, targets):
    if targets == "all":
        return [im.id for im in dataset]
    ids = {im.id for im in dataset}
    missing = [t for t in targets if t not in ids]
    if missing:
        raise DatasetError(f"target ids not in the dataset: {missing}")
    return list(targets)


# -- restore -------------------------------------------------------------------


def _restore_one(dataset, target_id: int, cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    res = run_restoration(
        dataset, target_id, cfg.adam(), window=cfg.window, distance_mode=cfg.distance_mode, frozen=cfg.freeze
    )
    name = next(im.name for im in dataset if im.id == target_id)
    extra = {"target_id": target_id, "observations": len(res.observations), "frozen": sorted(res.state.frozen)}
    save_outputs(out / "restored", name, res.image, res.params, res.trace, cfg.low_pct, cfg.high_pct, extra)
    np.save(out / "restored" / f"{name}.J.npy", res.state.image(blank=np.nan))
    (out / "observations").mkdir(parents=True, exist_ok=True)
    save_observations(out / "observations" / f"{name}.obs", res.observations)
    return {"target_id": target_id, "name": name, **res.timings}


def _restore_worker(payload):
    dataset, target_id, cfg = payload
    return _restore_one(dataset, target_id, cfg)


def cmd_restore(args) -> int:
    cfg = build_config(args)
    out = Path(cfg.out)
    echo_config(cfg, out)
    dataset = load_dataset(cfg.dataset)
    targets = _select(dataset, cfg.targets)
    if cfg.jobs > 1 and len(targets) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            rows = list(ex.map(_restore_worker, [(dataset, t, cfg) for t in targets]))
    else:
        rows = [_restore_one(dataset, t, cfg) for t in targets]
    # timings are measurements, not data outputs; they differ between reruns
    with open(out / "timings.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["target_id", "name", "observations", "pairing_s", "optimization_s"])
        for r in rows:
            w.writerow([r["target_id"], r["name"], r["observations"], f"{r['pairing_s']:.6f}", f"{r['optimization_s']:.6f}"])
    logger.info("restored %d image(s) into %s", len(rows), out / "restored")
    return EXIT_OK


def cmd_stitch(args) -> int:
    cfg = build_config(args)
    out = Path(cfg.out)
    echo_config(cfg, out)
    dataset = load_dataset(cfg.dataset)
    for t in _select(dataset, cfg.targets):
        img = stitch_baseline(dataset, t, window=cfg.window, distance_mode=cfg.distance_mode)
        name = next(im.name for im in dataset if im.id == t)
        save_outputs(out / "stitched", name, img, low_pct=cfg.low_pct, high_pct=cfg.high_pct)
    return EXIT_OK


# -- simulate ------------------------------------------------------------------


def _parse_set(items) -> dict:
    kv = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


def cmd_simulate(args) -> int:
    if bool(args.preset) == bool(args.scene):
        raise UsageError("give exactly one of --preset or --scene")
    if args.scene:
        try:
            settings = synth.parse_key_values(Path(args.scene).read_text())
        except OSError as e:
            raise DatasetError(f"cannot read scene file {args.scene}: {e}") from e
    else:
        if args.preset not in synth.PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(synth.PRESETS)}")
        settings = {"preset": args.preset}
    settings.update(_parse_set(args.set))
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    if args.noise_sigma is not None:
        settings["noise_sigma"] = str(args.noise_sigma)
    try:
        scene = synth.scene_from_settings(settings)
    except (DomainError, ValueError) as e:
        raise UsageError(f"bad scene settings: {e}") from e
    views = synth.export(scene, args.out)
    logger.info("wrote %d views of %s to %s", len(views), scene.name, args.out)
    return EXIT_OK


# -- evaluate ------------------------------------------------------------------


EVAL_METRICS = ("psnr", "ssim", "ciede2000", "psi")


def _metric_rows(method, name, img, truth, mask, wanted, charts, depth):
    rows = []
    if "psnr" in wanted:
        rows.append((method, name, "psnr", metrics.psnr(img, truth, mask)))
    if "ssim" in wanted:
        rows.append((method, name, "ssim", metrics.ssim(img, truth, mask)))
    if "ciede2000" in wanted:
        rows.append((method, name, "ciede2000", metrics.mean_ciede2000(img, truth, mask)))
    if "psi" in wanted:
        for chart in charts.get(name, []):
            if depth is not None:
                chart = chart.with_distance(depth)
                rows.append((method, name, f"chart_distance:{chart.chart_id}", chart.mean_distance))
            rows.append((method, name, f"psi:{chart.chart_id}", metrics.psi_bar(img, chart)))
            rows.append((method, name, f"hue_red:{chart.chart_id}", metrics.hue_of_patch(img, chart.patches[0][0])))
    return rows


def cmd_evaluate(args) -> int:
    wanted = _parse_groups(args.metrics)
    bad = set(wanted) - set(EVAL_METRICS)
    if bad:
        raise UsageError(f"unknown metrics {sorted(bad)}; choose from {', '.join(EVAL_METRICS)}")
    if "psi" in wanted and not args.charts:
        raise UsageError("the psi metric needs --charts")
    charts = metrics.parse_charts(args.charts) if args.charts else {}
    truth_root = Path(args.truth) if args.truth else None
    if truth_root is None and set(wanted) - {"psi"}:
        raise UsageError("psnr, ssim and ciede2000 need --truth")
    dataset = {im.name: im for im in load_dataset(args.dataset)} if args.dataset else {}

    restored = Path(args.restored)
    names = sorted(p.name[: -len(".f32")] for p in restored.glob("*.f32"))
    if not names:
        raise DatasetError(f"no restored images (*.f32) under {restored}")
    rows = []
    for name in names:
        truth = None
        if truth_root is not None:
            truth = read_png(truth_root / "truth" / f"{name}.png").astype(np.float64) / 255.0
        png = read_png(restored / f"{name}.png").astype(np.float64) / 255.0
        raw = read_f32(restored / f"{name}.f32", png.shape[:2])
        mask = np.isfinite(raw).all(axis=-1)
        img = raw if args.raw else png
        img = np.where(mask[..., None], img, 0.0)
        depth = dataset[name].depth if name in dataset else None
        rows += _metric_rows(args.method, name, img, truth, mask, wanted, charts, depth)
        if args.include_input:
            if name not in dataset:
                raise UsageError("--include-input needs --dataset containing the restored images")
            rows += _metric_rows("input", name, dataset[name].intensities, truth, mask, wanted, charts, depth)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_report(out, rows)
    for r in rows:
        logger.info("%s %s %s %s", r[0], r[1], r[2], "inf" if math.isinf(r[3]) else f"{r[3]:.4f}")
    return EXIT_OK


# -- diagnose ------------------------------------------------------------------


def cmd_diagnose(args) -> int:
    run = Path(args.run)
    out = Path(args.out) if args.out else run / "diagnostics"
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(args.dataset)
    by_name = {im.name: im for im in dataset}
    reports = sorted((run / "restored").glob("*.fit.txt"))
    if not reports:
        raise DatasetError(f"no fit reports under {run / 'restored'}")
    fitted = {}
    for rep in reports:
        name = rep.name[: -len(".fit.txt")]
        if name not in by_name:
            raise DatasetError(f"fit report {rep} does not match an image of the dataset")
        params, _, _ = read_fit_report(rep)
        target = by_name[name]
        fitted[target.id] = params
        J = np.load(run / "restored" / f"{name}.J.npy").reshape(-1, 3)
        pixels = np.flatnonzero(np.isfinite(J).all(axis=1))
        state = RestorationState(J[pixels], pixels, target.shape, params)
        cache = run / "observations" / f"{name}.obs"
        obs = load_observations(cache) if cache.is_file() else build_observations(target, dataset)
        sub = out / name
        diagnostics.write_residual_report(sub, diagnostics.residual_report(obs, state, args.sample_cap, seed=args.seed))
        diagnostics.write_fit_curves(sub / "fit_curves.csv", diagnostics.fit_curves(obs, state, args.tracks))
    diagnostics.write_param_scan(out / "param_scan.csv", diagnostics.param_variance_scan(dataset, fitted))
    timings = run / "timings.csv"
    if timings.is_file():
        with open(timings, newline="") as f:
            log = [(int(r["observations"]), float(r["pairing_s"]) + float(r["optimization_s"])) for r in csv.DictReader(f)]
        if len(log) >= 3:
            fit = diagnostics.timing_linearity(log)
            diagnostics.write_timing(out / "timing.csv", log, fit)
            logger.info("timing: slope %.3g s/obs, R² %.4f", fit[0], fit[2])
        else:
            logger.info("fewer than 3 timed runs; skipping the timing fit")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _add_run_flags(p):
    p.add_argument("--config", help="JSON file with run settings; flags override it")
    p.add_argument("--dataset", help="dataset root (cameras.txt, images.txt, images/, depths/)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--targets", help="'all' or comma-separated image ids")
    p.add_argument("--window", type=int, help="only pair images whose id is within ±N of the target")
    p.add_argument("--distance-mode", dest="distance_mode", choices=DISTANCE_MODES)
    p.add_argument("--low-pct", dest="low_pct", type=float)
    p.add_argument("--high-pct", dest="high_pct", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="targets restored in parallel")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvrestore", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="render a synthetic dataset")
    p.add_argument("--preset", help=f"one of {', '.join(synth.PRESETS)}")
    p.add_argument("--scene", help="scene settings file (key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scene setting")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("restore", help="restore target images")
    _add_run_flags(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--freeze", help="comma-separated groups held fixed: J, beta, B, gamma")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("stitch", help="nearest-observation stitching baseline")
    _add_run_flags(p)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("evaluate", help="metric table for restored images")
    p.add_argument("--restored", required=True, help="directory with NAME.png / NAME.f32 outputs")
    p.add_argument("--truth", help="dataset root holding truth/NAME.png")
    p.add_argument("--dataset", help="dataset root (chart distances, --include-input)")
    p.add_argument("--charts", help="charts.txt for the psi metric")
    p.add_argument("--metrics", default="psnr,ssim,ciede2000", help=f"comma-separated from {', '.join(EVAL_METRICS)}")
    p.add_argument("--raw", action="store_true", help="score raw float outputs instead of normalized 8-bit ones")
    p.add_argument("--method", default="restored", help="label for the method column")
    p.add_argument("--include-input", action="store_true", help="also score the unrestored input images")
    p.add_argument("--out", required=True, help="CSV report path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="residual, curve, timing and parameter reports")
    p.add_argument("--dataset", required=True)
    p.add_argument("--run", required=True, help="output directory of a restore run")
    p.add_argument("--out", help="report directory (default RUN/diagnostics)")
    p.add_argument("--sample-cap", dest="sample_cap", type=int, default=diagnostics.DEFAULT_SAMPLE_CAP)
    p.add_argument("--tracks", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mvrestore: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, DomainError) as e:
        print(f"mvrestore: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"mvrestore: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
