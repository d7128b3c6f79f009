"""Command-line surface: generate, train, detect, eval, viz.

Every command takes an optional ``--config`` key-value file plus command-line
overrides (environment variables prefixed ``AERO_`` sit between the two), and
echoes the fully resolved configuration next to its outputs so any run can be
replayed. Outputs are staged in a temporary sibling directory and moved into
place only on success.
"""

from __future__ import annotations

import argparse
import csv
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import nn
from .data import (NormStats, ObservationFrame, apply_normalize, fit_normalize,
                   load_csv, make_windows, save_csv)
from .detection import (label, pot_fit, save_threshold_report, score_stream)
from .evaluation import format_metrics, point_adjust, prf
from .noisegraph import NoiseModule, window_graph
from .synth import PRESETS, gen_dataset
from .temporal import TemporalModule, reconstruct
from .training import TrainConfig, train_stage1, train_stage2


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

CONFIG_DEFAULTS: dict[str, object] = {
    "w": 200, "omega": 60, "d_m": 32, "heads": 4, "layers": 1,
    "lr": 0.001, "max_epochs": 100, "patience": 5, "batch_size": 16,
    "stride": 1, "seed": 0, "val_fraction": 0.1, "grad_clip": 5.0,
    "dtype": "float64", "stage2_max_epochs": 300, "stage2_patience": 20,
    "pot_level": 0.99, "pot_q": 0.001, "threshold_stride": 1,
    "preset": "middle",
}


def _coerce(key: str, raw: str) -> object:
    default = CONFIG_DEFAULTS[key]
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_file(path: Path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}: line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(config_path: str | None, overrides: dict[str, object]
                   ) -> dict[str, object]:
    """Defaults < config file < AERO_* environment < command line."""
    resolved = dict(CONFIG_DEFAULTS)

    def apply(source: dict, describe: str, coerce: bool) -> None:
        for key, value in source.items():
            if key not in CONFIG_DEFAULTS:
                raise CliError(f"unknown configuration key {key!r} ({describe})")
            resolved[key] = _coerce(key, value) if coerce else value

    if config_path:
        apply(parse_config_file(Path(config_path)), f"in {config_path}", True)
    env = {k[len("AERO_"):].lower(): v for k, v in os.environ.items()
           if k.startswith("AERO_")}
    apply(env, "environment", True)
    apply({k: v for k, v in overrides.items() if v is not None}, "command line", False)
    return resolved


def write_config_echo(resolved: dict[str, object], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(resolved):
            fh.write(f"{key} = {resolved[key]}\n")


def train_config_from(resolved: dict[str, object]) -> TrainConfig:
    fields = ("w", "omega", "d_m", "heads", "layers", "lr", "max_epochs",
              "patience", "batch_size", "stride", "seed", "val_fraction",
              "grad_clip", "dtype", "stage2_max_epochs", "stage2_patience")
    return TrainConfig(**{f: resolved[f] for f in fields})


class _staged_outputs:
    """Stage files in a temp dir; move them into the target only on success."""

    def __init__(self, out_dir: str | Path):
        self.final = Path(out_dir)

    def __enter__(self) -> Path:
        self.final.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.final.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            for item in sorted(self.tmp.iterdir()):
                os.replace(item, self.final / item.name)
        shutil.rmtree(self.tmp, ignore_errors=True)


# ---------------------------------------------------------------------------
# model directory persistence
# ---------------------------------------------------------------------------

def save_model_dir(out_dir: Path, temporal: TemporalModule,
                   noise: NoiseModule, stats: NormStats,
                   median_interval: float) -> None:
    meta = {
        "norm/vmin": stats.vmin, "norm/vmax": stats.vmax,
        "meta/median_interval": np.array([median_interval]),
    }
    nn.save_checkpoint(out_dir / "stage1.npz", {**temporal.state_arrays(), **meta})
    nn.save_checkpoint(out_dir / "stage2.npz", {**noise.state_arrays(), **meta})


def load_model_dir(model_dir: Path, dtype=np.float64
                   ) -> tuple[TemporalModule, NoiseModule, NormStats, float]:
    s1 = nn.load_checkpoint(model_dir / "stage1.npz")
    s2 = nn.load_checkpoint(model_dir / "stage2.npz")
    temporal = TemporalModule.from_state(s1, dtype=dtype)
    noise = NoiseModule.from_state(s2, dtype=dtype)
    stats = NormStats(vmin=s1["norm/vmin"], vmax=s1["norm/vmax"])
    med = float(s1["meta/median_interval"][0])
    return temporal, noise, stats, med


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    resolved = resolve_config(args.config, {"preset": args.preset, "seed": args.seed})
    preset = str(resolved["preset"])
    if preset not in PRESETS:
        raise CliError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    train, test = gen_dataset(preset, seed=int(resolved["seed"]))
    # the train split publishes no ground truth
    train_public = ObservationFrame(values=train.values, times=train.times,
                                    variate_names=train.variate_names)
    with _staged_outputs(args.out) as tmp:
        save_csv(train_public, tmp / "train.csv")
        save_csv(test, tmp / "test.csv")
        write_config_echo(resolved, tmp / "resolved_config.txt")
    print(f"wrote dataset preset={preset} seed={resolved['seed']} to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {"seed": args.seed, "max_epochs": args.max_epochs,
                 "stride": args.stride, "dtype": args.dtype}
    resolved = resolve_config(args.config, overrides)
    config = train_config_from(resolved)

    train_path = Path(args.data) / "train.csv"
    if not train_path.exists():
        raise CliError(f"missing training data: {train_path}")
    frame = load_csv(train_path)
    stats = fit_normalize(frame)
    normalized = apply_normalize(frame, stats)
    med = frame.median_interval()
    windows = make_windows(normalized, config.w, config.omega,
                           stride=config.stride, median_interval=med)
    if not windows:
        raise CliError(f"training series shorter than window length {config.w}")

    with _staged_outputs(args.out) as tmp:
        log_path = tmp / "training_log.txt"
        temporal, report1 = train_stage1(windows, config, log_path=log_path)
        noise, report2 = train_stage2(windows, temporal, config, log_path=log_path)
        save_model_dir(tmp, temporal, noise, stats, med)
        write_config_echo(resolved, tmp / "resolved_config.txt")
    print(f"stage 1: {report1.epochs_run} epochs (best {report1.best_epoch}); "
          f"stage 2: {report2.epochs_run} epochs (best {report2.best_epoch})")
    return 0


def _write_score_csv(path: Path, times: np.ndarray, matrix: np.ndarray,
                     names: tuple[str, ...], fmt: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", *names])
        for j in range(times.size):
            writer.writerow([repr(float(times[j])), *(fmt % v for v in matrix[:, j])])


def cmd_detect(args: argparse.Namespace) -> int:
    resolved = resolve_config(args.config, {"threshold_stride": args.threshold_stride,
                                            "dtype": args.dtype})
    config = train_config_from(resolved)
    model_dir = Path(args.model)
    temporal, noise, stats, med = load_model_dir(model_dir, dtype=config.np_dtype)

    data_dir = Path(args.data)
    test_path = data_dir / "test.csv"
    train_path = data_dir / "train.csv"
    for p in (test_path, train_path):
        if not p.exists():
            raise CliError(f"missing data file: {p}")
    test = apply_normalize(load_csv(test_path), stats)
    train = apply_normalize(load_csv(train_path), stats)

    omega = noise.omega  # baked into the stage-2 weights; W comes from config
    test_windows = make_windows(test, config.w, omega,
                                stride=1, median_interval=med)
    thresh_windows = make_windows(train, config.w, omega,
                                  stride=int(resolved["threshold_stride"]),
                                  median_interval=med)
    if not test_windows:
        raise CliError("test series shorter than the window length")

    scores = score_stream(test_windows, temporal, noise)
    train_scores = score_stream(thresh_windows, temporal, noise)
    threshold = pot_fit(train_scores.scores, level=float(resolved["pot_level"]),
                        q=float(resolved["pot_q"]))
    labels = label(scores, threshold)
    times = test.times[scores.end_indices]

    with _staged_outputs(args.out) as tmp:
        _write_score_csv(tmp / "scores.csv", times, scores.scores,
                         test.variate_names, "%.8g")
        _write_score_csv(tmp / "labels.csv", times, labels,
                         test.variate_names, "%d")
        save_threshold_report(threshold, tmp / "threshold_report.txt")
        if args.graph_dump:
            indices = [int(i) for i in args.graph_dump.split(",")]
            _dump_graphs(tmp / "graphs.npz", test_windows, temporal, indices)
        write_config_echo(resolved, tmp / "resolved_config.txt")
    print(f"scored {len(test_windows)} windows; threshold z_q={threshold.z_q:.6g} "
          f"(t0={threshold.t0:.6g}, method={threshold.method})")
    return 0


def _dump_graphs(path: Path, windows, temporal: TemporalModule,
                 indices: list[int]) -> None:
    arrays = {}
    for i in indices:
        if not 0 <= i < len(windows):
            raise CliError(f"graph dump index {i} out of range [0, {len(windows)})")
        _, errors = reconstruct(windows[i], temporal)
        graph = window_graph(errors)
        arrays[f"window_{windows[i].end_index}"] = graph.adjacency
    np.savez(path, **arrays)


def _read_label_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    frame = load_csv(path)
    return frame.times, frame.values.astype(np.int8)


def cmd_eval(args: argparse.Namespace) -> int:
    pred_times, pred = _read_label_csv(Path(args.labels))
    truth_times, truth = _read_label_csv(Path(args.truth))
    idx = np.searchsorted(truth_times, pred_times)
    if (idx >= truth_times.size).any() or not np.allclose(truth_times[idx], pred_times):
        raise CliError("label times do not align with truth times")
    truth = truth[:, idx]
    if pred.shape != truth.shape:
        raise CliError(f"shape mismatch: labels {pred.shape} vs truth {truth.shape}")
    adjusted = pred if args.no_point_adjust else point_adjust(pred, truth)
    metrics = prf(adjusted, truth)
    line = format_metrics(metrics)
    print(line)
    if args.out:
        with _staged_outputs(args.out) as tmp:
            with open(tmp / "metrics.txt", "w", encoding="utf-8") as fh:
                fh.write(f"tp = {metrics.tp}\nfp = {metrics.fp}\nfn = {metrics.fn}\n")
                fh.write(f"precision = {metrics.precision * 100:.2f}\n")
                fh.write(f"recall = {metrics.recall * 100:.2f}\n")
                fh.write(f"f1 = {metrics.f1 * 100:.2f}\n")
    return 0


def cmd_viz(args: argparse.Namespace) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run)
    out_dir = Path(args.out or run_dir / "plots")
    scores_path = run_dir / "scores.csv"
    if not scores_path.exists():
        print(f"warning: {scores_path} missing; nothing to plot", file=sys.stderr)
        return 0

    times, scores = _read_score_matrix(scores_path)
    zq = _read_threshold(run_dir / "threshold_report.txt")

    with _staged_outputs(out_dir) as tmp:
        for v in range(scores.shape[0]):
            fig, ax = plt.subplots(figsize=(10, 2.2))
            ax.plot(times, scores[v], lw=0.7, label=f"variate {v}")
            if zq is not None:
                ax.axhline(zq, color="red", lw=0.8, ls="--", label="threshold")
            ax.set_xlabel("time")
            ax.set_ylabel("score")
            ax.legend(loc="upper right", fontsize=7)
            fig.tight_layout()
            fig.savefig(tmp / f"score_variate{v:03d}.png", dpi=110)
            plt.close(fig)

        graphs_path = run_dir / "graphs.npz"
        if graphs_path.exists():
            with np.load(graphs_path) as npz:
                for name in npz.files:
                    fig, ax = plt.subplots(figsize=(4, 3.5))
                    im = ax.imshow(npz[name], vmin=-1, vmax=1, cmap="viridis")
                    fig.colorbar(im, ax=ax)
                    ax.set_title(name)
                    fig.tight_layout()
                    fig.savefig(tmp / f"graph_{name}.png", dpi=110)
                    plt.close(fig)
        else:
            print("warning: no graph dumps found; score plots only", file=sys.stderr)
    print(f"plots written to {out_dir}")
    return 0


def _read_score_matrix(path: Path) -> tuple[np.ndarray, np.ndarray]:
    frame = load_csv(path)
    return frame.times, frame.values


def _read_threshold(path: Path) -> float | None:
    if not path.exists():
        return None
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("z_q"):
            return float(line.split("=", 1)[1])
    return None


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aero",
        description="Two-stage anomaly detection for star-magnitude series")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset preset")
    p.add_argument("--preset", default=None, help="middle, high, or low")
    p.add_argument("--seed", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="two-stage training on train.csv")
    p.add_argument("--data", required=True, help="directory with train.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", default=None)
    p.add_argument("--max-epochs", dest="max_epochs", default=None)
    p.add_argument("--stride", default=None)
    p.add_argument("--dtype", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score test.csv and emit labels")
    p.add_argument("--data", required=True, help="directory with train.csv/test.csv")
    p.add_argument("--model", required=True, help="directory with stage checkpoints")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--threshold-stride", dest="threshold_stride", default=None)
    p.add_argument("--dtype", default=None)
    p.add_argument("--graph-dump", dest="graph_dump", default=None,
                   help="comma-separated window indices to dump graphs for")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="point-adjusted metrics for predicted labels")
    p.add_argument("--labels", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--no-point-adjust", dest="no_point_adjust", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render score traces and graph heatmaps")
    p.add_argument("--run", required=True, help="directory produced by detect")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
