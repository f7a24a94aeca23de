"""Command-line runner: config parsing, experiment execution, comparison.

Configs are TOML with five sections (dataset, model, federation, aggregator,
seeds); dataset and aggregator are required, everything else defaults.
Unknown sections or keys are rejected so typos cannot silently fall back to
defaults. ``run`` persists a manifest plus CSV metrics; ``compare`` renders
an aligned table and an SVG of mean accuracy over rounds for several runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .errors import ConfigError, CraftflError
from .simulation import (
    AggregatorConfig,
    DatasetConfig,
    ExperimentConfig,
    FederatedRun,
    Seeds,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_IO = 3

SUMMARY_CSV = "summary.csv"
ACCURACY_CSV = "accuracy.csv"
DIAGNOSTICS_CSV = "diagnostics.csv"
HISTOGRAM_CSV = "histogram.csv"
MANIFEST_JSON = "manifest.json"
CONFIG_TOML = "config.toml"

SVG_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd",
               "#ff7f0e", "#8c564b", "#e377c2", "#17becf")

# section -> key -> (type tag, ExperimentConfig resolver)
_SCHEMA = {
    "dataset": {
        "kind": str, "classes": int, "features": int, "samples": int,
        "class_sep": float, "images": str, "labels": str,
    },
    "model": {
        "hidden": list, "activation": str,
    },
    "federation": {
        "clients": int, "active_per_round": int, "rounds": int,
        "eta_g": float, "eta_l": float, "lr_decay": float, "batch_size": int,
        "alpha": float, "min_per_client": int, "eval_every": int,
    },
    "aggregator": {
        "kind": str, "eps": float, "tau": float, "rank_tol": float,
        "beta": float, "beta1": float, "beta2": float, "tau_adapt": float,
        "mu": float,
    },
    "seeds": {
        "partition": int, "training": int, "sampling": int,
    },
}


def _coerce(section: str, key: str, value, expected):
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{section}.{key}' must be a number, got {value!r}")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{section}.{key}' must be an integer, got {value!r}")
        return value
    if expected is list:
        if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"key '{section}.{key}' must be a list of integers, got {value!r}")
        return tuple(value)
    if not isinstance(value, expected):
        raise ConfigError(
            f"key '{section}.{key}' must be a {expected.__name__}, got {value!r}")
    return value


def _check_schema(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table of sections")
    clean: dict = {}
    for section, body in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section '{section}'")
        if not isinstance(body, dict):
            raise ConfigError(f"section '{section}' must be a table")
        clean[section] = {}
        for key, value in body.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{section}.{key}'")
            clean[section][key] = _coerce(section, key, value, _SCHEMA[section][key])
    for required in ("dataset", "aggregator"):
        if required not in clean:
            raise ConfigError(f"missing required section '{required}'")
    return clean


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a (possibly nested) plain dict."""
    clean = _check_schema(raw)
    dataset = DatasetConfig(**clean["dataset"])
    # The numerical knobs of the projection live in the aggregator section of
    # the file but are experiment-level settings.
    aggregator_body = dict(clean["aggregator"])
    numerics = {key: aggregator_body.pop(key)
                for key in ("eps", "tau", "rank_tol") if key in aggregator_body}
    aggregator = AggregatorConfig(**aggregator_body)
    seeds = Seeds(**clean.get("seeds", {}))
    model = clean.get("model", {})
    federation = clean.get("federation", {})
    config = ExperimentConfig(
        dataset=dataset,
        aggregator=aggregator,
        seeds=seeds,
        hidden_dims=model.get("hidden", (200, 200)),
        activation=model.get("activation", "relu"),
        **numerics,
        **federation,
    )
    config.validate()
    return config


def config_to_dict(config: ExperimentConfig) -> dict:
    """Full (defaults included) plain-dict snapshot of a configuration."""
    dataset = {"kind": config.dataset.kind}
    if config.dataset.kind == "synthetic":
        dataset.update(classes=config.dataset.classes,
                       features=config.dataset.features,
                       samples=config.dataset.samples,
                       class_sep=config.dataset.class_sep)
    else:
        dataset.update(images=config.dataset.images, labels=config.dataset.labels)
    return {
        "dataset": dataset,
        "model": {"hidden": list(config.hidden_dims), "activation": config.activation},
        "federation": {
            "clients": config.clients,
            "active_per_round": config.active_per_round,
            "rounds": config.rounds,
            "eta_g": config.eta_g,
            "eta_l": config.eta_l,
            "lr_decay": config.lr_decay,
            "batch_size": config.batch_size,
            "alpha": config.alpha,
            "min_per_client": config.min_per_client,
            "eval_every": config.eval_every,
        },
        "aggregator": {
            "kind": config.aggregator.kind,
            "eps": config.eps,
            "tau": config.tau,
            "rank_tol": config.rank_tol,
            "beta": config.aggregator.beta,
            "beta1": config.aggregator.beta1,
            "beta2": config.aggregator.beta2,
            "tau_adapt": config.aggregator.tau_adapt,
            "mu": config.aggregator.mu,
        },
        "seeds": {
            "partition": config.seeds.partition,
            "training": config.seeds.training,
            "sampling": config.seeds.sampling,
        },
    }


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if any(c in text for c in ".einf") else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def format_config(config: ExperimentConfig) -> str:
    """Serialize a configuration back to TOML; parses to an equal config."""
    lines = []
    for section, body in config_to_dict(config).items():
        lines.append(f"[{section}]")
        for key, value in body.items():
            if value is None:
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    return config_from_dict(raw)


def parse_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def apply_seed_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``name=value`` seed overrides (partition, training, sampling)."""
    if not overrides:
        return config
    seeds = {"partition": config.seeds.partition,
             "training": config.seeds.training,
             "sampling": config.seeds.sampling}
    for item in overrides:
        name, _, value = item.partition("=")
        if name not in seeds or not value.lstrip("-").isdigit():
            raise ConfigError(
                f"bad seed override {item!r}; expected partition|training|sampling=<int>")
        seeds[name] = int(value)
    config = replace(config, seeds=Seeds(**seeds))
    config.validate()
    return config


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(cell) for cell in row])


def _write_error(out_dir: Path | None, exc: Exception):
    record = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(record), file=sys.stderr)
    if out_dir is not None:
        try:
            (out_dir / "error.json").write_text(json.dumps(record, indent=2) + "\n")
        except OSError:
            pass


def cmd_run(config_path, out_dir, seed_overrides=(), quiet=False) -> int:
    """Run one experiment and persist manifest + metrics; returns an exit code."""
    try:
        config = parse_config(config_path)
        config = apply_seed_overrides(config, seed_overrides)
    except ConfigError as exc:
        _write_error(None, exc)
        return EXIT_CONFIG

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        _write_error(None, exc)
        return EXIT_IO

    started = datetime.now(timezone.utc)

    def progress(record):
        if not quiet and record.evaluated:
            print(f"round {record.round}: mean={record.mean:.4f} "
                  f"best10={record.best10:.4f} worst10={record.worst10:.4f} "
                  f"std={record.std:.4f} conflicts={record.conflict_count}")

    try:
        run = FederatedRun(config)
        records = run.run(progress)
    except ConfigError as exc:
        _write_error(out, exc)
        return EXIT_CONFIG
    except CraftflError as exc:
        _write_error(out, exc)
        return EXIT_RUNTIME

    try:
        _write_csv(out / SUMMARY_CSV,
                   ["round", "mean", "best10", "worst10", "std", "conflicts", "residual"],
                   [[r.round, r.mean, r.best10, r.worst10, r.std,
                     r.conflict_count, r.residual_norm]
                    for r in records if r.evaluated])
        _write_csv(out / ACCURACY_CSV,
                   ["round", "client_id", "accuracy"],
                   [[r.round, client, float(acc)]
                    for r in records if r.evaluated
                    for client, acc in enumerate(r.accuracies)])
        _write_csv(out / DIAGNOSTICS_CSV,
                   ["round", "conflicts", "active_conflicts", "residual", "full_rank"],
                   [[r.round, r.conflict_count, r.active_conflict_count,
                     r.residual_norm, int(r.full_rank)]
                    for r in records])
        final = [r for r in records if r.evaluated][-1]
        counts, edges = np.histogram(final.accuracies, bins=20, range=(0.0, 1.0))
        _write_csv(out / HISTOGRAM_CSV,
                   ["bin_left", "bin_right", "count"],
                   [[float(edges[i]), float(edges[i + 1]), int(counts[i])]
                    for i in range(len(counts))])
        (out / CONFIG_TOML).write_text(format_config(config))
        manifest = {
            "tool": "craftfl",
            "version": __version__,
            "started_utc": started.isoformat(),
            "finished_utc": datetime.now(timezone.utc).isoformat(),
            "config": config_to_dict(config),
            "seeds": config_to_dict(config)["seeds"],
            "artifacts": {
                "summary": SUMMARY_CSV,
                "accuracy": ACCURACY_CSV,
                "diagnostics": DIAGNOSTICS_CSV,
                "histogram": HISTOGRAM_CSV,
                "config": CONFIG_TOML,
            },
        }
        (out / MANIFEST_JSON).write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        _write_error(None, exc)
        return EXIT_IO

    if not quiet:
        print(f"run complete: {len(records)} rounds, artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def _load_run(run_dir: Path):
    summary = run_dir / SUMMARY_CSV
    if not summary.is_file():
        raise ConfigError(f"incomplete run directory (no {SUMMARY_CSV}): {run_dir}")
    with open(summary, newline="") as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        raise ConfigError(f"incomplete run directory (empty {SUMMARY_CSV}): {run_dir}")
    curve = [(int(r["round"]), float(r["mean"])) for r in rows]
    last = rows[-1]
    final = {metric: float(last[metric]) for metric in ("mean", "best10", "worst10", "std")}
    return curve, final


def _mark_ranks(names, values, higher_is_better: bool) -> dict:
    """'*' for the best value, '_' for the second best; ties broken by name."""
    sign = -1.0 if higher_is_better else 1.0
    order = sorted(zip(names, values), key=lambda nv: (sign * nv[1], nv[0]))
    marks = {name: " " for name, _ in order}
    if order:
        marks[order[0][0]] = "*"
    if len(order) > 1:
        marks[order[1][0]] = "_"
    return marks


def render_table(finals: dict) -> str:
    """Aligned comparison table of final metrics, one row per run."""
    metrics = ("mean", "best10", "worst10", "std")
    names = sorted(finals)
    marks = {
        metric: _mark_ranks(names, [finals[n][metric] for n in names],
                            higher_is_better=(metric != "std"))
        for metric in metrics
    }
    width = max(len("run"), *(len(n) for n in names))
    head = "run".ljust(width) + "".join(f"  {m:>10}" for m in metrics)
    lines = [head]
    for name in names:
        cells = "".join(
            f"  {marks[m][name]}{finals[name][m]:>9.4f}" for m in metrics)
        lines.append(name.ljust(width) + cells)
    return "\n".join(lines)


def render_svg(curves: dict, width: int = 640, height: int = 400) -> str:
    """Mean-accuracy-vs-round chart: one polyline per run, fixed [0, 1] y axis."""
    margin = 50
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    max_round = max((max(r for r, _ in curve) for curve in curves.values()), default=1)
    max_round = max(max_round, 1)

    def x(round_index):
        return margin + plot_w * round_index / max_round

    def y(acc):
        return margin + plot_h * (1.0 - acc)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{margin + plot_h}" x2="{margin + plot_w}" '
        f'y2="{margin + plot_h}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{margin + plot_h}" '
        f'stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" '
        f'font-size="12">round</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.1f})">mean accuracy</text>',
    ]
    for tick in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{margin - 6}" y="{y(tick) + 4:.1f}" text-anchor="end" '
                     f'font-size="10">{tick:.1f}</text>')
    parts.append(f'<text x="{margin}" y="{margin + plot_h + 16}" text-anchor="middle" '
                 f'font-size="10">0</text>')
    parts.append(f'<text x="{margin + plot_w}" y="{margin + plot_h + 16}" '
                 f'text-anchor="middle" font-size="10">{max_round}</text>')

    for i, name in enumerate(sorted(curves)):
        color = SVG_PALETTE[i % len(SVG_PALETTE)]
        points = " ".join(f"{x(r):.2f},{y(a):.2f}" for r, a in curves[name])
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{points}"/>')
        parts.append(f'<text x="{margin + plot_w - 6}" y="{margin + 14 + 14 * i}" '
                     f'text-anchor="end" font-size="11" fill="{color}">'
                     f'{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_compare(run_dirs, out_path, quiet=False) -> int:
    """Compare completed runs: print a ranked table, write an SVG; read-only."""
    try:
        if len(run_dirs) < 2:
            raise ConfigError("compare needs at least two run directories")
        curves, finals = {}, {}
        for run_dir in run_dirs:
            name = Path(run_dir).name
            if name in finals:
                raise ConfigError(f"duplicate run name {name!r}")
            curves[name], finals[name] = _load_run(Path(run_dir))
    except ConfigError as exc:
        _write_error(None, exc)
        return EXIT_CONFIG

    table = render_table(finals)
    if not quiet:
        print(table)
    try:
        Path(out_path).write_text(render_svg(curves))
    except OSError as exc:
        _write_error(None, exc)
        return EXIT_IO
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="craftfl",
        description="Deterministic federated-learning experiments with "
                    "conflict-resolved aggregation.")
    parser.add_argument("--version", action="version", version=f"craftfl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a TOML config")
    run.add_argument("config", help="path to the experiment config")
    run.add_argument("--out", required=True, help="output directory for artifacts")
    run.add_argument("--seed-override", action="append", default=[],
                     metavar="NAME=INT",
                     help="override a named seed (partition|training|sampling)")
    run.add_argument("--quiet", action="store_true", help="suppress progress output")

    compare = sub.add_parser("compare", help="compare two or more completed runs")
    compare.add_argument("run_dirs", nargs="+", help="run directories to compare")
    compare.add_argument("--out", required=True, help="path for the SVG chart")
    compare.add_argument("--quiet", action="store_true", help="suppress the table")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, args.seed_override, args.quiet)
    return cmd_compare(args.run_dirs, args.out, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
