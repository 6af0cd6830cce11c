"""Command-line entry point: ``teamfdr run | simulate | classify``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .ingest import DataError, MarkerMatrix, quantile_normalize, read_matrix, read_two_cohorts
from .partition import PartitionSpec, build_partition, default_bins_per_dim, default_splits
from .partition import write_leaf_table
from .sim import PipelineConfig, get_setting, run_replications, setting_from_dict
from .team import StoppingRule, choose_max_layers, run_team

log = logging.getLogger("teamfdr")

EXIT_CONFIG = 2
EXIT_DATA = 3

CLASS_BANDS = {0: "nonfunctional", 1: "nonfunctional", 2: "nonfunctional",
               3: "monofunctional", 4: "monofunctional", 5: "bifunctional",
               6: "polyfunctional"}


class ConfigError(ValueError):
    """Invalid or inconsistent settings."""


@dataclass
class RunConfig:
    alpha: float = 0.05
    scheme: str = "sequential"
    bins_per_dim: int | None = None
    target_bin_count: float | None = None
    max_layers: int | None = None
    min_rejections: int | None = None
    rejection_ratio: float | None = None
    dims: list[list[str]] = field(default_factory=list)
    flip_cohorts: bool = False
    seed: int = 0
    out: Path = Path("team_out")

    def validate(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.scheme not in ("sequential", "adaptive"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.bins_per_dim is not None and self.bins_per_dim < (2 if self.scheme == "sequential" else 1):
            raise ConfigError("bins-per-dim is too small")
        if self.target_bin_count is not None and self.target_bin_count <= 0:
            raise ConfigError("target-bin-count must be positive")
        if self.max_layers is not None and self.max_layers < 1:
            raise ConfigError("max-layers must be >= 1")
        if self.rejection_ratio is not None and self.rejection_ratio < 0:
            raise ConfigError("rejection-ratio must be >= 0")
        if self.min_rejections is not None and self.min_rejections < 0:
            raise ConfigError("min-rejections must be >= 0")


# flag name -> (RunConfig field, parser)
_RUN_KEYS = {
    "alpha": ("alpha", float),
    "scheme": ("scheme", str),
    "bins-per-dim": ("bins_per_dim", int),
    "target-bin-count": ("target_bin_count", float),
    "max-layers": ("max_layers", int),
    "min-rejections": ("min_rejections", int),
    "rejection-ratio": ("rejection_ratio", float),
    "flip-cohorts": ("flip_cohorts", lambda v: str(v).strip().lower() in ("1", "true", "yes", "on")),
    "seed": ("seed", int),
    "out": ("out", Path),
}


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; ``dims`` may repeat."""
    values: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key == "dims":
            values.setdefault("dims", []).extend(v for v in value.split(";") if v.strip())
        elif key in _RUN_KEYS:
            values[key] = value
        else:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    return values


def _parse_dims(items) -> list[list[str]]:
    subsets = []
    for item in items or []:
        names = [s.strip() for s in str(item).split(",") if s.strip()]
        if not names:
            raise ConfigError(f"empty dimension subset {item!r}")
        subsets.append(names)
    return subsets


def build_run_config(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    cfg = RunConfig()
    for flag, (attr, parse) in _RUN_KEYS.items():
        cli_value = getattr(args, attr, None)
        if attr == "flip_cohorts" and cli_value is False:
            cli_value = None
        raw = cli_value if cli_value is not None else file_values.get(flag)
        if raw is None:
            continue
        try:
            setattr(cfg, attr, parse(raw))
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {flag}: {raw!r}") from None
    cfg.dims = _parse_dims(args.dims if args.dims else file_values.get("dims"))
    cfg.validate()
    return cfg


def _load_data(args) -> MarkerMatrix:
    if args.cohort1 or args.cohort2:
        if not (args.cohort1 and args.cohort2) or args.data:
            raise ConfigError("give either one data file or both --cohort1 and --cohort2")
        matrix = read_two_cohorts(args.cohort1, args.cohort2, sample_col=args.sample_col,
                                  delimiter=args.delimiter)
    elif args.data:
        matrix = read_matrix(args.data, cohort_col=args.cohort_col, sample_col=args.sample_col,
                             delimiter=args.delimiter)
    else:
        raise ConfigError("no input data given")
    matrix.require_both_cohorts()
    if args.normalize:
        matrix = quantile_normalize(matrix)
    return matrix


def _fmt(value: float) -> str:
    return repr(float(value))


def analyze_subset(matrix: MarkerMatrix, markers: list[str], cfg: RunConfig):
    """Partition and test one marker subset; returns (leaf table, summary)."""
    sub = matrix.select(markers)
    if cfg.flip_cohorts:
        sub = sub.flipped()
    resolution = cfg.bins_per_dim
    if resolution is None:
        if cfg.scheme == "sequential":
            resolution = default_bins_per_dim(sub.n_rows, sub.n_markers, cfg.target_bin_count)
        else:
            resolution = default_splits(sub.n_rows, cfg.target_bin_count)
    spec = PartitionSpec(cfg.scheme, resolution)
    binning = build_partition(sub, spec)
    max_layers = cfg.max_layers
    if max_layers is None and cfg.min_rejections is None and cfg.rejection_ratio is None:
        max_layers = choose_max_layers(binning.m)
    rule = StoppingRule(max_layers, cfg.min_rejections, cfg.rejection_ratio)
    result = run_team(binning, cfg.alpha, rule)

    table = binning.leaf_table()
    table["p_first_tested"] = result.p_first
    table["rejected"] = result.rejected.astype(int)
    table["rejection_layer"] = result.rejection_layer
    summary = {
        "markers": list(markers),
        "N1": sub.n1,
        "N2": sub.n2,
        "theta0": result.theta0,
        "alpha": cfg.alpha,
        "scheme": cfg.scheme,
        "resolution": int(resolution),
        "m": binning.m,
        "flip_cohorts": cfg.flip_cohorts,
        "stopping_rule": {"max_layers": rule.max_layers, "min_rejections": rule.min_rejections,
                          "rejection_ratio": rule.rejection_ratio},
        "stop_layer": result.stop_layer,
        "rejected_leaves": int(result.rejected.sum()),
        "layers": result.summary()["layers"],
    }
    return table, summary


def _summary_text(summary: dict) -> str:
    lines = [f"[{'/'.join(summary['markers'])}] N1={summary['N1']} N2={summary['N2']} "
             f"theta0={summary['theta0']:.6g} m={summary['m']} "
             f"rejected leaves={summary['rejected_leaves']}"]
    for rec in summary["layers"]:
        lines.append(f"  layer {rec['layer']}: nodes={rec['m_layer']} c_hat={rec['c_hat']:.6g} "
                     f"rejected nodes={rec['rejected_nodes']} leaves={rec['rejected_leaves']}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    cfg = build_run_config(args)
    matrix = _load_data(args)
    subsets = cfg.dims or [list(matrix.marker_names)]
    cfg.out.mkdir(parents=True, exist_ok=True)
    index = []
    for markers in subsets:
        table, summary = analyze_subset(matrix, markers, cfg)
        stem = "_".join(markers)
        leaf_path = cfg.out / f"{stem}.leaves.csv"
        summary_path = cfg.out / f"{stem}.summary.json"
        write_leaf_table(table, leaf_path)
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        index.append({"markers": markers, "leaf_table": leaf_path.name,
                      "summary": summary_path.name})
        print(_summary_text(summary))
    (cfg.out / "analyses.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_simulate(args) -> int:
    if args.reps < 1:
        raise ConfigError("reps must be >= 1")
    if not 0.0 < args.alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {args.alpha}")
    if args.spec:
        try:
            setting = setting_from_dict(json.loads(Path(args.spec).read_text()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot use spec file {args.spec}: {exc}") from None
    else:
        try:
            setting = get_setting(args.setting)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
    if args.scale != 1.0:
        if args.scale <= 0:
            raise ConfigError("scale must be positive")
        setting = setting.scaled(args.scale)
    config = PipelineConfig(args.alpha, "sequential", args.bins_per_dim, args.max_layers)
    spec, rule = config.resolve(setting)
    log.info("setting %s: N1=%d N2=%d, %d leaves, %d layers", setting.name, setting.N1,
             setting.N2, spec.n_leaves(setting.dim), rule.max_layers)
    per_rep, summary = run_replications(setting, args.reps, config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_rep.to_csv(out / f"{setting.name}.per_rep.csv", index=False, float_format="%.17g")
    summary.to_csv(out / f"{setting.name}.summary.csv", index=False, float_format="%.17g")
    with pd.option_context("display.width", 120):
        print(summary.to_string(index=False))
    return 0


def _box_contains(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.all((values >= lo) & (values < hi), axis=1)


def classify_counts(tables: list[pd.DataFrame], events: pd.DataFrame) -> np.ndarray:
    """Per event, the number of tables whose rejected leaves contain it."""
    counts = np.zeros(len(events), dtype=np.int64)
    for table in tables:
        markers = [c[:-3] for c in table.columns if c.endswith("_lo")]
        missing = [m for m in markers if m not in events.columns]
        if missing:
            raise DataError(f"events lack dimension(s): {', '.join(missing)}")
        values = events[markers].to_numpy(dtype=np.float64)
        lo = table[[f"{m}_lo" for m in markers]].to_numpy(dtype=np.float64)
        hi = table[[f"{m}_hi" for m in markers]].to_numpy(dtype=np.float64)
        # outermost leaves reach to infinity, matching point assignment
        lo = np.where(lo <= lo.min(axis=0), -np.inf, lo)
        hi = np.where(hi >= hi.max(axis=0), np.inf, hi)
        rejected = np.flatnonzero(table["rejected"].to_numpy() > 0)
        inside = np.zeros(len(events), dtype=bool)
        for i in rejected:
            inside |= _box_contains(values, lo[i], hi[i])
        counts += inside
    return counts


def class_labels(counts: np.ndarray, n_tables: int) -> list[str]:
    if n_tables != 6:
        return ["unclassified"] * len(counts)
    return [CLASS_BANDS[int(c)] for c in counts]


def cmd_classify(args) -> int:
    if not args.tables:
        raise ConfigError("give at least one leaf table")
    tables = []
    for path in args.tables:
        if not Path(path).is_file():
            raise DataError(f"no such file: {path}")
        tables.append(pd.read_csv(path))
    if not Path(args.events).is_file():
        raise DataError(f"no such file: {args.events}")
    events = pd.read_csv(args.events, sep=args.delimiter or ",")
    if args.cohort is not None:
        if args.cohort_col not in events.columns:
            raise DataError(f"cohort column {args.cohort_col!r} not found")
        events = events[events[args.cohort_col].astype(str).str.strip() == str(args.cohort)]
    counts = classify_counts(tables, events)
    labels = class_labels(counts, len(tables))
    out = pd.DataFrame({"event": events.index.to_numpy() + 1, "count": counts,
                        "class": labels, "gap_flag": (counts == 2).astype(int)})
    out.to_csv(args.out, index=False)
    shares = out["class"].value_counts(normalize=True).sort_index()
    print(json.dumps({k: float(v) for k, v in shares.items()}, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teamfdr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="test one or more marker subsets of a data set")
    run.add_argument("data", nargs="?", help="CSV/TSV with both cohorts")
    run.add_argument("--cohort1", help="file holding only cohort-1 rows")
    run.add_argument("--cohort2", help="file holding only cohort-2 rows")
    run.add_argument("--cohort-col", default="cohort")
    run.add_argument("--sample-col")
    run.add_argument("--delimiter")
    run.add_argument("--normalize", action="store_true",
                     help="quantile-normalize channels across --sample-col groups")
    run.add_argument("--config", help="key = value file; flags override it")
    run.add_argument("--alpha", type=float)
    run.add_argument("--scheme", choices=["sequential", "adaptive"])
    run.add_argument("--bins-per-dim", type=int)
    run.add_argument("--target-bin-count", type=float)
    run.add_argument("--max-layers", type=int)
    run.add_argument("--min-rejections", type=int)
    run.add_argument("--rejection-ratio", type=float)
    run.add_argument("--dims", action="append", help="comma-separated markers; repeatable")
    run.add_argument("--flip-cohorts", action="store_true")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path)
    run.set_defaults(func=cmd_run)

    sim = sub.add_parser("simulate", help="replicate a simulation setting")
    sim.add_argument("setting", nargs="?", default="S1", help="S1, S2, S3 or S4")
    sim.add_argument("--spec", help="JSON file describing a custom setting")
    sim.add_argument("--reps", type=int, default=1)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--alpha", type=float, default=0.05)
    sim.add_argument("--layers", "--max-layers", dest="max_layers", type=int)
    sim.add_argument("--bins-per-dim", type=int)
    sim.add_argument("--scale", type=float, default=1.0,
                     help="multiply every cohort size (desk-scale runs)")
    sim.add_argument("--out", default="team_sim")
    sim.set_defaults(func=cmd_simulate)

    cls = sub.add_parser("classify", help="count sub-analyses whose rejected leaves hold each event")
    cls.add_argument("--tables", nargs="+", required=True, help="leaf tables from `run`")
    cls.add_argument("--events", required=True, help="CSV of events to classify")
    cls.add_argument("--delimiter")
    cls.add_argument("--cohort", help="only classify rows whose cohort column equals this")
    cls.add_argument("--cohort-col", default="cohort")
    cls.add_argument("--out", default="classes.csv")
    cls.set_defaults(func=cmd_classify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"teamfdr: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"teamfdr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
