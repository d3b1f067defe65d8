"""Experiment runner: ``licfl run | compare | cohort-inspect``.

An experiment is one JSON document::

    {
      "data": {"source": "synthetic", "num_clients": 20, "cohorts": 2, "samples_per_client": 1000},
      "federation": {"rounds": 20, "lr": 0.2, "hidden": [32, 16]},
      "cohort": {"k_cohorts": 2},
      "runs": ["fl", "ifl", "licfl", "alicfl", "licfl+FedYogi"],
      "seeds": [0, 1, 2],
      "output": "runs/demo"
    }

For CSV data use ``{"source": "csv", "telemetry": ..., "failures": ..., "meta": ...}``.
A run may also be an object ``{"label": ..., "cohorting": ..., "aggregation": ...}``.
Each (run, seed) pair writes ``rounds.jsonl``, ``cohorts.json``,
``summary.json`` and ``config.json`` under ``<output>/<label>/seed<seed>/``;
``<output>/metrics.csv`` collects one row per (mode, seed, round, client).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .aggregation import StrategyKind
from .cohorting import CohortConfig, cohort
from .data import SynthSpec, load_csv, prepare_clients, synth_generate, to_dataset
from .metrics import adjusted_rand_index
from .orchestrator import COHORTING_MODES, FederationConfig, initial_params, run_federation, run_round_one

log = logging.getLogger("licfl")

OUTPUT_ENV = "LICFL_OUTPUT_ROOT"
DEFAULT_OUTPUT = "runs"

BASE_MODES = {
    "fl": ("none", "FedAvg"),
    "ifl": ("moments", "FedAvg"),
    "licfl": ("licfl", "FedAvg"),
    "alicfl": ("licfl", "adaptive"),
    "plicfl": ("primary+licfl", "FedAvg"),
}

METRICS_HEADER = ["mode", "seed", "round", "client", "cohort", "mse", "f1", "global_mse"]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the offending field."""


@dataclass
class RunSpec:
    label: str
    cohorting: str
    aggregation: str

    def to_dict(self) -> dict:
        return {"label": self.label, "cohorting": self.cohorting, "aggregation": self.aggregation}


@dataclass
class ExperimentConfig:
    data: dict
    federation: dict
    cohort: dict
    runs: list[RunSpec]
    seeds: list[int]
    output: str | None = None

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "federation": self.federation,
            "cohort": self.cohort,
            "runs": [r.to_dict() for r in self.runs],
            "seeds": list(self.seeds),
            "output": self.output,
        }

    def federation_config(self, run: RunSpec, seed: int) -> FederationConfig:
        cc = CohortConfig(**{"seed": seed, **self.cohort})
        return FederationConfig(**self.federation, cohorting=run.cohorting, aggregation=run.aggregation,
                                cohort=cc, seed=seed)


def parse_run(item, where: str) -> RunSpec:
    """Resolve a mode label (``fl``, ``licfl+FedYogi``, ...) or an explicit run object."""
    if isinstance(item, dict):
        unknown = set(item) - {"label", "cohorting", "aggregation"}
        if unknown:
            raise ConfigError(f"{where}.{sorted(unknown)[0]}: unknown field")
        if "label" not in item:
            raise ConfigError(f"{where}.label: required")
        base = parse_run(item["label"], where) if item["label"] in BASE_MODES else None
        spec = RunSpec(item["label"], item.get("cohorting", base.cohorting if base else "none"),
                       item.get("aggregation", base.aggregation if base else "FedAvg"))
    elif isinstance(item, str):
        name, _, strategy = item.partition("+")
        if name not in BASE_MODES:
            raise ConfigError(f"{where}: unknown mode {item!r}; expected one of {sorted(BASE_MODES)} "
                              "optionally followed by +<strategy>")
        cohorting, aggregation = BASE_MODES[name]
        if strategy:
            try:
                aggregation = StrategyKind.parse(strategy).value
            except ValueError as exc:
                raise ConfigError(f"{where}: {exc}") from None
        spec = RunSpec(item, cohorting, aggregation)
    else:
        raise ConfigError(f"{where}: expected a mode label or an object")
    if spec.cohorting not in COHORTING_MODES:
        raise ConfigError(f"{where}.cohorting: must be one of {COHORTING_MODES}")
    if spec.aggregation != "adaptive":
        try:
            StrategyKind.parse(spec.aggregation)
        except ValueError as exc:
            raise ConfigError(f"{where}.aggregation: {exc}") from None
    return spec


_SYNTH_KEYS = {f.name for f in fields(SynthSpec)} | {"source", "seed", "train_fraction"}
_CSV_KEYS = {"source", "telemetry", "failures", "meta", "train_fraction", "max_machines", "window"}
_FED_KEYS = {f.name for f in fields(FederationConfig)} - {"cohorting", "aggregation", "cohort", "seed"}
_COHORT_KEYS = {f.name for f in fields(CohortConfig)}


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}: unknown field")


def validate_config(raw: dict) -> ExperimentConfig:
    """Check every field and build an ExperimentConfig; raises ConfigError naming the field."""
    _check_keys(raw, {"data", "federation", "cohort", "runs", "seeds", "output"}, "config")
    data = raw.get("data")
    if data is None:
        raise ConfigError("data: required")
    source = data.get("source") if isinstance(data, dict) else None
    if source == "synthetic":
        _check_keys(data, _SYNTH_KEYS, "data")
        try:
            SynthSpec(**{k: v for k, v in data.items() if k in {f.name for f in fields(SynthSpec)}})
        except TypeError as exc:
            raise ConfigError(f"data: {exc}") from None
    elif source == "csv":
        _check_keys(data, _CSV_KEYS, "data")
        for key in ("telemetry", "failures"):
            if key not in data:
                raise ConfigError(f"data.{key}: required for csv data")
        for key in ("telemetry", "failures", "meta"):
            if data.get(key) is not None and not Path(data[key]).is_file():
                raise ConfigError(f"data.{key}: file not found: {data[key]}")
    else:
        raise ConfigError("data.source: must be 'synthetic' or 'csv'")
    frac = data.get("train_fraction", 0.8)
    if not 0 < frac < 1:
        raise ConfigError(f"data.train_fraction: must lie in (0, 1), got {frac}")

    federation = dict(raw.get("federation", {}))
    _check_keys(federation, _FED_KEYS, "federation")
    cohort_cfg = dict(raw.get("cohort", {}))
    _check_keys(cohort_cfg, _COHORT_KEYS, "cohort")
    for section, obj, build in (("federation", federation, lambda o: FederationConfig(**o)),
                                ("cohort", cohort_cfg, lambda o: CohortConfig(**o))):
        try:
            build(obj)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from None

    runs_raw = raw.get("runs")
    if not isinstance(runs_raw, list) or not runs_raw:
        raise ConfigError("runs: need at least one run")
    runs = [parse_run(item, f"runs[{i}]") for i, item in enumerate(runs_raw)]
    labels = [r.label for r in runs]
    if len(set(labels)) != len(labels):
        raise ConfigError("runs: labels must be unique")

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: need a non-empty list of integers")
    return ExperimentConfig(dict(data), federation, cohort_cfg, runs, list(seeds), raw.get("output"))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"--config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return validate_config(raw)


def build_clients(data: dict, seed: int):
    """Return ``(clients, planted_labels_or_None)`` for one seed."""
    frac = data.get("train_fraction", 0.8)
    if data["source"] == "synthetic":
        spec = SynthSpec(**{k: v for k, v in data.items() if k in {f.name for f in fields(SynthSpec)}})
        datasets, planted = synth_generate(spec, data.get("seed", seed))
        return prepare_clients(datasets, frac), planted

    paths = {}
    for key in ("telemetry", "failures", "meta"):
        if data.get(key) is None:
            continue
        p = Path(data[key])
        if not p.is_file():
            raise ConfigError(f"data.{key}: file not found: {p}")
        paths[key] = p
    machines = load_csv(paths["telemetry"], paths["failures"], paths.get("meta"))
    ids = sorted(machines)
    if data.get("max_machines"):
        ids = ids[: int(data["max_machines"])]
    datasets = [to_dataset(machines[m], data.get("window", 24)) for m in ids]
    return prepare_clients(datasets, frac), None


def resolve_output(cli_out, cfg: ExperimentConfig) -> Path:
    return Path(cli_out or cfg.output or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out: Path) -> list[dict]:
    """Execute every (run, seed) pair; returns the summaries."""
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    rows = []
    for seed in cfg.seeds:
        clients, planted = build_clients(cfg.data, seed)
        for run in cfg.runs:
            fed = cfg.federation_config(run, seed)
            run_dir = out / run.label / f"seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            if fed.checkpoint_every and fed.checkpoint_dir is None:
                fed.checkpoint_dir = str(run_dir / "checkpoints")
            log.info("run %s seed %d: %d clients, %d rounds", run.label, seed, len(clients), fed.rounds)
            result = run_federation(fed, clients, log_path=run_dir / "rounds.jsonl")

            echo = copy.deepcopy(cfg.to_dict())
            echo.update(runs=[run.to_dict()], seeds=[seed], output=str(out))
            _write_json(run_dir / "config.json", echo)

            assignment = result.assignment
            cohorts_doc = {
                "labels": {str(c): j for c, j in sorted(assignment.labels.items())},
                "cohorts": assignment.cohorts(),
                "federation": fed.to_dict(),
            }
            if planted is not None:
                cohorts_doc["planted"] = [int(x) for x in planted]
                cohorts_doc["ari"] = adjusted_rand_index(assignment.label_array(), planted)
            _write_json(run_dir / "cohorts.json", cohorts_doc)

            final = result.logs[-1]
            summary = {
                "mode": run.label,
                "seed": seed,
                "rounds": fed.rounds,
                "num_cohorts": assignment.num_cohorts,
                "final_mse": final.global_mse,
                "final_f1": final.global_f1,
                "clients": {str(r["client"]): {"mse": r["mse"], "f1": r["f1"], "cohort": r["cohort"]}
                            for r in final.clients},
            }
            _write_json(run_dir / "summary.json", summary)
            summaries.append(summary)
            for rec in result.logs:
                for r in rec.clients:
                    rows.append([run.label, seed, rec.round, r["client"], r["cohort"], repr(r["mse"]),
                                 repr(r["f1"]), repr(rec.global_mse)])

    with (out / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        w.writerows(rows)
    return summaries


# --- compare -----------------------------------------------------------------


class LogParseError(ValueError):
    pass


@dataclass
class LogSummary:
    path: Path
    mode: str
    seed: int | None
    losses: list[float]
    client_f1: dict[int, float]
    chosen: Counter
    adaptive: bool

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def rounds_to(self, threshold: float) -> int | None:
        for r, v in enumerate(self.losses, start=1):
            if v <= threshold:
                return r
        return None


def read_log(path) -> LogSummary:
    """Parse one ``rounds.jsonl``; mode and seed come from a sibling config.json when present."""
    path = Path(path)
    if not path.is_file():
        raise LogParseError(f"{path}: no such file")
    losses, chosen, adaptive, last = [], Counter(), False, None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                cohorts = rec["cohorts"]
                losses.append(float(rec["global_mse"]))
                clients = rec["clients"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise LogParseError(f"{path}:{lineno}: malformed round record ({exc})") from None
            num_cohorts = len({c["cohort"] for c in clients})
            for entry in cohorts:
                adaptive = adaptive or "scores" in entry
                # the bootstrap aggregation is inherited by every cohort
                chosen[entry["chosen"]] += num_cohorts if entry.get("cohort") is None else 1
            last = clients
    if last is None:
        raise LogParseError(f"{path}:1: empty log")
    mode, seed = path.parent.parent.name, None
    cfg_path = path.parent / "config.json"
    if cfg_path.is_file():
        echo = json.loads(cfg_path.read_text())
        mode, seed = echo["runs"][0]["label"], echo["seeds"][0]
    f1s = {int(c["client"]): float(c["f1"]) for c in last}
    return LogSummary(path, mode, seed, losses, f1s, chosen, adaptive)


def compare_logs(paths, threshold: float | None = None) -> tuple[list[LogSummary], float]:
    """Sort logs ascending by final loss; the default threshold is the worst final loss."""
    logs = [read_log(p) for p in paths]
    if not logs:
        raise ValueError("compare needs at least one log")
    if threshold is None:
        threshold = max(lg.final_loss for lg in logs)
    return sorted(logs, key=lambda lg: (lg.final_loss, str(lg.path))), threshold


def format_comparison(logs: list[LogSummary], threshold: float) -> str:
    lines = [f"{'mode':<18} {'seed':>5} {'final_loss':>12} {'rounds_to_thr':>14} {'mean_f1':>8}"]
    for lg in logs:
        r = lg.rounds_to(threshold)
        lines.append(f"{lg.mode:<18} {'-' if lg.seed is None else lg.seed:>5} {lg.final_loss:>12.6f} "
                     f"{'-' if r is None else r:>14} {np.mean(list(lg.client_f1.values())):>8.4f}")
    lines.append(f"(threshold {threshold:.6f})")

    clients = sorted({c for lg in logs for c in lg.client_f1})
    if clients:
        lines.append("")
        lines.append("per-client F1")
        lines.append(f"{'client':>6} " + " ".join(f"{lg.mode[:12]:>12}" for lg in logs))
        for c in clients:
            vals = " ".join(f"{lg.client_f1.get(c, float('nan')):>12.4f}" for lg in logs)
            lines.append(f"{c:>6} {vals}")

    for lg in logs:
        if lg.adaptive:
            lines.append("")
            lines.append(f"strategy selections: {lg.mode} seed {lg.seed}")
            for name in [k.value for k in StrategyKind]:
                if lg.chosen[name]:
                    lines.append(f"  {name:<12} {lg.chosen[name]:>4} {'#' * lg.chosen[name]}")
    return "\n".join(lines)


def write_comparison_csv(logs: list[LogSummary], threshold: float, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "seed", "log", "final_loss", "rounds_to_threshold", "threshold", "mean_f1",
                    *[k.value for k in StrategyKind]])
        for lg in logs:
            w.writerow([lg.mode, lg.seed, str(lg.path), repr(lg.final_loss), lg.rounds_to(threshold),
                        repr(threshold), repr(float(np.mean(list(lg.client_f1.values())))),
                        *[lg.chosen[k.value] for k in StrategyKind]])


# --- cohort-inspect ------------------------------------------------------------


def inspect_cohorts(cfg: ExperimentConfig, run: RunSpec, seed: int) -> dict:
    """Run only the bootstrap round and report the cohorting internals."""
    clients, planted = build_clients(cfg.data, seed)
    fed = cfg.federation_config(run, seed)
    fed.rounds = 1
    assignment, _, updates, _ = run_round_one(clients, initial_params(clients, fed), fed)
    report = {
        "mode": run.label,
        "seed": seed,
        "cohorting": run.cohorting,
        "sizes": [len(m) for m in assignment.cohorts()],
        "labels": {str(c): j for c, j in sorted(assignment.labels.items())},
    }
    if run.cohorting == "licfl":
        _, tr = cohort({u.client_id: u.params for u in updates}, fed.cohort, trace=True)
        report.update(sigma=tr.sigma, k=tr.k, spectrum=[float(v) for v in tr.laplacian_spectrum[: 2 * tr.k + 2]])
    if planted is not None:
        report["ari"] = adjusted_rand_index(assignment.label_array(), planted)
    return report


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="licfl", description="Cohorted federated learning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (mode, seed) pair of an experiment config")
    run.add_argument("--config", required=True, help="experiment JSON")
    run.add_argument("--out", help=f"output root (default: config 'output', ${OUTPUT_ENV}, or ./{DEFAULT_OUTPUT})")
    run.add_argument("--seed-override", type=int, help="replace the config's seed list with this seed")
    run.add_argument("--dry-run", action="store_true", help="validate the config and stop")

    cmp_ = sub.add_parser("compare", help="tabulate finished runs")
    cmp_.add_argument("logs", nargs="+", help="rounds.jsonl files")
    cmp_.add_argument("--threshold", type=float, help="loss threshold for rounds-to-threshold")
    cmp_.add_argument("--csv", help="also write the table as CSV")

    ins = sub.add_parser("cohort-inspect", help="run the bootstrap round and show the cohorts")
    ins.add_argument("--config", required=True)
    ins.add_argument("--run", help="run label to inspect (default: first run)")
    ins.add_argument("--seed-override", type=int)
    ins.add_argument("--out", help="write the report JSON here instead of stdout")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "compare":
            logs, thr = compare_logs(args.logs, args.threshold)
            print(format_comparison(logs, thr))
            if args.csv:
                write_comparison_csv(logs, thr, args.csv)
            return 0

        cfg = load_config(args.config)
        if args.seed_override is not None:
            cfg.seeds = [args.seed_override]

        if args.command == "cohort-inspect":
            run = cfg.runs[0] if args.run is None else next((r for r in cfg.runs if r.label == args.run), None)
            if run is None:
                raise ConfigError(f"--run: no run labelled {args.run!r}")
            report = inspect_cohorts(cfg, run, cfg.seeds[0])
            text = json.dumps(report, indent=2, sort_keys=True)
            if args.out:
                Path(args.out).write_text(text + "\n")
            else:
                print(text)
            return 0

        out = resolve_output(args.out, cfg)
        if args.dry_run:
            pairs = len(cfg.runs) * len(cfg.seeds)
            print(f"config ok: {len(cfg.runs)} runs x {len(cfg.seeds)} seeds = {pairs} federations -> {out}")
            return 0
        summaries = run_experiment(cfg, out)
        for s in summaries:
            print(f"{s['mode']:<18} seed {s['seed']:>3}  final mse {s['final_mse']:.6f}  f1 {s['final_f1']:.4f}")
        return 0
    except (ConfigError, LogParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report with context, non-zero exit
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
