"""Batch experiment runner.

Configuration is a YAML mapping with optional sections::

    preset: ich-like            # named base configuration (see presets.py)
    federation: {rounds: 40, sub_clusters: 4, sinkhorn: {epsilon: 0.05}}
    data: {input_dim: 32, class_mean_separation: 3.0}
    partition: {dirichlet_alpha_per_class: [0.5, 5, 50], missing_class_prob: 0.3}
    train_fraction: 0.8
    seeds: [0, 1, 2, 3, 4]
    sweep: {algorithms: [fedavg, fednpr], K: [1, 2, 4], lambda: [0.05, 0.1]}
    out: results/

Precedence: defaults < preset < file < command-line flags. Every
(algorithm, K, lambda) sweep point is run once per seed; the seed drives
data generation, partitioning, the train/test split, and training.

Outputs in ``out``: ``records.csv`` (one row per client, round and split)
and ``summary.txt`` (one line per sweep point, mean and population std over
seeds of the final-round client-averaged test metrics). The summary is
computed from the CSV text, so ``--verify`` can recompute it exactly.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import math
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .clustering import SinkhornConfig
from .data import (
    PartitionConfig, SyntheticDataConfig, dirichlet_partition, generate_synthetic, partition_by_counts,
    stratified_split,
)
from .errors import ConfigError, FedNPRError
from .federation import FederationConfig, run_federation
from .presets import PRESETS

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUN, EXIT_IO = 0, 1, 2, 3, 4
WORKERS_ENV = "FEDNPR_WORKERS"
DEFAULT_PRESET = "isic-like"

CSV_HEADER = ["round", "client", "split", "algorithm", "K", "lambda", "seed",
              "bacc", "bauc", "loss_sup", "loss_npr"]
TOP_KEYS = {"preset", "federation", "data", "partition", "train_fraction", "seeds", "sweep", "out"}
SWEEP_KEYS = {"algorithms", "K", "lambda"}


@dataclass
class ExperimentSpec:
    federation: FederationConfig = field(default_factory=FederationConfig)
    data: SyntheticDataConfig = field(default_factory=SyntheticDataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    count_matrix: list[list[int]] | None = None
    train_fraction: float = 0.8
    seeds: tuple[int, ...] = (0,)
    algorithms: tuple[str, ...] = ("fednpr",)
    ks: tuple[int, ...] = (4,)
    lambdas: tuple[float, ...] = (0.1,)
    out: Path = Path("results")

    def points(self) -> list[tuple[str, int, float]]:
        return [(a, k, lam) for a in self.algorithms for k in self.ks for lam in self.lambdas]


# --------------------------------------------------------------------------- parsing

def _build(cls, values: dict, path: str):
    """Instantiate a frozen config dataclass from a mapping, rejecting unknown keys."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in names:
            raise ConfigError("unknown key", key=f"{path}.{key}")
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key=path) from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _as_tuple(val, path: str, kind) -> tuple:
    items = val if isinstance(val, (list, tuple)) else [val]
    if not items:
        raise ConfigError("must not be empty", key=path)
    try:
        return tuple(kind(v) for v in items)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key=path) from exc


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", key="config") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}", key="config") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", key="config")
    return raw


def parse_config(raw: dict | None = None, overrides: dict | None = None) -> ExperimentSpec:
    """Resolve a config mapping plus flag overrides into a validated spec."""
    raw = dict(raw or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for key in raw:
        if key not in TOP_KEYS:
            raise ConfigError("unknown key", key=key)
    for section in ("federation", "data", "partition", "sweep"):
        if section in raw and not isinstance(raw[section], dict):
            raise ConfigError("must be a mapping", key=section)
    sweep = raw.get("sweep") or {}
    for key in sweep:
        if key not in SWEEP_KEYS:
            raise ConfigError("unknown key", key=f"sweep.{key}")

    preset_name = overrides.get("preset", raw.get("preset", DEFAULT_PRESET))
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}", key="preset")
    merged = _merge(PRESETS[preset_name], {k: raw.get(k) or {} for k in ("federation", "data", "partition")})

    fed = dict(merged["federation"])
    if "sinkhorn" in fed:
        if not isinstance(fed["sinkhorn"], dict):
            raise ConfigError("must be a mapping", key="federation.sinkhorn")
        fed["sinkhorn"] = _build(SinkhornConfig, fed["sinkhorn"], "federation.sinkhorn")
    if "rounds" in overrides:
        fed["rounds"] = overrides["rounds"]
    if "clients" in overrides:
        fed["n_clients"] = overrides["clients"]
    federation = _build(FederationConfig, fed, "federation")

    part = dict(merged["partition"])
    count_matrix = part.pop("count_matrix", None)
    if "clients" in overrides:
        if count_matrix is not None and overrides["clients"] != len(count_matrix):
            raise ConfigError("preset uses a fixed count matrix; client count cannot change", key="clients")
        part["n_clients"] = overrides["clients"]
    partition = _build(PartitionConfig, part, "partition")
    data = _build(SyntheticDataConfig, merged["data"], "data")

    algorithms = _as_tuple(overrides.get("algo", sweep.get("algorithms", federation.algorithm)), "sweep.algorithms", str)
    ks = _as_tuple(overrides.get("k", sweep.get("K", federation.sub_clusters)), "sweep.K", int)
    lambdas = _as_tuple(overrides.get("lambda", sweep.get("lambda", federation.npr_weight)), "sweep.lambda", float)
    seeds = _as_tuple(overrides.get("seeds", raw.get("seeds", [0])), "seeds", int)
    train_fraction = float(raw.get("train_fraction", 0.8))
    if not 0 < train_fraction < 1:
        raise ConfigError("must lie in (0, 1)", key="train_fraction")

    spec = ExperimentSpec(federation, data, partition, count_matrix, train_fraction, seeds,
                          algorithms, ks, lambdas, Path(overrides.get("out", raw.get("out", "results"))))
    if federation.n_clients != (len(count_matrix) if count_matrix is not None else partition.n_clients):
        raise ConfigError("federation.n_clients must equal the partition's client count", key="federation.n_clients")
    for algo, k, lam in spec.points():
        try:
            dataclasses.replace(federation, algorithm=algo, sub_clusters=k, npr_weight=lam).validate()
        except ConfigError as exc:
            raise ConfigError(str(exc), key="sweep") from exc
    return spec


# --------------------------------------------------------------------------- running

def build_clients(spec: ExperimentSpec, seed: int):
    dataset = generate_synthetic(dataclasses.replace(spec.data, seed=seed))
    if spec.count_matrix is not None:
        parts = partition_by_counts(dataset, np.asarray(spec.count_matrix), seed)
    else:
        parts = dirichlet_partition(dataset, dataclasses.replace(spec.partition, seed=seed))
    return [stratified_split(c, spec.train_fraction, seed) for c in parts]


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def run_point(spec: ExperimentSpec, point: tuple[str, int, float], seed: int) -> list[list[str]]:
    """One federation run; returns its CSV rows as strings."""
    algo, k, lam = point
    config = dataclasses.replace(spec.federation, algorithm=algo, sub_clusters=k, npr_weight=lam, seed=seed)
    server = run_federation(config, build_clients(spec, seed))
    return [
        [str(r.round), str(r.client), r.split, config.label, str(k), _fmt(lam), str(seed),
         _fmt(r.bacc), _fmt(r.bauc), _fmt(r.loss_sup), _fmt(r.loss_npr)]
        for r in server.history
    ]


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"not an integer: {raw!r}", key=WORKERS_ENV) from None
    if n < 1:
        raise ConfigError("must be >= 1", key=WORKERS_ENV)
    return n


class RunFailure(Exception):
    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = rows


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> list[list[str]]:
    """Run every (sweep point, seed) pair and return all CSV rows in a fixed order.

    Raises ``RunFailure`` carrying the rows of the runs that completed
    before the first failing one.
    """
    jobs = [(p, s) for p in spec.points() for s in spec.seeds]
    rows: list[list[str]] = []
    if workers <= 1:
        for p, s in jobs:
            try:
                rows.extend(run_point(spec, p, s))
            except FedNPRError as exc:
                raise RunFailure(f"algorithm={p[0]} K={p[1]} lambda={p[2]} seed={s}: {exc}", rows) from exc
        return rows
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_point, spec, p, s) for p, s in jobs]
        for (p, s), fut in zip(jobs, futures):
            try:
                rows.extend(fut.result())
            except FedNPRError as exc:
                for f in futures:
                    f.cancel()
                raise RunFailure(f"algorithm={p[0]} K={p[1]} lambda={p[2]} seed={s}: {exc}", rows) from exc
    return rows


# --------------------------------------------------------------------------- output

def records_csv(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    return buf.getvalue()


def _nanmean(values):
    finite = [v for v in values if not math.isnan(v)]
    return math.fsum(finite) / len(finite) if finite else float("nan")


def summarize(csv_text: str) -> str:
    """Summary lines computed from the CSV text alone.

    For each (algorithm, K, lambda, seed) the final round's test rows are
    averaged over clients (unweighted; NaN bAUCs skipped); mean and
    population std are then taken over seeds.
    """
    reader = csv.DictReader(io.StringIO(csv_text))
    final: dict[tuple, dict[str, int | list]] = {}
    for row in reader:
        if row["split"] != "test":
            continue
        key = (row["algorithm"], row["K"], row["lambda"], row["seed"])
        rnd = int(row["round"])
        entry = final.setdefault(key, {"round": rnd, "rows": []})
        if rnd > entry["round"]:
            entry["round"], entry["rows"] = rnd, []
        if rnd == entry["round"]:
            entry["rows"].append((float(row["bacc"]), float(row["bauc"])))

    points: dict[tuple, list[tuple[float, float]]] = {}
    for (algo, k, lam, _seed), entry in final.items():
        accs = [a for a, _ in entry["rows"]]
        aucs = [b for _, b in entry["rows"]]
        points.setdefault((algo, k, lam), []).append((math.fsum(accs) / len(accs), _nanmean(aucs)))

    lines = []
    for (algo, k, lam), per_seed in points.items():
        accs = [a for a, _ in per_seed]
        aucs = [b for _, b in per_seed if not math.isnan(b)]
        std = lambda v: statistics.pstdev(v) if v else float("nan")
        mean = lambda v: math.fsum(v) / len(v) if v else float("nan")
        lines.append(
            f"algorithm={algo} K={k} lambda={lam} seeds={len(per_seed)} "
            f"mean_bacc={_fmt(mean(accs))} std_bacc={_fmt(std(accs))} "
            f"mean_bauc={_fmt(mean(aucs))} std_bauc={_fmt(std(aucs))}"
        )
    return "".join(line + "\n" for line in lines)


def emit_results(rows: list[list[str]], out: Path) -> tuple[Path, Path]:
    text = records_csv(rows)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rec, summ = out / "records.csv", out / "summary.txt"
    rec.write_text(text)
    summ.write_text(summarize(text))
    return rec, summ


def verify(out: Path) -> bool:
    out = Path(out)
    expected = summarize((out / "records.csv").read_text())
    return expected == (out / "summary.txt").read_text()


def parse_summary(text: str) -> dict[tuple[str, int, float], dict[str, float]]:
    """Read summary.txt back into {(algorithm, K, lambda): {field: value}}."""
    out = {}
    for line in text.splitlines():
        fields = dict(tok.split("=", 1) for tok in line.split())
        key = (fields.pop("algorithm"), int(fields.pop("K")), float(fields.pop("lambda")))
        out[key] = {k: float(v) for k, v in fields.items()}
    return out


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fednpr", description="Run federated prototype-regularisation experiments.")
    p.add_argument("--config", help="YAML experiment file (empty file = defaults)")
    p.add_argument("--algo", nargs="+", help="algorithm(s) to sweep")
    p.add_argument("--clients", type=int, help="number of clients")
    p.add_argument("--rounds", type=int, help="federated rounds")
    p.add_argument("--k", nargs="+", type=int, help="sub-clusters per class (sweep)")
    p.add_argument("--lambda", dest="lambda_", nargs="+", type=float, help="NPR weight (sweep)")
    p.add_argument("--seeds", nargs="+", type=int, help="run seeds")
    p.add_argument("--preset", help=f"one of {sorted(PRESETS)}")
    p.add_argument("--out", help="output directory")
    p.add_argument("--verify", metavar="DIR", help="recompute summary.txt from records.csv in DIR and compare")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verify:
        try:
            ok = verify(args.verify)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print("summary verified" if ok else "summary does NOT match records.csv")
        return EXIT_OK if ok else EXIT_VERIFY

    try:
        raw = load_config_file(args.config) if args.config else {}
        spec = parse_config(raw, {
            "algo": args.algo, "clients": args.clients, "rounds": args.rounds, "k": args.k,
            "lambda": args.lambda_, "seeds": args.seeds, "preset": args.preset, "out": args.out,
        })
        workers = _worker_count()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    code = EXIT_OK
    try:
        rows = run_experiment(spec, workers)
    except RunFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        rows, code = exc.rows, EXIT_RUN
    try:
        rec, summ = emit_results(rows, spec.out)
    except OSError as exc:
        print(f"error writing results: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {rec} and {summ}")
    if code == EXIT_OK:
        sys.stdout.write(summ.read_text())
    return code


if __name__ == "__main__":
    sys.exit(main())
