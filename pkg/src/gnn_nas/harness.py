"""Experiment grids, trace files, summary tables and curve data."""

from __future__ import annotations

import csv
import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import space as S
from .evaluator import DEFAULT_BUDGET_BYTES, MemoryBudget, TrainConfig
from .graph import Graph, generate_synthetic, load_graph, split_last_n
from .strategies import STRATEGIES, run_strategy

log = logging.getLogger(__name__)

TRACE_RE = re.compile(r"^(?P<dataset>.+)__(?P<space>macro|micro)__(?P<strategy>rs|ea|rl)"
                      r"__seed(?P<seed>-?\d+)\.jsonl$")
HISTOGRAM_BINS = 20
INITIAL_POPULATION = 100


class DatasetError(Exception):
    """The dataset could not be loaded or generated."""


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

SYNTHETIC_DEFAULTS = {"nodes": 600, "classes": 3, "features": 8, "intra": 0.05,
                      "inter": 0.005, "signal": 0.8, "seed": 0}
_SYNTHETIC_INTS = {"nodes", "classes", "features", "seed", "holdout"}


def parse_synthetic(text: str) -> dict:
    """Parse ``key=value,...`` into generator keyword values over the defaults."""
    out = dict(SYNTHETIC_DEFAULTS)
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ValueError(f"synthetic option {part!r} is not key=value")
        key, value = (s.strip() for s in part.split("=", 1))
        if key not in SYNTHETIC_DEFAULTS and key != "holdout":
            raise ValueError(f"unknown synthetic option {key!r}")
        out[key] = int(value) if key in _SYNTHETIC_INTS else float(value)
    return out


def synthetic_graph(opts: dict) -> Graph:
    return generate_synthetic(opts["nodes"], opts["classes"], opts["features"], opts["intra"],
                              opts["inter"], opts["signal"], opts["seed"],
                              holdout=opts.get("holdout"))


@dataclass(frozen=True)
class ExperimentSpec:
    """What to run.  Exactly one of ``dataset_path`` and ``synthetic`` is set."""

    space: str
    strategies: tuple[str, ...]
    seeds: tuple[int, ...]
    iterations: int
    out_dir: str
    dataset_path: str | None = None
    synthetic: dict | None = None
    split_last: int | None = None
    budget_bytes: int = DEFAULT_BUDGET_BYTES
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset_name: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        S.get_space(self.space)
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ValueError(f"unknown strategies {bad}; choose from {STRATEGIES}")
        if (self.dataset_path is None) == (self.synthetic is None):
            raise ValueError("give exactly one of a dataset path or a synthetic spec")
        MemoryBudget(self.budget_bytes)

    @property
    def name(self) -> str:
        if self.dataset_name:
            return self.dataset_name
        if self.dataset_path:
            return Path(self.dataset_path).stem
        return "synthetic"

    def load(self) -> Graph:
        try:
            if self.synthetic is not None:
                g = synthetic_graph(self.synthetic)
            else:
                g = load_graph(self.dataset_path)
            if self.split_last:
                g = split_last_n(g, self.split_last)
        except (OSError, ValueError) as exc:
            raise DatasetError(str(exc)) from exc
        if not g.train_mask.any() or not g.valid_mask.any():
            raise DatasetError("dataset needs nonempty train and valid masks")
        return g


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

@dataclass
class Trace:
    dataset: str
    space: str
    strategy: str
    seed: int
    records: list[dict]

    @property
    def val_accs(self) -> np.ndarray:
        return np.array([r["val_acc"] for r in self.records], dtype=float)

    @property
    def filename(self) -> str:
        return trace_filename(self.dataset, self.space, self.strategy, self.seed)

    def best(self) -> dict:
        """Record with the highest val_acc; the earliest wins ties."""
        return max(self.records, key=lambda r: (r["val_acc"], -r["iter"]))


def trace_filename(dataset: str, space: str, strategy: str, seed: int) -> str:
    return f"{dataset}__{space}__{strategy}__seed{seed}.jsonl"


def read_trace(path: str | Path) -> Trace:
    path = Path(path)
    m = TRACE_RE.match(path.name)
    if not m:
        raise ValueError(f"{path.name} is not a trace file name")
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    iters = [r["iter"] for r in records]
    if iters != list(range(1, len(records) + 1)):
        raise ValueError(f"{path.name}: iteration indices are not 1..{len(records)}")
    return Trace(m["dataset"], m["space"], m["strategy"], int(m["seed"]), records)


def read_traces(directory: str | Path) -> list[Trace]:
    paths = sorted(p for p in Path(directory).glob("*.jsonl") if TRACE_RE.match(p.name))
    return [read_trace(p) for p in paths]


def group_traces(traces: Sequence[Trace]) -> dict[tuple[str, str, str], list[Trace]]:
    groups: dict[tuple[str, str, str], list[Trace]] = {}
    for t in traces:
        groups.setdefault((t.dataset, t.space, t.strategy), []).append(t)
    for v in groups.values():
        v.sort(key=lambda t: t.seed)
    return groups


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (zero for a single value)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("no values")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class SummaryRow:
    dataset: str
    space: str
    strategy: str
    seeds: int
    val_mean: float
    val_std: float
    test_mean: float
    test_std: float
    time_mean: float
    time_std: float
    oom_mean: float
    oom_std: float
    oom_max: float

    def __post_init__(self):
        if min(self.val_std, self.test_std, self.time_std, self.oom_std) < 0:
            raise ValueError("standard deviations are nonnegative")
        if not all(0.0 <= x <= 100.0 for x in (self.oom_mean, self.oom_max)):
            raise ValueError("oom percentages lie in [0, 100]")


def oom_percentages(traces: Sequence[Trace]) -> list[float]:
    return [100.0 * sum(bool(r["oom"]) for r in t.records) / len(t.records) for t in traces]


def oom_table(traces: Sequence[Trace]) -> dict[str, float]:
    """Per-seed out-of-budget percentage: mean, sample std and max."""
    pct = oom_percentages(traces)
    mean, std = mean_std(pct)
    return {"oom_mean": mean, "oom_std": std, "oom_max": float(max(pct))}


def summarize(traces: Sequence[Trace]) -> list[SummaryRow]:
    rows = []
    for (dataset, space, strategy), group in sorted(group_traces(traces).items()):
        bests = [t.best() for t in group]
        val = mean_std([b["val_acc"] for b in bests])
        test = mean_std([b["test_acc"] for b in bests])
        secs = mean_std([sum(r["seconds"] for r in t.records) for t in group])
        rows.append(SummaryRow(dataset, space, strategy, len(group), *val, *test, *secs,
                               **oom_table(group)))
    return rows


def write_summary(rows: Sequence[SummaryRow], path: str | Path) -> None:
    names = [f.name for f in fields(SummaryRow)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for row in rows:
            w.writerow(asdict(row))


def format_summary(rows: Sequence[SummaryRow]) -> str:
    lines = [f"{'dataset':<12} {'space':<6} {'strat':<5} {'val':>15} {'test':>15} "
             f"{'time(s)':>17} {'oom% avg':>15} {'max':>6}"]
    for r in rows:
        lines.append(f"{r.dataset:<12} {r.space:<6} {r.strategy:<5} "
                     f"{r.val_mean:>7.4f}±{r.val_std:<7.4f} {r.test_mean:>7.4f}±{r.test_std:<7.4f} "
                     f"{r.time_mean:>8.1f}±{r.time_std:<8.1f} "
                     f"{r.oom_mean:>6.2f}±{r.oom_std:<8.2f} {r.oom_max:>6.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

def _stack(traces: Sequence[Trace]) -> np.ndarray:
    if not traces:
        raise ValueError("need at least one trace")
    lengths = {len(t.records) for t in traces}
    if len(lengths) != 1:
        raise ValueError(f"traces differ in length: {sorted(lengths)}")
    return np.stack([t.val_accs for t in traces])


def cumulative_threshold_curve(traces: Sequence[Trace], threshold: float = 0.7) -> np.ndarray:
    """Running count of records with val_acc strictly above ``threshold``, averaged over seeds."""
    return np.cumsum(_stack(traces) > threshold, axis=1).mean(axis=0)


def best_so_far_curve(traces: Sequence[Trace]) -> tuple[np.ndarray, np.ndarray]:
    """Per-iteration mean and sample std of the running max of val_acc."""
    run = np.maximum.accumulate(_stack(traces), axis=1)
    mean = run.mean(axis=0)
    std = run.std(axis=0, ddof=1) if run.shape[0] > 1 else np.zeros_like(mean)
    return mean, std


def initial_population_histogram(ea_traces: Sequence[Trace], population: int = INITIAL_POPULATION,
                                 bins: int = HISTOGRAM_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Counts of the first ``population`` val_acc values in equal bins over [0, 1].

    Counts are summed over the given traces.  Returns ``(counts, edges)``.
    """
    if not ea_traces:
        raise ValueError("need at least one trace")
    for t in ea_traces:
        if t.strategy != "ea":
            raise ValueError(f"initial population histogram needs EA traces, got {t.strategy!r}")
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.zeros(bins, dtype=int)
    for t in ea_traces:
        counts += np.histogram(t.val_accs[:population], bins=edges)[0]
    return counts, edges


def write_curves(traces: Sequence[Trace], out_dir: str | Path, threshold: float = 0.7) -> list[Path]:
    out_dir = Path(out_dir)
    groups = sorted(group_traces(traces).items())
    written = []

    path = out_dir / "curve_threshold.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "space", "strategy", "iteration", "threshold", "count"])
        for (d, s, k), group in groups:
            for i, v in enumerate(cumulative_threshold_curve(group, threshold), 1):
                w.writerow([d, s, k, i, threshold, f"{v:g}"])
    written.append(path)

    path = out_dir / "curve_best_so_far.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "space", "strategy", "iteration", "mean", "std"])
        for (d, s, k), group in groups:
            mean, std = best_so_far_curve(group)
            for i, (m, sd) in enumerate(zip(mean, std), 1):
                w.writerow([d, s, k, i, f"{m:.6g}", f"{sd:.6g}"])
    written.append(path)

    ea = [(key, g) for key, g in groups if key[2] == "ea"]
    if ea:
        path = out_dir / "ea_initial_population.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "space", "bin_low", "bin_high", "count"])
            for (d, s, _), group in ea:
                counts, edges = initial_population_histogram(group)
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([d, s, f"{lo:g}", f"{hi:g}", int(c)])
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

def _run_one(spec: ExperimentSpec, graph: Graph, strategy: str, seed: int) -> Path:
    path = Path(spec.out_dir) / trace_filename(spec.name, spec.space, strategy, seed)
    run_strategy(strategy, spec.space, graph, spec.iterations, seed, eval_config=spec.train,
                 budget=MemoryBudget(spec.budget_bytes), trace_path=path)
    return path


def _failed_trace(path: Path, why: str) -> None:
    log.error("run %s failed: %s", path.name, why)
    path.with_suffix(".failed").write_text(why + "\n")


def run_grid(spec: ExperimentSpec, workers: int = 1) -> tuple[list[SummaryRow], list[Trace]]:
    """Run every (strategy, seed) pair and aggregate the traces written.

    A failing run is logged and left out of the summary rather than aborting
    the grid.
    """
    graph = spec.load()
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {k: v for k, v in asdict(spec).items() if k != "train"}
    manifest["train"] = asdict(spec.train)
    (out / "experiment.json").write_text(json.dumps(manifest, indent=2, default=list) + "\n")

    jobs = [(k, s) for k in spec.strategies for s in spec.seeds]
    paths = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {job: pool.submit(_run_one, spec, graph, *job) for job in jobs}
            for (k, s), fut in futures.items():
                try:
                    paths.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                    _failed_trace(out / trace_filename(spec.name, spec.space, k, s), repr(exc))
    else:
        for k, s in jobs:
            try:
                paths.append(_run_one(spec, graph, k, s))
            except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                _failed_trace(out / trace_filename(spec.name, spec.space, k, s), repr(exc))
    traces = [read_trace(p) for p in paths]
    rows = summarize(traces)
    write_summary(rows, out / "summary.csv")
    return rows, traces

