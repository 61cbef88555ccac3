"""Measurement: clean accuracy, corruption-error aggregation (mCE),
operation-count bookkeeping for the two training regimes, and run
report rendering.
"""

from __future__ import annotations

import csv
import io
import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, LabelError, NumericError, ShapeMismatchError
from .network import NetworkSpec, activation_sizes, forward, param_count
from .data import Dataset, batches
from .rng import RngStream


class CostCounter:
    """Thread-safe operation tallies.

    madds counts multiply-accumulate pairs in dense/conv contractions;
    bias adds, activation-function queries, and pooling-window element
    visits are tracked separately so the contraction count can be
    compared against closed forms exactly.  The de_* buckets count
    parameter-slot touches in the evolutionary update.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.madds = 0
        self.bias_adds = 0
        self.activations = 0
        self.pool_ops = 0
        self.de_mutation = 0
        self.de_crossover = 0
        self.de_selections = 0

    def _add(self, name, n):
        with self._lock:
            setattr(self, name, getattr(self, name) + int(n))

    def add_madds(self, n):
        self._add("madds", n)

    def add_bias_adds(self, n):
        self._add("bias_adds", n)

    def add_activations(self, n):
        self._add("activations", n)

    def add_pool_ops(self, n):
        self._add("pool_ops", n)

    def add_de_mutation(self, n):
        self._add("de_mutation", n)

    def add_de_crossover(self, n):
        self._add("de_crossover", n)

    def add_de_selection(self, n):
        self._add("de_selections", n)

    def snapshot(self) -> dict:
        with self._lock:
            return {"madds": self.madds, "bias_adds": self.bias_adds,
                    "activations": self.activations, "pool_ops": self.pool_ops,
                    "de_mutation": self.de_mutation,
                    "de_crossover": self.de_crossover,
                    "de_selections": self.de_selections}


@dataclass(frozen=True)
class EvalReport:
    dataset: str
    n_samples: int
    correct: int
    accuracy: float
    error: float
    mean_ce: float


def evaluate(spec: NetworkSpec, params: np.ndarray, data: Dataset,
             batch_size: int = 256, counter=None) -> EvalReport:
    """Argmax classification accuracy plus mean cross-entropy.

    Ties in the logits resolve to the lowest class index.  Per-sample
    terms are accumulated in float64, so the report does not depend on
    batch_size.
    """
    correct = 0
    ce_parts = []
    n = len(data)
    n_classes = spec.n_classes
    bad = np.nonzero((data.labels < 0) | (data.labels >= n_classes))[0]
    if bad.size:
        i = int(bad[0])
        raise LabelError(
            f"label {int(data.labels[i])} at index {i} outside "
            f"[0, {n_classes})")
    for xb, yb in batches(data, batch_size):
        logits = forward(spec, params, xb, counter)
        preds = logits.argmax(axis=1)
        correct += int(np.sum(preds == yb))
        z = logits.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        ce_parts.append(-logp[np.arange(len(yb)), yb])
    # one flat sum so the value cannot depend on how batches were cut
    ce_sum = float(np.sum(np.concatenate(ce_parts)))
    accuracy = correct / n
    return EvalReport(data.name, n, correct, accuracy, 1.0 - accuracy,
                      ce_sum / n)


def mce(errors: dict, baseline: dict):
    """Per-corruption relative error and its arithmetic mean.

    mCE_c = error_c / baseline_c, reported in percent; the unit of the
    inputs cancels as long as both maps use the same one.
    Returns (per-corruption map, average).
    """
    if set(errors) != set(baseline):
        missing = sorted(set(baseline) - set(errors))
        extra = sorted(set(errors) - set(baseline))
        raise ShapeMismatchError(
            f"corruption keys disagree: missing {missing}, extra {extra}")
    if not errors:
        raise ShapeMismatchError("mce needs at least one corruption row")
    out = {}
    for key in errors:
        if baseline[key] <= 0:
            raise NumericError(
                f"baseline error for {key!r} is {baseline[key]}; mCE undefined")
        out[key] = 100.0 * errors[key] / baseline[key]
    return out, sum(out.values()) / len(out)


@dataclass(frozen=True)
class CostReport:
    """Measured operation counts for one sample / one update, plus the
    budget-scaled totals bp_madds = n_g * forward_madds and
    de_update_ops = n_e * d."""

    d: int
    layer_sizes: list
    forward_madds: int
    bias_adds: int
    activations: int
    pool_ops: int
    de_mutation_touches: int
    de_crossover_touches: int
    de_selections: int
    n_g: int
    n_e: int

    @property
    def bp_madds(self) -> int:
        return self.n_g * self.forward_madds

    @property
    def de_update_ops(self) -> int:
        return self.n_e * self.d

    @property
    def madds_per_neuron(self) -> float:
        return self.forward_madds / sum(self.layer_sizes)

    def as_dict(self) -> dict:
        return {"d": self.d, "layer_sizes": self.layer_sizes,
                "forward_madds": self.forward_madds,
                "bias_adds": self.bias_adds,
                "activations": self.activations,
                "pool_ops": self.pool_ops,
                "de_mutation_touches": self.de_mutation_touches,
                "de_crossover_touches": self.de_crossover_touches,
                "de_selections": self.de_selections,
                "n_g": self.n_g, "n_e": self.n_e,
                "bp_madds": self.bp_madds,
                "de_update_ops": self.de_update_ops,
                "madds_per_neuron": self.madds_per_neuron}


def count_costs(spec: NetworkSpec, n_g: int = 1, n_e: int = 1) -> CostReport:
    """Instrumented single-sample forward pass and single-member
    evolutionary update; the counters come from running the real ops,
    not from formulas, so they can be audited against closed forms."""
    from .evolution import Population, crossover, mutate

    d = param_count(spec)
    fwd = CostCounter()
    theta = np.zeros(d, dtype=np.float32)
    x = np.zeros((1,) + spec.input_shape, dtype=np.float32)
    forward(spec, theta, x, fwd)

    de = CostCounter()
    gen = RngStream(0).generator()
    members = [np.zeros(d, dtype=np.float32) for _ in range(4)]
    pop = Population(members, np.full(4, np.nan))
    mutant = mutate(pop, 0, 0.5, gen, de)
    crossover(members[0], mutant, 0.5, False, gen, de)
    de.add_de_selection(1)

    return CostReport(d, activation_sizes(spec), fwd.madds, fwd.bias_adds,
                      fwd.activations, fwd.pool_ops, de.de_mutation,
                      de.de_crossover, de.de_selections, n_g, n_e)


def published_tables() -> dict:
    """Fixture of published corruption-benchmark tables (percentages)."""
    path = Path(__file__).with_name("robustness_tables.json")
    return json.loads(path.read_text())


def _load_run_rows(run_dir: Path, problems: list) -> list:
    summary_path = run_dir / "summary.json"
    if not summary_path.is_file():
        problems.append(f"{run_dir}: missing summary.json")
        return []
    try:
        summary = json.loads(summary_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        problems.append(f"{run_dir}: unreadable summary.json ({exc})")
        return []
    rows = []
    for stage in summary.get("stages", []):
        rows.append({
            "run": run_dir.name,
            "model": summary.get("model", ""),
            "dataset": summary.get("dataset", ""),
            "stage": stage.get("stage", ""),
            "params": summary.get("params", ""),
            "accuracy": stage.get("test_accuracy"),
        })
    return rows


_REPORT_COLUMNS = ("run", "model", "dataset", "stage", "params", "accuracy")


def report(run_dirs, fmt: str = "csv"):
    """Merge run summaries into one table.

    Returns (document text, problem list).  Unreadable runs are
    reported in the problem list and skipped, never fatal.  CSV and
    JSON renderings carry identical row values.
    """
    problems: list = []
    rows: list = []
    for run_dir in run_dirs:
        rows.extend(_load_run_rows(Path(run_dir), problems))
    if fmt == "json":
        return json.dumps({"columns": list(_REPORT_COLUMNS), "rows": rows},
                          indent=2, sort_keys=True) + "\n", problems
    if fmt != "csv":
        raise ConfigError("/report/format", f"unknown format {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(_REPORT_COLUMNS)
    for row in rows:
        acc = row["accuracy"]
        writer.writerow([row["run"], row["model"], row["dataset"],
                         row["stage"], row["params"],
                         "" if acc is None else repr(acc)])
    return buf.getvalue(), problems
