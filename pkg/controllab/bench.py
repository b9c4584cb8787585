import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Set, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402

from .finetune import ConvergenceTrace, format_threshold_step  # noqa: E402
from .registry import ParamRegistry  # noqa: E402

logger = logging.getLogger(__name__)

BASE_LABEL = "base"
MIN_ITERS = 100
MIN_WARMUP = 10

# Published UNet-only parameter counts, in millions.
REFERENCE_PARAMS = [
    {"model": "SD1.5", "method": "ControlNet", "total": 1220, "learnable": 361},
    {"model": "SD1.5", "method": "ControlNeXt", "total": 865, "learnable": 30},
    {"model": "SD1.5", "method": "base", "total": 859, "learnable": None},
    {"model": "SDXL", "method": "ControlNet", "total": 3818, "learnable": 1251},
    {"model": "SDXL", "method": "ControlNeXt", "total": 2573, "learnable": 108},
    {"model": "SDXL", "method": "base", "total": 2567, "learnable": None},
    {"model": "SVD", "method": "ControlNet", "total": 2206, "learnable": 682},
    {"model": "SVD", "method": "ControlNeXt-S", "total": 1530, "learnable": 55},
    {"model": "SVD", "method": "ControlNeXt-F", "total": 1530, "learnable": 1530},
    {"model": "SVD", "method": "base", "total": 1524, "learnable": None},
]

# Published seconds per denoising step and mean overhead over the base model.
REFERENCE_LATENCY = [
    {"method": "ControlNet", "SD1.5": 0.31, "SDXL": 1.01, "SVD": 1.73, "overhead_percent": 41.9},
    {"method": "ControlNeXt", "SD1.5": 0.24, "SDXL": 0.82, "SVD": 1.29, "overhead_percent": 10.4},
    {"method": "base", "SD1.5": 0.22, "SDXL": 0.70, "SVD": 1.23, "overhead_percent": 0.0},
]


@dataclass(frozen=True)
class ParamRow:
    label: str
    total_params: int
    learnable_params: int
    learnable_fraction: float


@dataclass
class ParamReport:
    rows: List[ParamRow] = field(default_factory=list)

    def row(self, label: str) -> ParamRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(f"No row labelled '{label}'.")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=list(ParamRow.__annotations__))


@dataclass(frozen=True)
class LatencyRow:
    label: str
    median_step_seconds: float
    overhead_percent: float


@dataclass
class LatencyReport:
    rows: List[LatencyRow] = field(default_factory=list)
    iters: int = MIN_ITERS
    warmup: int = MIN_WARMUP

    def row(self, label: str) -> LatencyRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(f"No row labelled '{label}'.")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=list(LatencyRow.__annotations__))


def count_params(registries: Sequence[Tuple[str, ParamRegistry, Set[str]]]) -> ParamReport:
    report = ParamReport()
    for label, registry, trainable in registries:
        total = registry.total()
        learnable = registry.count(trainable)
        fraction = learnable / total if total else 0.0
        report.rows.append(ParamRow(label, total, learnable, fraction))
        logger.info(f"{label}: {learnable:,} of {total:,} parameters learnable ({fraction:.2%}).")
    return report


@contextmanager
def single_thread() -> Iterator[None]:
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def time_closure(fn: Callable[[], Any], iters: int, warmup: int) -> List[float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iters):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return times


def bench_latency(
    configs: Sequence[Tuple[str, Callable[[], Any]]],
    iters: int = MIN_ITERS,
    warmup: int = MIN_WARMUP,
) -> LatencyReport:
    """
    Median wall-clock seconds per call for each labelled closure, timed one
    after another on a single thread. Overhead is relative to the 'base' row
    of the same run.
    """
    if iters < MIN_ITERS or warmup < MIN_WARMUP:
        raise ValueError(
            f"Latency needs at least {MIN_ITERS} timed and {MIN_WARMUP} warm-up iterations, "
            f"got iters={iters}, warmup={warmup}."
        )
    labels = [label for label, _ in configs]
    if BASE_LABEL not in labels:
        raise ValueError(f"Latency configs must include a '{BASE_LABEL}' row, got {labels}.")

    medians: Dict[str, float] = {}
    with single_thread(), torch.no_grad():
        for label, fn in configs:
            medians[label] = float(np.median(time_closure(fn, iters, warmup)))
            logger.info(f"{label}: median {medians[label] * 1e3:.3f} ms per step over {iters} iterations.")

    base = medians[BASE_LABEL]
    report = LatencyReport(iters=iters, warmup=warmup)
    for label in labels:
        overhead = 0.0 if label == BASE_LABEL else 100.0 * (medians[label] - base) / base
        report.rows.append(LatencyRow(label, medians[label], overhead))
    return report


def write_sidecar(path: str, extra: Optional[Dict[str, Any]] = None) -> str:
    """Creation time and library versions for a report, kept out of the report body."""
    meta = {
        "report": os.path.basename(path),
        "created": datetime.now(timezone.utc).isoformat(),
        "versions": {
            "torch": torch.__version__,
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "matplotlib": matplotlib.__version__,
        },
    }
    meta.update(extra or {})
    sidecar = f"{path}.meta.json"
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return sidecar


def write_report(frame: pd.DataFrame, directory: str, name: str) -> List[str]:
    """Writes <name>.csv and its <name>.json mirror, each with a sidecar."""
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, f"{name}.csv")
    json_path = os.path.join(directory, f"{name}.json")
    frame.to_csv(csv_path, index=False, float_format="%.9g")
    frame.to_json(json_path, orient="records", indent=2, double_precision=10)
    for path in (csv_path, json_path):
        write_sidecar(path)
    logger.info(f"Wrote report '{name}' to {directory}")
    return [csv_path, json_path]


@dataclass
class ComparisonReport:
    curves: pd.DataFrame
    thresholds: Dict[str, Optional[int]]
    paths: List[str]


def compare_traces(
    traces: Sequence[Tuple[str, ConvergenceTrace]], directory: str, name: str = "convergence"
) -> ComparisonReport:
    """
    Tabulates and plots adherence against step for several runs, marking the
    step at which each run first reaches its threshold.
    """
    if not traces:
        raise ValueError("compare_traces needs at least one trace.")
    schedule = traces[0][1].steps
    for label, trace in traces[1:]:
        if trace.steps != schedule:
            raise ValueError(
                f"Trace '{label}' was evaluated at {trace.steps[:5]}..., "
                f"expected the schedule of '{traces[0][0]}' {schedule[:5]}..."
            )

    frames = []
    for label, trace in traces:
        frame = trace.to_frame()
        frame.insert(0, "label", label)
        frames.append(frame)
    curves = pd.concat(frames, ignore_index=True)
    thresholds = {label: trace.steps_to_threshold for label, trace in traces}
    summary = pd.DataFrame(
        [
            (label, format_threshold_step(thresholds[label]), trace.threshold)
            for label, trace in traces
        ],
        columns=["label", "steps_to_threshold", "threshold"],
    )

    paths = write_report(curves, directory, name)
    paths += write_report(summary, directory, f"{name}_thresholds")

    fig, ax = plt.subplots(figsize=(7, 5))
    for label, trace in traces:
        line, = ax.plot(trace.steps, [r.adherence for r in trace.records], marker="o", label=label)
        step = thresholds[label]
        if step is not None:
            ax.axvline(step, color=line.get_color(), linestyle="--", alpha=0.6)
            ax.annotate(
                f"{label}: {step}",
                xy=(step, trace.threshold),
                xytext=(4, 4),
                textcoords="offset points",
                color=line.get_color(),
            )
    ax.axhline(traces[0][1].threshold, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("Training step")
    ax.set_ylabel("Adherence (IoU)")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("Convergence")
    ax.grid(True, linestyle="--", alpha=0.4)
    ax.legend(frameon=False)
    fig.tight_layout()
    png_path = os.path.join(directory, f"{name}.png")
    fig.savefig(png_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    write_sidecar(png_path)
    paths.append(png_path)
    return ComparisonReport(curves=curves, thresholds=thresholds, paths=paths)
