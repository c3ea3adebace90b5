"""The global iterative pruning loop, its schedule, and the removal trace.

Each iteration recomputes importance on the current masked model, ranks all
kept structures globally, and removes the worst until the linear cumulative
quota for that iteration is met (overshoot at most one structure). No
fine-tuning happens between iterations. The per-iteration removal lists form
a trace: removal sets are pairwise disjoint, so the kept sets are nested
across iterations and any intermediate sparsity level can be reconstructed
from the dense checkpoint by replaying a prefix of the trace.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import importance as I
from . import model as M

__all__ = [
    "TOOL_VERSION",
    "ScheduleSpec",
    "TraceRecord",
    "PruneTrace",
    "RunResult",
    "QuotaInfeasible",
    "default_protected_layers",
    "quota",
    "gisp_run",
    "one_shot",
    "reconstruct",
    "nested_check",
    "sparsity_profile",
    "save_trace",
    "load_trace",
]

TOOL_VERSION = "gisplab-0.1.0"

PARAMETER_FRACTION = "param"
STRUCTURE_FRACTION = "structure"


class QuotaInfeasible(RuntimeError):
    """Floor/protection constraints block the requested removal budget."""


def default_protected_layers(config: M.ModelConfig) -> frozenset[int]:
    """First 10% of layers (rounded up) plus the last layer."""
    head = math.ceil(0.1 * config.n_layers)
    return frozenset(range(head)) | {config.n_layers - 1}


@dataclass(frozen=True)
class ScheduleSpec:
    """Linear removal schedule toward target_ratio over n_iterations."""

    target_ratio: float
    n_iterations: int = 1
    budget_mode: str = PARAMETER_FRACTION

    def __post_init__(self):
        if not (0.0 <= self.target_ratio < 1.0):
            raise ValueError("target_ratio must be in [0, 1)")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if self.budget_mode not in (PARAMETER_FRACTION, STRUCTURE_FRACTION):
            raise ValueError(f"unknown budget_mode {self.budget_mode!r}")

    def to_dict(self) -> dict:
        return {"target_ratio": self.target_ratio,
                "n_iterations": self.n_iterations,
                "budget_mode": self.budget_mode}

    @staticmethod
    def from_dict(d: dict) -> "ScheduleSpec":
        return ScheduleSpec(d["target_ratio"], d["n_iterations"],
                            d["budget_mode"])


def prunable_budget(config: M.ModelConfig,
                    protected: frozenset[int]) -> tuple[int, int]:
    """(parameter budget, structure budget) over non-protected layers."""
    params = structs = 0
    for sid in M.enumerate_structures(config):
        if sid.layer in protected:
            continue
        params += M.structure_param_count(config, sid)
        structs += 1
    return params, structs


def quota(schedule: ScheduleSpec, k: int, total_budget: int) -> float:
    """Cumulative removal budget after iteration k: (k/n) * rho * B."""
    if not (1 <= k <= schedule.n_iterations):
        raise ValueError(f"iteration {k} outside 1..{schedule.n_iterations}")
    return (k / schedule.n_iterations) * schedule.target_ratio * total_budget


@dataclass
class TraceRecord:
    iteration: int
    removed: list[M.StructureId]
    cum_fraction: float
    metrics: dict | None = None

    def to_dict(self) -> dict:
        d = {"k": self.iteration,
             "removed": [s.to_dict() for s in self.removed],
             "cum_fraction": self.cum_fraction}
        if self.metrics is not None:
            d["metrics"] = self.metrics
        return d

    @staticmethod
    def from_dict(d: dict) -> "TraceRecord":
        return TraceRecord(
            iteration=int(d["k"]),
            removed=[M.StructureId.from_dict(s) for s in d["removed"]],
            cum_fraction=float(d["cum_fraction"]),
            metrics=d.get("metrics"))


@dataclass
class PruneTrace:
    """Header plus one record per iteration; JSON-lines on disk."""

    fingerprint: str
    schedule: ScheduleSpec
    objective: str
    protected: list[int]
    seed: int
    tool_version: str = TOOL_VERSION
    records: list[TraceRecord] = field(default_factory=list)

    def header_dict(self) -> dict:
        return {"fingerprint": self.fingerprint,
                "schedule": self.schedule.to_dict(),
                "objective": self.objective,
                "protected": sorted(self.protected),
                "seed": self.seed,
                "tool_version": self.tool_version}

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header_dict(), sort_keys=True,
                            separators=(",", ":"))]
        lines += [json.dumps(r.to_dict(), sort_keys=True,
                             separators=(",", ":")) for r in self.records]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "PruneTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty trace file")
        head = json.loads(lines[0])
        trace = PruneTrace(
            fingerprint=head["fingerprint"],
            schedule=ScheduleSpec.from_dict(head["schedule"]),
            objective=head["objective"],
            protected=list(head["protected"]),
            seed=int(head["seed"]),
            tool_version=head.get("tool_version", ""))
        trace.records = [TraceRecord.from_dict(json.loads(ln))
                         for ln in lines[1:]]
        return trace


def save_trace(path, trace: PruneTrace) -> None:
    with open(str(path), "w", encoding="utf-8") as f:
        f.write(trace.to_jsonl())


def load_trace(path) -> PruneTrace:
    with open(str(path), "r", encoding="utf-8") as f:
        return PruneTrace.from_jsonl(f.read())


@dataclass
class RunResult:
    masks: M.MaskState
    trace: PruneTrace
    reports: list[I.ImportanceReport]
    compact_weights: M.TransformerWeights
    compact_config: M.ModelConfig
    timings: dict = field(default_factory=dict)  # seconds per phase


def _removal_size(schedule: ScheduleSpec, config: M.ModelConfig,
                  sid: M.StructureId) -> int:
    if schedule.budget_mode == STRUCTURE_FRACTION:
        return 1
    return M.structure_param_count(config, sid)


def gisp_run(weights: M.TransformerWeights, objective: I.Objective,
             schedule: ScheduleSpec,
             protected: "frozenset[int] | None" = None,
             seed: int = 0,
             initial_masks: "M.MaskState | None" = None,
             collect_reports: bool = False,
             resampler: "Callable[[int], I.Objective] | None" = None,
             on_iteration: "Callable[[int, M.MaskState, TraceRecord], None] | None" = None,
             eval_hook: "Callable[[int, M.MaskState], dict] | None" = None,
             grad_chunk: int = 32) -> RunResult:
    """Iterative global pruning to the scheduled target; returns the full run.

    Deterministic in all arguments. ``resampler`` (optional) replaces the
    objective at the start of iteration k for per-iteration calibration
    resampling; the default keeps the fixed set. ``on_iteration`` fires after
    each iteration (milestone checkpointing); ``eval_hook`` computes optional
    per-iteration metrics stored in the trace.
    """
    config = weights.config
    if config.layer_widths is not None:
        raise ValueError("pruning runs on dense-shape weights")
    if protected is None:
        protected = default_protected_layers(config)
    protected = frozenset(protected)
    if any(not (0 <= p < config.n_layers) for p in protected):
        raise ValueError("protected layer index out of range")

    masks = initial_masks.copy() if initial_masks is not None \
        else M.MaskState.dense(config)
    param_budget, struct_budget = prunable_budget(config, protected)
    budget = (param_budget if schedule.budget_mode == PARAMETER_FRACTION
              else struct_budget)
    if budget == 0:
        raise QuotaInfeasible("no prunable structures outside protected layers")

    trace = PruneTrace(
        fingerprint=M.checkpoint_fingerprint(M.checkpoint_bytes(weights)),
        schedule=schedule, objective=objective.kind,
        protected=sorted(protected), seed=seed)
    reports: list[I.ImportanceReport] = []
    removed_total = 0
    timings = {"importance": 0.0, "selection": 0.0, "metrics": 0.0}

    n_iters = 0 if schedule.target_ratio == 0.0 else schedule.n_iterations
    for k in range(1, n_iters + 1):
        target = quota(schedule, k, budget)
        obj = resampler(k) if resampler is not None else objective
        t0 = time.perf_counter()
        report = I.compute_report(weights, masks, obj, iteration=k,
                                  chunk=grad_chunk)
        timings["importance"] += time.perf_counter() - t0
        if collect_reports:
            reports.append(report)
        t0 = time.perf_counter()
        order = I.rank_prunable(report.normalized, masks, protected)

        removed_k: list[M.StructureId] = []
        idx = 0
        while removed_total < target:
            # floor states change as we remove, so re-test each candidate
            while idx < len(order) and masks.would_violate_floor(order[idx]):
                idx += 1
            if idx == len(order):
                raise QuotaInfeasible(
                    f"iteration {k}: quota {target:.1f} unreachable; "
                    f"removed {removed_total} of budget {budget} before the "
                    f"floor/protection constraints bound")
            sid = order[idx]
            masks.remove(sid)
            removed_k.append(sid)
            removed_total += _removal_size(schedule, config, sid)
            idx += 1
        timings["selection"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        record = TraceRecord(
            iteration=k, removed=removed_k,
            cum_fraction=removed_total / budget,
            metrics=eval_hook(k, masks) if eval_hook is not None else None)
        timings["metrics"] += time.perf_counter() - t0
        trace.records.append(record)
        if on_iteration is not None:
            on_iteration(k, masks, record)

    compact_weights, compact_config = M.compact(weights, masks)
    return RunResult(masks=masks, trace=trace, reports=reports,
                     compact_weights=compact_weights,
                     compact_config=compact_config, timings=timings)


def one_shot(weights: M.TransformerWeights, objective: I.Objective,
             target_ratio: float,
             protected: "frozenset[int] | None" = None, seed: int = 0,
             budget_mode: str = PARAMETER_FRACTION,
             grad_chunk: int = 32) -> RunResult:
    """Single-iteration global pruning; identical to gisp_run with n=1."""
    return gisp_run(weights, objective,
                    ScheduleSpec(target_ratio, 1, budget_mode),
                    protected=protected, seed=seed, grad_chunk=grad_chunk)


def replay_masks(trace: PruneTrace, config: M.ModelConfig,
                 through_iteration: int) -> M.MaskState:
    """MaskState after applying records 1..through_iteration."""
    masks = M.MaskState.dense(config)
    for record in trace.records:
        if record.iteration > through_iteration:
            break
        for sid in record.removed:
            masks.remove(sid)
    return masks


def resolve_target(trace: PruneTrace, target) -> int:
    """Map an iteration index or a cumulative-ratio float to an iteration.

    A float target picks the first iteration whose cumulative fraction
    reaches it; integers pass through (0 = dense).
    """
    if isinstance(target, bool):
        raise ValueError("target must be an iteration or ratio")
    if isinstance(target, (int, np.integer)):
        last = trace.records[-1].iteration if trace.records else 0
        if not (0 <= target <= last):
            raise ValueError(f"target iteration {target} beyond trace end {last}")
        return target
    ratio = float(target)
    if ratio == 0.0:
        return 0
    for record in trace.records:
        if record.cum_fraction >= ratio - 1e-12:
            return record.iteration
    reached = trace.records[-1].cum_fraction if trace.records else 0.0
    raise ValueError(f"trace reaches ratio {reached:.4f} < target {ratio}")


def reconstruct(trace: PruneTrace, dense_weights: M.TransformerWeights,
                target) -> tuple[M.MaskState, M.TransformerWeights, M.ModelConfig]:
    """Replay the trace prefix onto the dense checkpoint and compact.

    Bit-identical to a checkpoint compacted live at that iteration, because
    compaction is a pure function of (dense weights, masks).
    """
    fp = M.checkpoint_fingerprint(M.checkpoint_bytes(dense_weights))
    if fp != trace.fingerprint:
        raise ValueError(
            f"checkpoint fingerprint {fp} does not match trace "
            f"{trace.fingerprint}")
    k = resolve_target(trace, target)
    masks = replay_masks(trace, dense_weights.config, k)
    compact_weights, compact_config = M.compact(dense_weights, masks)
    return masks, compact_weights, compact_config


def nested_check(trace: PruneTrace) -> tuple[bool, "M.StructureId | None"]:
    """Removal sets pairwise disjoint (hence masks nested under inclusion).

    Returns (ok, first duplicate StructureId or None).
    """
    seen: set[M.StructureId] = set()
    for record in trace.records:
        for sid in record.removed:
            if sid in seen:
                return False, sid
            seen.add(sid)
    return True, None


def sparsity_profile(masks: M.MaskState,
                     config: M.ModelConfig) -> list[dict]:
    """Per-layer kept fractions for attention heads and MLP channels."""
    out = []
    for layer in range(config.n_layers):
        heads, channels = config.widths(layer)
        out.append({
            "layer": layer,
            "attn_kept_fraction": float(masks.kept_heads[layer].sum()) / heads,
            "mlp_kept_fraction": float(masks.kept_channels[layer].sum()) / channels,
        })
    return out
