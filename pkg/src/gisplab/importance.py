"""First-order, loss-based structure importance with block-wise normalization.

Element importance is |gradient * weight|; structure scores sum element
scores over the coupled slices (head: Q/K/V row block + O column block,
channel: gate row + up row + down column). Attention scores run an order of
magnitude above MLP scores, so the two kinds are normalized separately by
the mean over their model-wide pool of still-kept structures before the
global ranking.

Gradients come from one of two objectives: mean token cross-entropy on
calibration sequences, or the margin objective grad(L+) - grad(L-) over
positive/negative candidate batches, which preserves the decision boundary
of multi-option tasks. Gradients accumulate across calibration batches
before the product with W, and are always taken on the masked model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data_eval as D
from . import model as M

__all__ = [
    "Objective",
    "ImportanceReport",
    "DegeneratePoolError",
    "element_importance",
    "margin_gradients",
    "gradients_for_objective",
    "aggregate",
    "structure_taylor_sums",
    "normalize_pools",
    "rank_prunable",
    "compute_report",
]


class DegeneratePoolError(RuntimeError):
    """All-zero importance pool; the calibration carries no gradient signal."""


@dataclass
class Objective:
    """Which model-level loss defines importance, plus its calibration data."""

    kind: str  # data_eval.PERPLEXITY or data_eval.MARGIN
    calibration: D.CalibrationSet

    def __post_init__(self):
        if self.kind not in (D.PERPLEXITY, D.MARGIN):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.calibration.kind != self.kind:
            raise ValueError("calibration kind does not match objective")


@dataclass
class ImportanceReport:
    """Raw and pool-normalized scores for one pruning iteration."""

    iteration: int
    raw: dict[M.StructureId, float]
    normalized: dict[M.StructureId, float]
    attn_pool_mean: float
    mlp_pool_mean: float

    def to_json_line(self) -> str:
        def enc(d):
            return {f"{s.layer}:{s.kind}:{s.unit}": v for s, v in d.items()}
        return json.dumps({
            "iteration": self.iteration,
            "attn_pool_mean": self.attn_pool_mean,
            "mlp_pool_mean": self.mlp_pool_mean,
            "raw": enc(self.raw),
            "normalized": enc(self.normalized),
        }, sort_keys=True)


def _grad_accumulate(weights: M.TransformerWeights, masks, tokens: np.ndarray,
                     position_weights: np.ndarray, chunk: int,
                     into: dict[str, np.ndarray]) -> None:
    """Add the gradient of sum(position_weights * nll) into the accumulator."""
    for lo in range(0, tokens.shape[0], chunk):
        part = tokens[lo:lo + chunk]
        pw = position_weights[lo:lo + chunk]
        g, handles = M.build_loss_graph(weights, part, masks,
                                        position_weights=pw)
        ad.evaluate(g)
        grads = ad.backward(g, handles["loss"])
        for k, v in grads.items():
            into[k] += v


def margin_gradients(weights: M.TransformerWeights,
                     masks: "M.MaskState | None",
                     positive_batch, negative_batch,
                     chunk: int = 32) -> dict[str, np.ndarray]:
    """grad(L+) - grad(L-), each side the pooled mean NLL of its loss region.

    Identical positive and negative batches give exactly-zero gradients: both
    sides follow the same computation path.
    """
    pos_tokens, pos_mask = positive_batch
    neg_tokens, neg_mask = negative_batch
    acc = {name: np.zeros_like(arr) for name, arr in weights.named_parameters()}
    _grad_accumulate(weights, masks, pos_tokens, pos_mask / pos_mask.sum(),
                     chunk, acc)
    neg = {name: np.zeros_like(arr) for name, arr in weights.named_parameters()}
    _grad_accumulate(weights, masks, neg_tokens, neg_mask / neg_mask.sum(),
                     chunk, neg)
    for k in acc:
        acc[k] -= neg[k]
    return acc


def gradients_for_objective(weights: M.TransformerWeights,
                            masks: "M.MaskState | None",
                            objective: Objective,
                            chunk: int = 32) -> dict[str, np.ndarray]:
    """Single aggregate gradient of the objective over its calibration set."""
    if objective.kind == D.PERPLEXITY:
        acc = {name: np.zeros_like(arr)
               for name, arr in weights.named_parameters()}
        seqs = objective.calibration.sequences
        total = seqs.shape[0] * (seqs.shape[1] - 1)
        pw = np.full((seqs.shape[0], seqs.shape[1] - 1), 1.0 / total)
        _grad_accumulate(weights, masks, seqs, pw, chunk, acc)
        return acc
    pos, neg = D.build_margin_batches(objective.calibration.items)
    return margin_gradients(weights, masks, pos, neg, chunk)


def element_importance(grads: dict[str, np.ndarray],
                       weights: M.TransformerWeights) -> dict[str, np.ndarray]:
    """Per-element |grad * weight| for every parameter tensor."""
    out = {}
    for name, arr in weights.named_parameters():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if g.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name!r}: "
                             f"{g.shape} vs {arr.shape}")
        out[name] = np.abs(g * arr)
    return out


def _structure_slices(cfg: M.ModelConfig, sid: M.StructureId):
    """(param name, row/col indexer) pairs of the coupled slices."""
    pfx = f"layers.{sid.layer}."
    if sid.kind == M.ATTN_HEAD:
        dh = cfg.d_head
        rows = slice(sid.unit * dh, (sid.unit + 1) * dh)
        return [(pfx + "wq", (rows, slice(None))),
                (pfx + "wk", (rows, slice(None))),
                (pfx + "wv", (rows, slice(None))),
                (pfx + "wo", (slice(None), rows))]
    return [(pfx + "w_gate", (sid.unit, slice(None))),
            (pfx + "w_up", (sid.unit, slice(None))),
            (pfx + "w_down", (slice(None), sid.unit))]


def aggregate(element_scores: dict[str, np.ndarray],
              config: M.ModelConfig) -> dict[M.StructureId, float]:
    """Per-structure sums of element scores over the coupled slices."""
    out = {}
    for sid in M.enumerate_structures(config):
        total = 0.0
        for name, idx in _structure_slices(config, sid):
            total += float(element_scores[name][idx].sum())
        out[sid] = total
    return out


def structure_taylor_sums(grads: dict[str, np.ndarray],
                          weights: M.TransformerWeights) -> dict[M.StructureId, float]:
    """Signed per-structure sums of grad*weight (abs taken after aggregation).

    This is the first-order Taylor estimate of the loss change when the whole
    structure is scaled down; the ranking score in ``aggregate`` instead sums
    |grad*weight| per element.
    """
    cfg = weights.config
    params = dict(weights.named_parameters())
    out = {}
    for sid in M.enumerate_structures(cfg):
        total = 0.0
        for name, idx in _structure_slices(cfg, sid):
            total += float((grads[name][idx] * params[name][idx]).sum())
        out[sid] = total
    return out


def normalize_pools(raw: dict[M.StructureId, float],
                    masks: M.MaskState) -> tuple[dict[M.StructureId, float], float, float]:
    """Divide each kept structure's score by its pool mean (heads vs channels).

    Removed structures are excluded from both the statistics and the output.
    Returns (normalized, attn pool mean, mlp pool mean).
    """
    kept = [(sid, v) for sid, v in raw.items() if masks.is_kept(sid)]
    attn = [v for sid, v in kept if sid.kind == M.ATTN_HEAD]
    mlp = [v for sid, v in kept if sid.kind == M.MLP_CHANNEL]
    if not attn or not mlp:
        raise ValueError("each pool needs at least one kept structure")
    attn_mean = float(np.mean(attn))
    mlp_mean = float(np.mean(mlp))
    if attn_mean == 0.0 or mlp_mean == 0.0:
        raise DegeneratePoolError(
            "importance pool mean is zero; calibration gradients are degenerate")
    normalized = {
        sid: v / (attn_mean if sid.kind == M.ATTN_HEAD else mlp_mean)
        for sid, v in kept
    }
    return normalized, attn_mean, mlp_mean


def rank_prunable(normalized: dict[M.StructureId, float], masks: M.MaskState,
                  protected: "set[int] | frozenset[int]") -> list[M.StructureId]:
    """Kept, unprotected, non-floor-violating structures, worst first.

    Ascending by normalized score; exact ties fall back to (layer, kind,
    unit) order for determinism.
    """
    candidates = []
    for sid, score in normalized.items():
        if sid.layer in protected:
            continue
        if masks.would_violate_floor(sid):
            continue
        candidates.append((score, sid))
    candidates.sort(key=lambda t: (t[0], t[1]))
    return [sid for _, sid in candidates]


def compute_report(weights: M.TransformerWeights, masks: M.MaskState,
                   objective: Objective, iteration: int = 0,
                   chunk: int = 32) -> ImportanceReport:
    """Full pipeline: gradients -> element scores -> aggregate -> normalize."""
    grads = gradients_for_objective(weights, masks, objective, chunk)
    elem = element_importance(grads, weights)
    raw = aggregate(elem, weights.config)
    normalized, attn_mean, mlp_mean = normalize_pools(raw, masks)
    return ImportanceReport(iteration=iteration, raw=raw,
                            normalized=normalized,
                            attn_pool_mean=attn_mean, mlp_pool_mean=mlp_mean)
