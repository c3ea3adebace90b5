"""Local structured baselines: uniform weight-activation pruning and global
magnitude pruning.

The weight-activation pruner scores each structure by the sum of
|W_ij| * ||X_j||_2 over its coupled slices, where ||X_j||_2 is the L2 norm of
the calibration activations feeding input feature j of the projection, and
removes the lowest-scored fraction per layer and per kind (uniform local
sparsity). It is gradient-free: only forward passes run. Neither baseline
produces a trace; each target ratio is an independent run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M

__all__ = [
    "ActivationStats",
    "collect_activation_stats",
    "wanda_sp",
    "magnitude_global",
]


@dataclass
class ActivationStats:
    """Per layer: L2 norms of the inputs feeding each prunable projection.

    attn_in (d_model,) feeds Q/K/V rows, head_ctx (heads*d_head,) feeds O
    columns, mlp_in (d_model,) feeds gate/up rows, mlp_hidden (d_ff,) feeds
    down columns. Norms are over all calibration tokens; dense model only.
    """

    attn_in: list[np.ndarray]
    head_ctx: list[np.ndarray]
    mlp_in: list[np.ndarray]
    mlp_hidden: list[np.ndarray]


def collect_activation_stats(weights: M.TransformerWeights,
                             sequences: np.ndarray,
                             chunk: int = 64) -> ActivationStats:
    """One forward pass over the calibration set, accumulating sum-of-squares."""
    cfg = weights.config
    sequences = np.asarray(sequences)
    if sequences.ndim != 2 or sequences.shape[0] == 0:
        raise ValueError("calibration must be a nonempty (N, L) array")
    sq = {
        "attn_in": [np.zeros(cfg.d_model) for _ in range(cfg.n_layers)],
        "head_ctx": [np.zeros(w.wo.shape[1]) for w in weights.layers],
        "mlp_in": [np.zeros(cfg.d_model) for _ in range(cfg.n_layers)],
        "mlp_hidden": [np.zeros(w.w_gate.shape[0]) for w in weights.layers],
    }
    for lo in range(0, sequences.shape[0], chunk):
        part = sequences[lo:lo + chunk]
        g, handles = M.build_loss_graph(weights, part, stop_at_logits=True)
        ad.evaluate(g)
        for i in range(cfg.n_layers):
            for key, tap in (("attn_in", "attn_in"), ("head_ctx", "attn_ctx"),
                             ("mlp_in", "mlp_in"), ("mlp_hidden", "mlp_hidden")):
                act = g.value(handles[f"layer{i}.{tap}"])
                sq[key][i] += (act * act).reshape(-1, act.shape[-1]).sum(axis=0)
    return ActivationStats(
        attn_in=[np.sqrt(a) for a in sq["attn_in"]],
        head_ctx=[np.sqrt(a) for a in sq["head_ctx"]],
        mlp_in=[np.sqrt(a) for a in sq["mlp_in"]],
        mlp_hidden=[np.sqrt(a) for a in sq["mlp_hidden"]])


def _wanda_head_scores(lw: M.LayerWeights, stats: ActivationStats,
                       layer: int, cfg: M.ModelConfig) -> np.ndarray:
    xin = stats.attn_in[layer]
    ctx = stats.head_ctx[layer]
    dh = cfg.d_head
    per_row_qkv = (np.abs(lw.wq) @ xin + np.abs(lw.wk) @ xin
                   + np.abs(lw.wv) @ xin)
    per_col_o = np.abs(lw.wo).sum(axis=0) * ctx
    n_heads = lw.wq.shape[0] // dh
    scores = np.empty(n_heads)
    for h in range(n_heads):
        rows = slice(h * dh, (h + 1) * dh)
        scores[h] = per_row_qkv[rows].sum() + per_col_o[rows].sum()
    return scores


def _wanda_channel_scores(lw: M.LayerWeights, stats: ActivationStats,
                          layer: int) -> np.ndarray:
    xin = stats.mlp_in[layer]
    hid = stats.mlp_hidden[layer]
    return (np.abs(lw.w_gate) @ xin + np.abs(lw.w_up) @ xin
            + np.abs(lw.w_down).sum(axis=0) * hid)


def wanda_sp(weights: M.TransformerWeights, stats: ActivationStats,
             ratio: float, protected: "frozenset[int] | None" = None) -> M.MaskState:
    """Uniform per-layer structured pruning by weight-activation products.

    Within each non-protected layer and kind, the lowest-scored
    round(ratio * count) structures are removed, capped by the floor rule.
    """
    if not (0.0 <= ratio < 1.0):
        raise ValueError("ratio must be in [0, 1)")
    cfg = weights.config
    if protected is None:
        from .engine import default_protected_layers
        protected = default_protected_layers(cfg)
    masks = M.MaskState.dense(cfg)
    for layer in range(cfg.n_layers):
        if layer in protected:
            continue
        lw = weights.layers[layer]
        for kind, scores in ((M.ATTN_HEAD,
                              _wanda_head_scores(lw, stats, layer, cfg)),
                             (M.MLP_CHANNEL,
                              _wanda_channel_scores(lw, stats, layer))):
            n = scores.size
            n_remove = int(round(ratio * n))
            if n_remove > n - 1:
                raise M.FloorViolation(
                    f"layer {layer} {kind}: ratio {ratio} infeasible under floor")
            for u in np.argsort(scores, kind="stable")[:n_remove]:
                masks.remove(M.StructureId(layer, kind, int(u)))
    return masks


def magnitude_global(weights: M.TransformerWeights, ratio: float,
                     protected: "frozenset[int] | None" = None) -> M.MaskState:
    """Classical control: rank structures by summed |W|, remove globally.

    No pool normalization and no calibration; the removal quota is the same
    parameter-fraction rule the iterative engine uses.
    """
    if not (0.0 <= ratio < 1.0):
        raise ValueError("ratio must be in [0, 1)")
    cfg = weights.config
    if protected is None:
        from .engine import default_protected_layers
        protected = default_protected_layers(cfg)
    from . import importance as I

    params = dict(weights.named_parameters())
    scored = []
    budget = 0
    for sid in M.enumerate_structures(cfg):
        if sid.layer in protected:
            continue
        budget += M.structure_param_count(cfg, sid)
        total = sum(float(np.abs(params[name][idx]).sum())
                    for name, idx in I._structure_slices(cfg, sid))
        scored.append((total, sid))
    scored.sort(key=lambda t: (t[0], t[1]))

    masks = M.MaskState.dense(cfg)
    target = ratio * budget
    removed = 0
    for _, sid in scored:
        if removed >= target:
            break
        if masks.would_violate_floor(sid):
            continue
        masks.remove(sid)
        removed += M.structure_param_count(cfg, sid)
    if removed < target:
        raise M.FloorViolation(f"ratio {ratio} infeasible under floor rule")
    return masks
