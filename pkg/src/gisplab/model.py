"""Tiny decoder-only transformer with structured masking at head/channel level.

Architecture mirrors the Llama family at desk scale: RMS-norm, multi-head
causal attention, gated SiLU MLP, no biases, byte vocabulary, learned absolute
positions, untied output head. A pruning structure is either one attention
head (its Q/K/V row block plus O column block) or one MLP channel (gate row +
up row + down column); masking a structure multiplies the coupled slices by
zero inside the forward graph, which is numerically identical to zeroing the
weights themselves.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad

__all__ = [
    "ATTN_HEAD",
    "MLP_CHANNEL",
    "ModelConfig",
    "LayerWeights",
    "TransformerWeights",
    "StructureId",
    "MaskState",
    "FloorViolation",
    "init_weights",
    "enumerate_structures",
    "structure_param_count",
    "prunable_param_count",
    "build_loss_graph",
    "forward_loss",
    "forward_logits",
    "compact",
    "train_dense",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_fingerprint",
]

ATTN_HEAD = "attn_head"
MLP_CHANNEL = "mlp_channel"

CHECKPOINT_MAGIC = b"GISPCKPT"
CHECKPOINT_VERSION = 1


class FloorViolation(ValueError):
    """An operation would leave a layer with zero heads or zero channels."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int = 256
    max_seq_len: int = 128
    rng_seed: int = 0
    # set by compact(): per-layer (heads, channels) after physical removal
    layer_widths: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.layer_widths is not None:
            if len(self.layer_widths) != self.n_layers:
                raise ValueError("layer_widths must cover every layer")
            for h, c in self.layer_widths:
                if not (1 <= h <= self.n_heads and 1 <= c <= self.d_ff):
                    raise ValueError(f"layer width ({h},{c}) out of range")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def widths(self, layer: int) -> tuple[int, int]:
        """(heads, channels) for a layer, honoring compaction."""
        if self.layer_widths is None:
            return self.n_heads, self.d_ff
        return self.layer_widths[layer]

    def to_dict(self) -> dict:
        d = {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "rng_seed": self.rng_seed,
        }
        if self.layer_widths is not None:
            d["layer_widths"] = [list(w) for w in self.layer_widths]
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        lw = d.get("layer_widths")
        return ModelConfig(
            n_layers=d["n_layers"], n_heads=d["n_heads"], d_model=d["d_model"],
            d_ff=d["d_ff"], vocab_size=d["vocab_size"],
            max_seq_len=d["max_seq_len"], rng_seed=d["rng_seed"],
            layer_widths=None if lw is None else tuple(tuple(w) for w in lw))


@dataclass(frozen=True, order=True)
class StructureId:
    """Address of one prunable unit; kind is ATTN_HEAD or MLP_CHANNEL.

    Lexicographic dataclass ordering gives the deterministic (layer, kind,
    unit) tie-break used everywhere ("attn_head" sorts before "mlp_channel").
    """

    layer: int
    kind: str
    unit: int

    def to_dict(self) -> dict:
        return {"layer": self.layer, "kind": self.kind, "unit": self.unit}

    @staticmethod
    def from_dict(d: dict) -> "StructureId":
        sid = StructureId(int(d["layer"]), str(d["kind"]), int(d["unit"]))
        if sid.kind not in (ATTN_HEAD, MLP_CHANNEL):
            raise ValueError(f"unknown structure kind {sid.kind!r}")
        return sid


@dataclass
class LayerWeights:
    attn_norm: np.ndarray  # (d,)
    wq: np.ndarray         # (heads*d_head, d)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray         # (d, heads*d_head)
    mlp_norm: np.ndarray   # (d,)
    w_gate: np.ndarray     # (d_ff, d)
    w_up: np.ndarray       # (d_ff, d)
    w_down: np.ndarray     # (d, d_ff)


@dataclass
class TransformerWeights:
    config: ModelConfig
    token_emb: np.ndarray  # (vocab, d)
    pos_emb: np.ndarray    # (max_seq_len, d)
    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: np.ndarray    # (vocab, d)

    _LAYER_FIELDS = ("attn_norm", "wq", "wk", "wv", "wo",
                     "mlp_norm", "w_gate", "w_up", "w_down")

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        """Canonical enumerate order; checkpoint layout and GradientMap keys."""
        yield "token_emb", self.token_emb
        yield "pos_emb", self.pos_emb
        for i, lw in enumerate(self.layers):
            for f in self._LAYER_FIELDS:
                yield f"layers.{i}.{f}", getattr(lw, f)
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head

    def param_count(self) -> int:
        return sum(a.size for _, a in self.named_parameters())

    def copy(self) -> "TransformerWeights":
        return TransformerWeights(
            config=self.config,
            token_emb=self.token_emb.copy(),
            pos_emb=self.pos_emb.copy(),
            layers=[LayerWeights(**{f: getattr(lw, f).copy()
                                    for f in self._LAYER_FIELDS})
                    for lw in self.layers],
            final_norm=self.final_norm.copy(),
            lm_head=self.lm_head.copy())


def init_weights(config: ModelConfig) -> TransformerWeights:
    """Deterministic init: N(0, 0.02) projections/embeddings, unit norm gains."""
    if config.layer_widths is not None:
        raise ValueError("init_weights expects a dense (uncompacted) config")
    rng = np.random.default_rng(config.rng_seed)
    d, dff, v = config.d_model, config.d_ff, config.vocab_size

    def normal(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            attn_norm=np.ones(d),
            wq=normal(d, d), wk=normal(d, d), wv=normal(d, d), wo=normal(d, d),
            mlp_norm=np.ones(d),
            w_gate=normal(dff, d), w_up=normal(dff, d), w_down=normal(d, dff)))
    return TransformerWeights(
        config=config,
        token_emb=normal(v, d),
        pos_emb=normal(config.max_seq_len, d),
        layers=layers,
        final_norm=np.ones(d),
        lm_head=normal(v, d))


# -- structures --------------------------------------------------------------


def enumerate_structures(config: ModelConfig) -> list[StructureId]:
    """All prunable units in (layer, kind, unit) order: heads then channels."""
    out = []
    for layer in range(config.n_layers):
        heads, channels = config.widths(layer)
        out.extend(StructureId(layer, ATTN_HEAD, u) for u in range(heads))
        out.extend(StructureId(layer, MLP_CHANNEL, u) for u in range(channels))
    return out


def structure_param_count(config: ModelConfig, sid: StructureId) -> int:
    if sid.kind == ATTN_HEAD:
        return 4 * config.d_head * config.d_model
    if sid.kind == MLP_CHANNEL:
        return 3 * config.d_model
    raise ValueError(f"unknown structure kind {sid.kind!r}")


def prunable_param_count(config: ModelConfig,
                         layers: "set[int] | None" = None) -> int:
    """Total parameters owned by prunable structures, optionally restricted."""
    total = 0
    for sid in enumerate_structures(config):
        if layers is None or sid.layer in layers:
            total += structure_param_count(config, sid)
    return total


@dataclass
class MaskState:
    """Kept/removed status of every structure; the removal set only grows.

    Every layer must keep at least one head and one channel (floor rule);
    ``remove`` raises FloorViolation rather than silently skipping.
    """

    config: ModelConfig
    kept_heads: list[np.ndarray] = field(default_factory=list)
    kept_channels: list[np.ndarray] = field(default_factory=list)

    @staticmethod
    def dense(config: ModelConfig) -> "MaskState":
        return MaskState(
            config=config,
            kept_heads=[np.ones(config.widths(i)[0], dtype=bool)
                        for i in range(config.n_layers)],
            kept_channels=[np.ones(config.widths(i)[1], dtype=bool)
                           for i in range(config.n_layers)])

    def copy(self) -> "MaskState":
        return MaskState(self.config,
                         [m.copy() for m in self.kept_heads],
                         [m.copy() for m in self.kept_channels])

    def _slot(self, sid: StructureId) -> np.ndarray:
        if not (0 <= sid.layer < self.config.n_layers):
            raise ValueError(f"layer {sid.layer} out of range")
        arr = (self.kept_heads if sid.kind == ATTN_HEAD
               else self.kept_channels)[sid.layer]
        if not (0 <= sid.unit < arr.size):
            raise ValueError(f"unit {sid.unit} out of range for {sid}")
        return arr

    def is_kept(self, sid: StructureId) -> bool:
        return bool(self._slot(sid)[sid.unit])

    def would_violate_floor(self, sid: StructureId) -> bool:
        return self._slot(sid).sum() <= 1

    def remove(self, sid: StructureId) -> None:
        arr = self._slot(sid)
        if not arr[sid.unit]:
            raise ValueError(f"{sid} already removed")
        if arr.sum() <= 1:
            raise FloorViolation(f"removing {sid} would empty the layer")
        arr[sid.unit] = False

    def removed(self) -> list[StructureId]:
        out = []
        for layer in range(self.config.n_layers):
            out.extend(StructureId(layer, ATTN_HEAD, int(u))
                       for u in np.flatnonzero(~self.kept_heads[layer]))
            out.extend(StructureId(layer, MLP_CHANNEL, int(u))
                       for u in np.flatnonzero(~self.kept_channels[layer]))
        return out

    def removed_param_count(self) -> int:
        c = self.config
        heads = sum(int((~m).sum()) for m in self.kept_heads)
        chans = sum(int((~m).sum()) for m in self.kept_channels)
        return heads * 4 * c.d_head * c.d_model + chans * 3 * c.d_model

    def head_mask_vector(self, layer: int) -> np.ndarray:
        """Float 0/1 over the concatenated q/k/v row dimension."""
        return np.repeat(self.kept_heads[layer].astype(np.float64),
                         self.config.d_head)

    def channel_mask_vector(self, layer: int) -> np.ndarray:
        return self.kept_channels[layer].astype(np.float64)

    def issubset(self, other: "MaskState") -> bool:
        """True iff removed(self) is a subset of removed(other)."""
        for a, b in zip(self.kept_heads, other.kept_heads):
            if np.any(~a & b):
                return False
        for a, b in zip(self.kept_channels, other.kept_channels):
            if np.any(~a & b):
                return False
        return True

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        for m in self.kept_heads + self.kept_channels:
            h.update(np.packbits(m).tobytes())
            h.update(b"|")
        return h.hexdigest()


# -- forward -----------------------------------------------------------------


def _causal_bias(t: int) -> np.ndarray:
    bias = np.zeros((t, t))
    bias[np.triu_indices(t, k=1)] = -1e30
    return bias


def build_loss_graph(weights: TransformerWeights, tokens: np.ndarray,
                     masks: MaskState | None = None,
                     position_weights: np.ndarray | None = None,
                     stop_at_logits: bool = False):
    """Assemble the next-token loss graph for a (B, T) token batch.

    Returns (graph, handles) where handles maps probe names to node ids
    ("logits", "loss", plus per-layer activation taps used by the baselines
    and the coupling tests). Loss is the mean token cross-entropy over
    positions 1..T-1, or the weighted sum when position_weights (B, T-1)
    is given.
    """
    cfg = weights.config
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError("tokens must be a (B, T) array")
    b, t = tokens.shape
    if t < 2:
        raise ValueError("sequence length must be >= 2")
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")

    inputs, targets = tokens[:, :-1], np.ascontiguousarray(tokens[:, 1:])
    tin = t - 1
    g = ad.Graph()
    handles: dict[str, int] = {}

    tok_e = g.parameter("token_emb", weights.token_emb)
    pos_e = g.parameter("pos_emb", weights.pos_emb)
    x = g.add(g.embedding(tok_e, inputs),
              g.embedding(pos_e, np.arange(tin)))
    bias = g.constant(_causal_bias(tin))

    for i, lw in enumerate(weights.layers):
        heads = lw.wq.shape[0] // cfg.d_head
        dff = lw.w_gate.shape[0]
        pfx = f"layers.{i}."

        attn_norm = g.parameter(pfx + "attn_norm", lw.attn_norm)
        h = g.rmsnorm(x, attn_norm)
        handles[f"layer{i}.attn_in"] = h

        wq = g.parameter(pfx + "wq", lw.wq)
        wk = g.parameter(pfx + "wk", lw.wk)
        wv = g.parameter(pfx + "wv", lw.wv)
        wo = g.parameter(pfx + "wo", lw.wo)
        if masks is not None:
            hm = masks.head_mask_vector(i)
            wq = g.multiply(wq, g.constant(hm[:, None]))
            wk = g.multiply(wk, g.constant(hm[:, None]))
            wv = g.multiply(wv, g.constant(hm[:, None]))
            wo = g.multiply(wo, g.constant(hm[None, :]))

        def heads_split(proj):
            r = g.reshape(proj, (b, tin, heads, cfg.d_head))
            return g.permute(r, (0, 2, 1, 3))

        q = heads_split(g.matmul(h, g.permute(wq, (1, 0))))
        k = heads_split(g.matmul(h, g.permute(wk, (1, 0))))
        v = heads_split(g.matmul(h, g.permute(wv, (1, 0))))

        # scaling q (not the T x T scores) keeps the scale op on the small side
        scores = g.matmul(g.scale(q, 1.0 / np.sqrt(cfg.d_head)),
                          g.permute(k, (0, 1, 3, 2)))
        probs = g.softmax(g.add(scores, bias))
        att = g.matmul(probs, v)
        handles[f"layer{i}.head_ctx"] = att
        att = g.reshape(g.permute(att, (0, 2, 1, 3)), (b, tin, heads * cfg.d_head))
        handles[f"layer{i}.attn_ctx"] = att
        x = g.add(x, g.matmul(att, g.permute(wo, (1, 0))))

        mlp_norm = g.parameter(pfx + "mlp_norm", lw.mlp_norm)
        h2 = g.rmsnorm(x, mlp_norm)
        handles[f"layer{i}.mlp_in"] = h2

        w_gate = g.parameter(pfx + "w_gate", lw.w_gate)
        w_up = g.parameter(pfx + "w_up", lw.w_up)
        w_down = g.parameter(pfx + "w_down", lw.w_down)
        if masks is not None:
            cm = masks.channel_mask_vector(i)
            w_gate = g.multiply(w_gate, g.constant(cm[:, None]))
            w_up = g.multiply(w_up, g.constant(cm[:, None]))
            w_down = g.multiply(w_down, g.constant(cm[None, :]))

        gate_out = g.matmul(h2, g.permute(w_gate, (1, 0)))
        up_out = g.matmul(h2, g.permute(w_up, (1, 0)))
        hidden = g.gate(up_out, gate_out)
        handles[f"layer{i}.mlp_hidden"] = hidden
        x = g.add(x, g.matmul(hidden, g.permute(w_down, (1, 0))))

    final_norm = g.parameter("final_norm", weights.final_norm)
    lm_head = g.parameter("lm_head", weights.lm_head)
    logits = g.matmul(g.rmsnorm(x, final_norm), g.permute(lm_head, (1, 0)))
    handles["logits"] = logits
    if stop_at_logits:
        return g, handles

    if position_weights is not None:
        w = np.asarray(position_weights, dtype=np.float64)
        if w.shape != targets.shape:
            raise ValueError("position_weights must match (B, T-1)")
        loss = g.cross_entropy(logits, targets, w)
    else:
        loss = g.cross_entropy(logits, targets)
    handles["loss"] = loss
    return g, handles


def forward_loss(weights: TransformerWeights, tokens: np.ndarray,
                 masks: MaskState | None = None,
                 position_weights: np.ndarray | None = None) -> float:
    g, _ = build_loss_graph(weights, tokens, masks, position_weights)
    return float(ad.evaluate(g))


def forward_logits(weights: TransformerWeights, tokens: np.ndarray,
                   masks: MaskState | None = None) -> np.ndarray:
    """Logits over the first T-1 positions of each sequence."""
    g, handles = build_loss_graph(weights, tokens, masks, stop_at_logits=True)
    ad.evaluate(g)
    return g.value(handles["logits"])


# -- compaction ---------------------------------------------------------------


def compact(weights: TransformerWeights,
            masks: MaskState) -> tuple[TransformerWeights, ModelConfig]:
    """Physically drop the masked rows/columns; loss-equivalent to masking."""
    cfg = weights.config
    if cfg.layer_widths is not None:
        raise ValueError("compact expects dense-shape weights")
    dh = cfg.d_head
    widths = []
    layers = []
    for i, lw in enumerate(weights.layers):
        hk = masks.kept_heads[i]
        ck = masks.kept_channels[i]
        if hk.sum() == 0 or ck.sum() == 0:
            raise FloorViolation(f"layer {i} fully emptied")
        rows = np.repeat(hk, dh)
        layers.append(LayerWeights(
            attn_norm=lw.attn_norm.copy(),
            wq=lw.wq[rows].copy(), wk=lw.wk[rows].copy(), wv=lw.wv[rows].copy(),
            wo=lw.wo[:, rows].copy(),
            mlp_norm=lw.mlp_norm.copy(),
            w_gate=lw.w_gate[ck].copy(), w_up=lw.w_up[ck].copy(),
            w_down=lw.w_down[:, ck].copy()))
        widths.append((int(hk.sum()), int(ck.sum())))
    new_cfg = replace(cfg, layer_widths=tuple(widths))
    return TransformerWeights(
        config=new_cfg,
        token_emb=weights.token_emb.copy(),
        pos_emb=weights.pos_emb.copy(),
        layers=layers,
        final_norm=weights.final_norm.copy(),
        lm_head=weights.lm_head.copy()), new_cfg


# -- training -----------------------------------------------------------------


class DivergenceError(RuntimeError):
    pass


def train_dense(config: ModelConfig, corpus: np.ndarray, steps: int,
                learning_rate: float = 1e-3, batch: int = 16,
                seed: int = 0, holdout_fraction: float = 0.02,
                log_every: int = 0) -> TransformerWeights:
    """Adam training of the dense model on a byte corpus.

    Deterministic in (config, corpus, steps, learning_rate, batch, seed).
    Aborts with DivergenceError on a non-finite loss.
    """
    corpus = np.asarray(corpus)
    if corpus.size == 0:
        raise ValueError("corpus is empty")
    weights = init_weights(config)
    if steps == 0:
        return weights

    seq = config.max_seq_len
    n_hold = max(int(corpus.size * holdout_fraction), seq)
    train_bytes = corpus[:-n_hold]
    if train_bytes.size < seq + 1:
        raise ValueError("corpus too small for one training window")

    rng = np.random.default_rng(seed)
    params = dict(weights.named_parameters())
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    warmup = min(100, steps)

    for step in range(1, steps + 1):
        offs = rng.integers(0, train_bytes.size - seq, size=batch)
        batch_tokens = np.stack([train_bytes[o:o + seq] for o in offs])
        g, handles = build_loss_graph(weights, batch_tokens)
        loss = float(ad.evaluate(g))
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        grads = ad.backward(g, handles["loss"])
        # linear warmup into cosine decay with a 10% floor
        lr = learning_rate * min(1.0, step / warmup)
        lr *= 0.1 + 0.45 * (1.0 + np.cos(np.pi * step / steps))
        for k, p in params.items():
            gk = grads[k]
            m[k] = b1 * m[k] + (1 - b1) * gk
            v2[k] = b2 * v2[k] + (1 - b2) * gk * gk
            mhat = m[k] / (1 - b1 ** step)
            vhat = v2[k] / (1 - b2 ** step)
            p -= lr * mhat / (np.sqrt(vhat) + eps)
        if log_every and step % log_every == 0:
            print(f"step {step}: train loss {loss:.4f}")
    return weights


def heldout_slice(corpus: np.ndarray, holdout_fraction: float = 0.02,
                  seq_len: int | None = None) -> np.ndarray:
    """The corpus tail reserved by train_dense for held-out evaluation."""
    corpus = np.asarray(corpus)
    n_hold = max(int(corpus.size * holdout_fraction), seq_len or 0)
    return corpus[-n_hold:]


# -- checkpoint I/O -----------------------------------------------------------


def checkpoint_bytes(weights: TransformerWeights) -> bytes:
    cfg_json = json.dumps(weights.config.to_dict(), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<Q", len(cfg_json)), cfg_json]
    for _, arr in weights.named_parameters():
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def checkpoint_fingerprint(data: bytes) -> str:
    """64-bit content hash of the checkpoint byte stream, as 16 hex chars."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def save_checkpoint(path, weights: TransformerWeights,
                    manifest_extra: dict | None = None) -> str:
    """Write the binary checkpoint plus its JSON sidecar; returns fingerprint."""
    data = checkpoint_bytes(weights)
    fp = checkpoint_fingerprint(data)
    path = str(path)
    with open(path, "wb") as f:
        f.write(data)
    manifest = {
        "config": weights.config.to_dict(),
        "seed": weights.config.rng_seed,
        "param_count": weights.param_count(),
        "fingerprint": fp,
        "format_version": CHECKPOINT_VERSION,
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return fp


def _shape_plan(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, v = cfg.d_model, cfg.vocab_size
    plan = [("token_emb", (v, d)), ("pos_emb", (cfg.max_seq_len, d))]
    for i in range(cfg.n_layers):
        h, c = cfg.widths(i)
        hd = h * cfg.d_head
        plan += [(f"layers.{i}.attn_norm", (d,)),
                 (f"layers.{i}.wq", (hd, d)), (f"layers.{i}.wk", (hd, d)),
                 (f"layers.{i}.wv", (hd, d)), (f"layers.{i}.wo", (d, hd)),
                 (f"layers.{i}.mlp_norm", (d,)),
                 (f"layers.{i}.w_gate", (c, d)), (f"layers.{i}.w_up", (c, d)),
                 (f"layers.{i}.w_down", (d, c))]
    plan += [("final_norm", (d,)), ("lm_head", (v, d))]
    return plan


def load_checkpoint(path) -> TransformerWeights:
    with open(str(path), "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[8:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<Q", data[12:20])
    cfg = ModelConfig.from_dict(json.loads(data[20:20 + cfg_len]))
    offset = 20 + cfg_len

    arrays = {}
    for name, shape in _shape_plan(cfg):
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset)
        arrays[name] = arr.reshape(shape).copy()
        offset += n * 8
    if offset != len(data):
        raise ValueError("checkpoint has trailing or missing parameter bytes")

    layers = [LayerWeights(**{f: arrays[f"layers.{i}.{f}"]
                              for f in TransformerWeights._LAYER_FIELDS})
              for i in range(cfg.n_layers)]
    return TransformerWeights(
        config=cfg, token_emb=arrays["token_emb"], pos_emb=arrays["pos_emb"],
        layers=layers, final_norm=arrays["final_norm"],
        lm_head=arrays["lm_head"])
