"""Byte tokenization, calibration sampling, synthetic QA, and the two metrics.

Evaluation scores candidates by next-token NLL computed from the same forward
graph the trainer uses; QA candidate scoring restricts the loss region to
candidate tokens (prompt positions carry zero weight), following the usual
multi-option harness convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import textgen

__all__ = [
    "tokenize",
    "detokenize",
    "CalibrationSet",
    "QAItem",
    "EvalReport",
    "sample_calibration",
    "make_synthetic_qa",
    "token_nll",
    "perplexity",
    "qa_accuracy",
    "build_margin_batches",
    "load_qa_file",
    "save_qa_file",
]

PERPLEXITY = "perplexity"
MARGIN = "margin"


def tokenize(text: "str | bytes") -> np.ndarray:
    """Byte ids; fixed vocabulary of 256."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    if not isinstance(text, (bytes, bytearray)):
        # an int array through the buffer protocol would silently re-chunk
        raise TypeError(f"tokenize expects str or bytes, got {type(text).__name__}")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(ids: np.ndarray) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() > 255):
        raise ValueError("byte token id out of range")
    return ids.astype(np.uint8).tobytes()


@dataclass
class QAItem:
    """One multi-option question: shared prompt, one gold, >=1 distractors."""

    prompt: np.ndarray
    positive: np.ndarray
    negatives: list[np.ndarray]

    def __post_init__(self):
        if len(self.prompt) == 0:
            raise ValueError("prompt must be nonempty to condition candidates")
        if len(self.positive) == 0 or any(len(n) == 0 for n in self.negatives):
            raise ValueError("candidates must be nonempty")
        if not self.negatives:
            raise ValueError("at least one negative candidate required")
        pos = self.positive.tolist()
        if any(n.tolist() == pos for n in self.negatives):
            raise ValueError("positive candidate duplicated among negatives")

    @property
    def candidates(self) -> list[np.ndarray]:
        return [self.positive] + list(self.negatives)

    def to_dict(self) -> dict:
        return {"prompt": detokenize(self.prompt).decode("utf-8"),
                "positive": detokenize(self.positive).decode("utf-8"),
                "negatives": [detokenize(n).decode("utf-8")
                              for n in self.negatives]}

    @staticmethod
    def from_dict(d: dict) -> "QAItem":
        return QAItem(prompt=tokenize(d["prompt"]),
                      positive=tokenize(d["positive"]),
                      negatives=[tokenize(n) for n in d["negatives"]])


@dataclass
class CalibrationSet:
    """Either token sequences (perplexity) or QA items (margin)."""

    kind: str
    sequences: np.ndarray | None = None   # (N, L) int array
    items: list[QAItem] = field(default_factory=list)

    def __post_init__(self):
        if self.kind == PERPLEXITY:
            if self.sequences is None or len(self.sequences) == 0:
                raise ValueError("perplexity calibration needs sequences")
        elif self.kind == MARGIN:
            if not self.items:
                raise ValueError("margin calibration needs QA items")
        else:
            raise ValueError(f"unknown calibration kind {self.kind!r}")


def sample_calibration(corpus, n_samples: int = 256, seq_len: int = 128,
                       seed: int = 0) -> CalibrationSet:
    """N contiguous windows at seeded-uniform offsets; deterministic."""
    tokens = tokenize(corpus) if isinstance(corpus, (str, bytes)) else np.asarray(corpus)
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    if tokens.size < seq_len:
        raise ValueError("corpus shorter than one window")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, tokens.size - seq_len + 1, size=n_samples)
    seqs = np.stack([tokens[o:o + seq_len] for o in offsets]).astype(np.int64)
    return CalibrationSet(kind=PERPLEXITY, sequences=seqs)


def make_synthetic_qa(generator_spec: "textgen.WorldSpec | None" = None,
                      count: int = 128, seed: int = 0,
                      n_negatives: int = 3) -> list[QAItem]:
    """Cloze items over the corpus world's facts; answers are single words."""
    world = textgen.build_world(generator_spec)
    rng = np.random.default_rng(seed)
    topics = sorted(textgen.QUESTIONS)
    items = []
    for _ in range(count):
        animal = textgen.ANIMALS[int(rng.integers(len(textgen.ANIMALS)))]
        topic = topics[int(rng.integers(len(topics)))]
        prompt, answer = textgen.qa_line(world, animal, topic)
        pool = [w for w in textgen.QUESTIONS[topic][1]
                if w != answer.strip()]
        picks = rng.permutation(len(pool))[:n_negatives]
        items.append(QAItem(
            prompt=tokenize(prompt),
            positive=tokenize(answer),
            negatives=[tokenize(" " + pool[int(i)]) for i in picks]))
    return items


def qa_register_text(generator_spec=None, size: int = 100_000) -> bytes:
    """In-domain calibration text: the QA register of the bundled world."""
    return textgen.generate_corpus(size, generator_spec, register="qa")


# -- scoring -------------------------------------------------------------------


def _pad_rows(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length rows; returns (tokens, valid) with zero padding.

    Padding sits at the tail, after every scored position, so causal
    attention for real tokens is unaffected.
    """
    width = max(len(r) for r in rows)
    tokens = np.zeros((len(rows), width), dtype=np.int64)
    valid = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        tokens[i, :len(r)] = r
        valid[i, :len(r)] = True
    return tokens, valid


def token_nll(weights: M.TransformerWeights, tokens: np.ndarray,
              masks: M.MaskState | None = None,
              chunk: int = 64) -> np.ndarray:
    """Per-position next-token NLL, shape (B, T-1); computed chunk-wise."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    out = np.empty((tokens.shape[0], tokens.shape[1] - 1))
    for lo in range(0, tokens.shape[0], chunk):
        part = tokens[lo:lo + chunk]
        logits = M.forward_logits(weights, part, masks)
        z = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.sum(np.exp(z), axis=-1))
        tgt = part[:, 1:]
        out[lo:lo + chunk] = lse - np.take_along_axis(
            z, tgt[..., None], axis=-1)[..., 0]
    return out


def perplexity(weights: M.TransformerWeights, masks: M.MaskState | None,
               sequences, chunk: int = 64) -> float:
    """exp(mean next-token NLL) pooled over all predicted positions."""
    if isinstance(sequences, np.ndarray) and sequences.ndim == 2:
        nll = token_nll(weights, sequences, masks, chunk)
        return float(np.exp(nll.mean()))
    rows = [np.asarray(s) for s in sequences]
    if not rows:
        raise ValueError("no sequences to evaluate")
    total, count = 0.0, 0
    for lo in range(0, len(rows), chunk):
        tokens, valid = _pad_rows(rows[lo:lo + chunk])
        nll = token_nll(weights, tokens, masks, chunk)
        w = valid[:, 1:]
        total += float((nll * w).sum())
        count += int(w.sum())
    return float(np.exp(total / count))


def _candidate_scores(weights, masks, item: QAItem,
                      chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(total candidate NLL, candidate token count) per candidate."""
    rows = [np.concatenate([item.prompt, c]) for c in item.candidates]
    tokens, valid = _pad_rows(rows)
    nll = token_nll(weights, tokens, masks, chunk)
    totals = np.empty(len(rows))
    counts = np.empty(len(rows))
    p = len(item.prompt)
    for i, c in enumerate(item.candidates):
        # candidate tokens occupy positions p..p+len(c)-1; the NLL of the
        # token at position t lives at column t-1
        sl = slice(p - 1, p - 1 + len(c))
        totals[i] = nll[i, sl].sum()
        counts[i] = len(c)
    return totals, counts


@dataclass
class EvalReport:
    perplexity: float | None
    accuracy: float | None
    accuracy_norm: float | None
    decisions: list[dict]
    masks_fingerprint: str

    def to_dict(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "accuracy": self.accuracy,
            "accuracy_norm": self.accuracy_norm,
            "decisions": self.decisions,
            "masks_fingerprint": self.masks_fingerprint,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def qa_accuracy(weights: M.TransformerWeights, masks: M.MaskState | None,
                items: list[QAItem], mode: str = "acc_norm",
                return_decisions: bool = False):
    """Fraction of items whose gold candidate has the lowest NLL score.

    mode "acc" ranks by total candidate NLL, "acc_norm" by per-token mean;
    ties resolve to the lowest candidate index (gold is index 0).
    """
    if mode not in ("acc", "acc_norm"):
        raise ValueError(f"unknown accuracy mode {mode!r}")
    if not items:
        raise ValueError("no QA items")
    correct = 0
    decisions = []
    for item in items:
        totals, counts = _candidate_scores(weights, masks, item)
        scores = totals if mode == "acc" else totals / counts
        choice = int(np.argmin(scores))
        correct += choice == 0
        if return_decisions:
            decisions.append({"choice": choice, "correct": choice == 0,
                              "scores": [float(s) for s in scores]})
    acc = correct / len(items)
    if return_decisions:
        return acc, decisions
    return acc


def build_margin_batches(items: list[QAItem]):
    """(positive, negative) scoring batches with candidate-only loss regions.

    Each side is (tokens, loss_mask): tokens (N, L) zero-padded, loss_mask
    (N, L-1) float 0/1 marking candidate-token positions. Prompt and padding
    positions carry zero weight, so prompt targets never contribute.
    """
    if not items:
        raise ValueError("no QA items")
    pos_rows, neg_rows = [], []
    for item in items:
        p = len(item.prompt)
        pos_rows.append((np.concatenate([item.prompt, item.positive]), p,
                         len(item.positive)))
        for n in item.negatives:
            neg_rows.append((np.concatenate([item.prompt, n]), p, len(n)))

    def pack(rows):
        tokens, _ = _pad_rows([r[0] for r in rows])
        mask = np.zeros((len(rows), tokens.shape[1] - 1))
        for i, (_, p, c) in enumerate(rows):
            mask[i, p - 1:p - 1 + c] = 1.0
        return tokens, mask

    return pack(pos_rows), pack(neg_rows)


def batch_mean_nll(weights: M.TransformerWeights, masks: M.MaskState | None,
                   batch, chunk: int = 64) -> float:
    """Pooled mean NLL over the masked loss region of a scoring batch."""
    tokens, mask = batch
    nll = token_nll(weights, tokens, masks, chunk)
    return float((nll * mask).sum() / mask.sum())


# -- QA file format -------------------------------------------------------------


def save_qa_file(path, items: list[QAItem]) -> None:
    with open(str(path), "w", encoding="utf-8") as f:
        for item in items:
            f.write(json.dumps(item.to_dict(), sort_keys=True) + "\n")


def load_qa_file(path) -> list[QAItem]:
    items = []
    with open(str(path), "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                items.append(QAItem.from_dict(json.loads(line)))
    return items
