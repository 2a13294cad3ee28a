"""Compositionality instruments: topographic similarity, diagnostic probes
with recall@k, and message statistics."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .datasets import NUM_CHARS
from .errors import ContractError, FormatError
from .training import Adam, binary_cross_entropy_with_logits

log = logging.getLogger(__name__)

TAPS = ("visual", "sender", "receiver")


@dataclass(frozen=True)
class RepresentationSpace:
    ids: tuple[int, ...]
    vectors: np.ndarray  # (n, d)

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.ids) != self.vectors.shape[0]:
            raise ContractError("a representation space needs one d-dimensional vector per id")

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class MessageCorpus:
    ids: tuple[int, ...]
    messages: np.ndarray                 # (n, L) int
    char_sets: tuple[frozenset[int], ...]
    vocab_size: int

    def __len__(self):
        return len(self.ids)


# -------------------------------------------------------------- distances

def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine distance is undefined for a zero vector")
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def pairwise_cosine_distances(vectors) -> np.ndarray:
    """Condensed distances for pairs (i, j), i < j, in row-major order."""
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ContractError(f"zero vector at row {int(np.argmin(norms))}; cosine distance undefined")
    unit = x / norms[:, None]
    iu = np.triu_indices(len(x), k=1)
    return np.clip(1.0 - (unit @ unit.T)[iu], 0.0, 2.0)


def _pearson(x, y) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sx, sy = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise ContractError("pairwise distances are constant; correlation is undefined")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def correlate(x, y, method: str = "spearman") -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if method == "spearman":
        x, y = rankdata(x), rankdata(y)
    elif method != "pearson":
        raise ContractError(f"unknown correlation {method!r}")
    if np.array_equal(x, y) and np.ptp(x) > 0:
        return 1.0
    return _pearson(x, y)


def topographic_similarity(a, b, method: str = "spearman") -> float:
    """Rank correlation of the pairwise cosine distances of two spaces."""
    va = a.vectors if isinstance(a, RepresentationSpace) else np.asarray(a)
    vb = b.vectors if isinstance(b, RepresentationSpace) else np.asarray(b)
    if isinstance(a, RepresentationSpace) and isinstance(b, RepresentationSpace) and a.ids != b.ids:
        raise ContractError("spaces must list the same samples in the same order")
    if len(va) != len(vb):
        raise ContractError(f"spaces differ in size: {len(va)} vs {len(vb)}")
    if len(va) < 3:
        raise ContractError("topographic similarity needs at least 3 samples")
    return correlate(pairwise_cosine_distances(va), pairwise_cosine_distances(vb), method)


# ------------------------------------------------------------------ traces

def trace_record(index: int, message, chars, visual, sender, receiver) -> dict:
    return {"index": int(index), "message": [int(s) for s in message], "chars": sorted(int(c) for c in chars),
            "visual": [float(v) for v in visual], "sender": [float(v) for v in sender],
            "receiver": [float(v) for v in receiver]}


def write_trace(path, records, vocab_size: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"vocab_size": vocab_size}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_trace(path) -> tuple[int, list[dict]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty trace dump", offset=0)
    try:
        head = json.loads(lines[0])
        vocab = int(head["vocab_size"])
        records = [json.loads(line) for line in lines[1:] if line.strip()]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed trace dump ({exc})") from None
    return vocab, records


def collect_spaces(records, vocab_size: int) -> tuple[dict[str, RepresentationSpace], MessageCorpus]:
    """Aligned visual/sender/receiver spaces plus the message corpus."""
    if isinstance(records, (str, Path)):
        vocab_size, records = read_trace(records)
    ids = [r.get("index") for r in records]
    if any(i is None for i in ids) or len(set(ids)) != len(ids):
        raise FormatError("trace ids are missing or duplicated")
    spaces = {}
    for tap in TAPS:
        try:
            vecs = [r[tap] for r in records]
        except KeyError:
            raise FormatError(f"trace records lack the {tap!r} tap") from None
        if len({len(v) for v in vecs}) > 1:
            raise FormatError(f"{tap!r} vectors differ in dimension across samples")
        arr = np.array(vecs, dtype=np.float64).reshape(len(records), -1)
        spaces[tap] = RepresentationSpace(tuple(ids), arr)
    lengths = {len(r["message"]) for r in records}
    if len(lengths) > 1:
        raise FormatError("messages differ in length")
    msgs = np.array([r["message"] for r in records], dtype=np.int64).reshape(len(records), -1)
    corpus = MessageCorpus(tuple(ids), msgs, tuple(frozenset(r["chars"]) for r in records), vocab_size)
    return spaces, corpus


# ------------------------------------------------------------------ probes

def one_hot_messages(messages, vocab_size: int) -> np.ndarray:
    """Concatenated one-hot blocks, shape (n, L * vocab_size)."""
    messages = np.asarray(messages, dtype=np.int64)
    n, L = messages.shape
    out = np.zeros((n, L * vocab_size))
    rows = np.repeat(np.arange(n), L)
    cols = (np.arange(L) * vocab_size + messages).reshape(-1)
    out[rows, cols] = 1.0
    return out


def presence_labels(char_sets) -> np.ndarray:
    out = np.zeros((len(char_sets), NUM_CHARS), dtype=bool)
    for i, cs in enumerate(char_sets):
        out[i, sorted(cs)] = True
    return out


def recall_at_k(activations, present, k: int) -> tuple[float, float]:
    """Mean hits/k and mean hits/min(k, N) over samples.

    ``present`` is a boolean (n, chars) matrix; ties among activations go to
    the lowest character id.
    """
    act = np.asarray(activations, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    if k < 1 or k > act.shape[1]:
        raise ContractError(f"k must be in [1, {act.shape[1]}], got {k}")
    top = np.argsort(-act, axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(present, top, axis=1).sum(axis=1)
    sizes = present.sum(axis=1)
    denom = np.minimum(k, np.maximum(sizes, 1))
    return float(np.mean(hits / k)), float(np.mean(hits / denom))


@dataclass
class ProbeModel:
    weight: np.ndarray       # (input_dim, chars)
    bias: np.ndarray         # (chars,)
    hidden: tuple[np.ndarray, np.ndarray] | None = None

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.hidden is not None:
            x = np.maximum(x @ self.hidden[0] + self.hidden[1], 0)
        return x @ self.weight + self.bias

    def predict(self, x) -> np.ndarray:
        z = self.logits(x)
        return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ProbeResult:
    model: ProbeModel
    recall: dict[int, tuple[float, float]]
    excluded: list[int]
    test_index: np.ndarray
    test_outputs: np.ndarray = field(repr=False)


def train_probe(inputs, present, seed: int = 0, epochs: int = 200, lr: float = 0.01, batch_size: int = 32,
                test_fraction: float = 0.2, ks=range(1, 6), hidden: int | None = None) -> ProbeResult:
    """Per-character sigmoid probe trained with BCE and Adam.

    Inputs are standardised with training-set statistics. Characters that are
    always or never present in the training labels are dropped from the
    recall computation with a warning. ``hidden`` switches to a one-hidden-
    layer probe.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(present, dtype=bool)
    n = len(x)
    if n < 5:
        raise ContractError("probe training needs at least 5 samples")
    rng = np.random.default_rng([seed, 0x9B0B])
    order = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0)
    sd[sd == 0] = 1.0
    xs = (x - mu) / sd

    d, C = x.shape[1], y.shape[1]
    params = {}
    if hidden:
        params["h.w"] = ad.parameter(ad.uniform_init(rng, (d, hidden), d, np.float64), dtype=np.float64)
        params["h.b"] = ad.parameter(np.zeros(hidden), dtype=np.float64)
        d = hidden
    params["w"] = ad.parameter(np.zeros((d, C)), dtype=np.float64)
    params["b"] = ad.parameter(np.zeros(C), dtype=np.float64)
    opt = Adam(lr=lr)
    yf = y.astype(np.float64)
    for _ in range(epochs):
        perm = rng.permutation(train_idx)
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            with ad.Tape() as tape:
                h = ad.Tensor(xs[idx])
                if hidden:
                    h = ad.relu(ad.linear(h, params["h.w"], params["h.b"]))
                z = ad.linear(h, params["w"], params["b"])
                loss = binary_cross_entropy_with_logits(z, yf[idx])
            for p in params.values():
                p.grad = None
            ad.backward(loss, tape)
            opt.step(params)

    hid = None
    if hidden:
        w1 = params["h.w"].data / sd[:, None]
        hid = (w1, params["h.b"].data - mu @ w1)
        model = ProbeModel(params["w"].data.copy(), params["b"].data.copy(), hid)
    else:
        w = params["w"].data / sd[:, None]
        model = ProbeModel(w, params["b"].data - mu @ w)
    out = model.predict(x[test_idx])

    freq = y[train_idx].mean(axis=0)
    excluded = [c for c in range(C) if freq[c] in (0.0, 1.0)]
    if excluded:
        log.warning("probe: characters %s are always or never present; excluded from recall", excluded)
    keep = [c for c in range(C) if c not in excluded]
    recall = {}
    for k in ks:
        if k <= len(keep):
            recall[k] = recall_at_k(out[:, keep], y[test_idx][:, keep], k)
    return ProbeResult(model, recall, excluded, test_idx, out)


def recall_chance(N: int, k: int, chars: int = NUM_CHARS) -> tuple[float, float]:
    """Mean and per-sample std of hits/k when the top-k set is independent of the labels."""
    p = N / chars
    var_hits = k * p * (1 - p) * (chars - k) / (chars - 1)
    return p, math.sqrt(var_hits) / k


# ------------------------------------------------------------- message stats

@dataclass
class MessageStats:
    unigrams: Counter
    total: int
    dominance: float
    top_symbol: int
    repeats: int
    repeat_rate: float
    repeats_per_message: float
    bigrams: Counter
    pmi: dict[tuple[int, int], float]


def message_stats(messages, vocab_size: int | None = None) -> MessageStats:
    """Unigram dominance, immediate repeats, adjacent bigrams with add-1 PMI.

    PMI uses the add-1 smoothed joint over all |V|^2 bigrams and that joint's
    own marginals.
    """
    if isinstance(messages, MessageCorpus):
        vocab_size = messages.vocab_size if vocab_size is None else vocab_size
        messages = messages.messages
    msgs = [list(map(int, m)) for m in messages]
    if not msgs:
        raise ContractError("message_stats needs a non-empty corpus")
    if vocab_size is None:
        vocab_size = max(max(m) for m in msgs if m) + 1
    unigrams = Counter(s for m in msgs for s in m)
    total = sum(unigrams.values())
    top_symbol, top_count = min(unigrams.items(), key=lambda kv: (-kv[1], kv[0]))
    bigrams = Counter((a, b) for m in msgs for a, b in zip(m, m[1:]))
    n_pairs = sum(bigrams.values())
    repeats = sum(c for (a, b), c in bigrams.items() if a == b)

    V = vocab_size
    joint_total = n_pairs + V * V
    left = Counter()
    right = Counter()
    for (a, b), c in bigrams.items():
        left[a] += c
        right[b] += c
    pmi = {}
    for (a, b), c in bigrams.items():
        p_ab = (c + 1) / joint_total
        p_a = (left[a] + V) / joint_total
        p_b = (right[b] + V) / joint_total
        pmi[(a, b)] = math.log(p_ab / (p_a * p_b))
    return MessageStats(unigrams, total, top_count / total, top_symbol, repeats,
                        repeats / n_pairs if n_pairs else 0.0, repeats / len(msgs), bigrams, pmi)


# -------------------------------------------------------------------- svg

def svg_bar_chart(title: str, labels, values, y_max: float = 1.0, width: int = 480, height: int = 300) -> str:
    """Minimal self-contained SVG bar chart."""
    labels = [str(v) for v in labels]
    values = [float(v) for v in values]
    left, bottom, top = 50, 40, 30
    plot_w = width - left - 20
    plot_h = height - bottom - top
    bar_w = plot_w / max(1, len(values))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
             f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>']
    lo = min(0.0, min(values, default=0.0))
    span = (y_max - lo) or 1.0
    zero_y = top + plot_h * (y_max / span)
    for i, (lab, val) in enumerate(zip(labels, values)):
        h = plot_h * (abs(val) / span)
        x = left + i * bar_w + bar_w * 0.15
        y = zero_y - h if val >= 0 else zero_y
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w * 0.7:.1f}" height="{h:.1f}" fill="#4c72b0"/>')
        parts.append(f'<text x="{x + bar_w * 0.35:.1f}" y="{top + plot_h + 14}" text-anchor="middle">{escape(lab)}</text>')
        parts.append(f'<text x="{x + bar_w * 0.35:.1f}" y="{y - 3:.1f}" text-anchor="middle">{val:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
