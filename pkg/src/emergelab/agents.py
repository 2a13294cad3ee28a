"""Sender, Receiver and baseline answerer networks.

All forward functions are batched over a leading axis and take an explicit
parameter mapping ``name -> Tensor``. Representation taps:

* ``visual_features``: flattened output of the last conv layer (the
  sender's CNN, 4*4*channels[-1] wide)
* ``sender_hidden``: final hidden state of the sender LSTM
* ``receiver_hidden``: final hidden state of the receiver's message LSTM
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import CANVAS, Question, Relation
from .errors import ConfigError, ContractError, DimensionError, VocabularyError
from .font import ALPHABET


@dataclass(frozen=True)
class ChannelConfig:
    vocab_size: int = 50
    message_length: int = 15

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.message_length < 1:
            raise ConfigError(f"message_length must be >= 1, got {self.message_length}")


@dataclass(frozen=True)
class ArchConfig:
    channels: tuple[int, ...] = (16, 32, 32, 32)
    feature_dim: int = 128
    hidden: int = 128
    symbol_embed: int = 32
    mlp_hidden: int = 64

    @property
    def visual_dim(self) -> int:
        size = CANVAS
        for _ in self.channels:
            size = ad.conv_output_size(size, 2)
        return size * size * self.channels[-1]


QUESTION_VOCAB = (*ALPHABET, *(r.name for r in Relation), "<bos>", "<eos>")
_QUESTION_INDEX = {tok: i for i, tok in enumerate(QUESTION_VOCAB)}


def question_tokens(q: Question) -> list[str]:
    return ["<bos>", ALPHABET[q.lhs], q.relation.name, ALPHABET[q.rhs], "<eos>"]


def encode_tokens(tokens) -> list[int]:
    out = []
    for tok in tokens:
        if isinstance(tok, (int, np.integer)):
            if not 0 <= tok < len(QUESTION_VOCAB):
                raise VocabularyError(f"question token id {tok} outside vocabulary of {len(QUESTION_VOCAB)}")
            out.append(int(tok))
        elif tok in _QUESTION_INDEX:
            out.append(_QUESTION_INDEX[tok])
        else:
            raise VocabularyError(f"unknown question token {tok!r}")
    return out


@dataclass
class Agent:
    """Parameters of one agent plus the configs that shaped them."""

    role: str
    params: dict[str, Tensor]
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)

    def tensors(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in arrays:
                raise DimensionError(f"checkpoint lacks parameter {name!r}")
            arr = arrays[name]
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)


# ---------------------------------------------------------------- init

def _add_linear(params, rng, name, fan_in, fan_out, dtype):
    params[f"{name}.w"] = ad.parameter(ad.uniform_init(rng, (fan_in, fan_out), fan_in, dtype), f"{name}.w", dtype)
    params[f"{name}.b"] = ad.parameter(np.zeros(fan_out), f"{name}.b", dtype)


def _add_cnn(params, rng, arch: ArchConfig, dtype, prefix="cnn"):
    c_in = 3
    for i, c_out in enumerate(arch.channels):
        fan_in = c_in * 9
        params[f"{prefix}.conv{i}.w"] = ad.parameter(
            ad.uniform_init(rng, (c_out, c_in, 3, 3), fan_in, dtype), f"{prefix}.conv{i}.w", dtype)
        params[f"{prefix}.conv{i}.b"] = ad.parameter(np.zeros(c_out), f"{prefix}.conv{i}.b", dtype)
        c_in = c_out
    _add_linear(params, rng, f"{prefix}.proj", arch.visual_dim, arch.feature_dim, dtype)


def _add_lstm(params, rng, name, d, u, dtype):
    params[f"{name}.w_x"] = ad.parameter(ad.uniform_init(rng, (d, 4 * u), d, dtype), f"{name}.w_x", dtype)
    params[f"{name}.w_h"] = ad.parameter(ad.uniform_init(rng, (u, 4 * u), u, dtype), f"{name}.w_h", dtype)
    b = np.zeros(4 * u)
    b[u:2 * u] = 1.0  # forget gate
    params[f"{name}.b"] = ad.parameter(b, f"{name}.b", dtype)


def _add_embedding(params, rng, name, rows, dim, dtype):
    params[name] = ad.parameter(ad.uniform_init(rng, (rows, dim), dim, dtype), name, dtype)


def init_sender(rng, channel=ChannelConfig(), arch=ArchConfig(), dtype=np.float32) -> Agent:
    p: dict[str, Tensor] = {}
    _add_cnn(p, rng, arch, dtype)
    _add_linear(p, rng, "init", arch.feature_dim, arch.hidden, dtype)
    _add_embedding(p, rng, "embed", channel.vocab_size + 1, arch.symbol_embed, dtype)  # last row = BOS
    _add_lstm(p, rng, "lstm", arch.symbol_embed, arch.hidden, dtype)
    _add_linear(p, rng, "out", arch.hidden, channel.vocab_size, dtype)
    return Agent("sender", p, channel, arch)


def _add_message_reader(p, rng, channel, arch, dtype):
    _add_embedding(p, rng, "embed", channel.vocab_size, arch.symbol_embed, dtype)
    _add_lstm(p, rng, "lstm", arch.symbol_embed, arch.hidden, dtype)
    _add_linear(p, rng, "comm", arch.hidden, arch.feature_dim, dtype)


def _add_answerer(p, rng, arch, dtype, zero_final):
    _add_embedding(p, rng, "q_embed", len(QUESTION_VOCAB), arch.symbol_embed, dtype)
    _add_lstm(p, rng, "q_lstm", arch.symbol_embed, arch.hidden, dtype)
    _add_linear(p, rng, "film", arch.hidden, 2 * arch.feature_dim, dtype)
    _add_linear(p, rng, "mlp1", arch.feature_dim, arch.mlp_hidden, dtype)
    _add_linear(p, rng, "mlp2", arch.mlp_hidden, 1, dtype)
    if zero_final:
        p["mlp2.w"].data[...] = 0


def init_receiver(rng, channel=ChannelConfig(), arch=ArchConfig(), dtype=np.float32) -> Agent:
    """Referential-game receiver: message reader plus its own candidate CNN."""
    p: dict[str, Tensor] = {}
    _add_message_reader(p, rng, channel, arch, dtype)
    _add_cnn(p, rng, arch, dtype)
    return Agent("receiver", p, channel, arch)


def init_vqa_receiver(rng, channel=ChannelConfig(), arch=ArchConfig(), dtype=np.float32,
                      zero_final=False) -> Agent:
    p: dict[str, Tensor] = {}
    _add_message_reader(p, rng, channel, arch, dtype)
    _add_answerer(p, rng, arch, dtype, zero_final)
    return Agent("vqa_receiver", p, channel, arch)


def init_baseline(rng, arch=ArchConfig(), dtype=np.float32, zero_final=False) -> Agent:
    """Single agent answering from its own image embedding."""
    p: dict[str, Tensor] = {}
    _add_cnn(p, rng, arch, dtype)
    _add_answerer(p, rng, arch, dtype, zero_final)
    return Agent("baseline", p, ChannelConfig(), arch)


# ------------------------------------------------------------- forward

def image_batch(images, dtype=np.float32) -> np.ndarray:
    """uint8 (n, 64, 64, 3) -> float (n, 3, 64, 64) scaled to [0, 1]."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (CANVAS, CANVAS, 3):
        raise DimensionError(f"expected images of shape (n, {CANVAS}, {CANVAS}, 3), got {images.shape}")
    return images.transpose(0, 3, 1, 2).astype(dtype) * np.asarray(1.0 / 255.0, dtype=dtype)


def encode_image(images, params, prefix="cnn") -> tuple[Tensor, Tensor]:
    """Returns ``(visual_features, embedding)`` for a batch of images.

    ``images`` is uint8 (n, 64, 64, 3) or already scaled float (n, 3, 64, 64).
    """
    dtype = params[f"{prefix}.proj.w"].dtype
    arr = np.asarray(images)
    if arr.ndim == 4 and arr.shape[1] == 3 and arr.shape[2:] == (CANVAS, CANVAS) and arr.dtype != np.uint8:
        x = Tensor(arr.astype(dtype, copy=False))
    else:
        x = Tensor(image_batch(arr, dtype))
    i = 0
    while f"{prefix}.conv{i}.w" in params:
        x = ad.relu(ad.conv2d(x, params[f"{prefix}.conv{i}.w"], 2, params[f"{prefix}.conv{i}.b"]))
        i += 1
    visual = ad.reshape(x, (x.shape[0], -1))
    emb = ad.linear(visual, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    return visual, emb


def _lstm_params(params, name):
    return {"w_x": params[f"{name}.w_x"], "w_h": params[f"{name}.w_h"], "b": params[f"{name}.b"]}


@dataclass
class Message:
    """A batch of messages with the per-step policy statistics."""

    symbols: np.ndarray       # (n, L) int
    log_probs: Tensor         # (n, L) log-probability of each emitted symbol
    entropies: Tensor         # (n, L) policy entropy at each step
    logits: list[np.ndarray]  # L arrays of shape (n, |V|)
    hidden: Tensor            # (n, hidden) final sender state

    def __len__(self):
        return self.symbols.shape[1]


def sender_emit(embedding: Tensor, cfg: ChannelConfig, mode: str, rng, params, symbols=None) -> Message:
    """Unroll the sender LSTM for ``cfg.message_length`` steps.

    ``mode`` is ``"sample"`` (needs ``rng``), ``"greedy"`` (argmax, lowest
    id on ties) or ``"forced"`` (re-score the given ``symbols``).
    """
    if mode == "sample" and rng is None:
        raise ContractError("sample mode needs an rng")
    if mode == "forced" and symbols is None:
        raise ContractError("forced mode needs symbols")
    if mode not in ("sample", "greedy", "forced"):
        raise ContractError(f"unknown decoding mode {mode!r}")
    n = embedding.shape[0]
    V = cfg.vocab_size
    lstm = _lstm_params(params, "lstm")
    h = ad.linear(embedding, params["init.w"], params["init.b"])
    c = Tensor(np.zeros(h.shape, dtype=h.dtype))
    prev = np.full(n, V, dtype=np.int64)  # BOS row
    out_syms = np.zeros((n, cfg.message_length), dtype=np.int64)
    logps, ents, logits_log = [], [], []
    for t in range(cfg.message_length):
        x = ad.embedding(prev, params["embed"])
        h, c = ad.lstm_cell(x, h, c, lstm)
        logits = ad.linear(h, params["out.w"], params["out.b"])
        logp = ad.log_softmax(logits)
        probs = np.exp(logp.data.astype(np.float64))
        if mode == "greedy":
            sym = np.argmax(logits.data, axis=1)
        elif mode == "sample":
            u = rng.random(n)
            cdf = np.cumsum(probs, axis=1)
            sym = np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=1), V - 1)
        else:
            sym = np.asarray(symbols, dtype=np.int64)[:, t]
        out_syms[:, t] = sym
        logps.append(ad.pick(logp, sym))
        ents.append(-ad.tsum(ad.exp(logp) * logp, axis=1))
        logits_log.append(logits.data.copy())
        prev = sym
    return Message(out_syms, ad.stack(logps, axis=1), ad.stack(ents, axis=1), logits_log, h)


def read_message(symbols, params, vocab_size: int) -> tuple[Tensor, Tensor]:
    """Receiver LSTM over the message; returns ``(final_hidden, comm_vector)``."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.ndim == 1:
        symbols = symbols[None]
    if symbols.size and (symbols.min() < 0 or symbols.max() >= vocab_size):
        raise ContractError(f"message symbols must lie in [0, {vocab_size})")
    lstm = _lstm_params(params, "lstm")
    n = symbols.shape[0]
    u = params["lstm.w_h"].shape[0]
    dtype = params["lstm.w_h"].dtype
    h = Tensor(np.zeros((n, u), dtype=dtype))
    c = Tensor(np.zeros((n, u), dtype=dtype))
    for t in range(symbols.shape[1]):
        x = ad.embedding(symbols[:, t], params["embed"])
        h, c = ad.lstm_cell(x, h, c, lstm)
    return h, ad.linear(h, params["comm.w"], params["comm.b"])


@dataclass
class ReceiverOutput:
    scores: Tensor            # (n, C)
    choice: np.ndarray        # (n,)
    hidden: Tensor            # receiver_hidden tap


def receiver_choose(symbols, candidates, params, vocab_size: int) -> ReceiverOutput:
    """Score each candidate image by its dot product with the message vector.

    ``candidates`` is uint8 (n, C, 64, 64, 3). The original image is never an
    input here.
    """
    candidates = np.asarray(candidates)
    if candidates.ndim == 4:
        candidates = candidates[None]
    if candidates.ndim != 5 or candidates.shape[1] == 0:
        raise ContractError("receiver_choose needs a non-empty candidate list")
    n, C = candidates.shape[:2]
    hidden, g = read_message(symbols, params, vocab_size)
    _, emb = encode_image(candidates.reshape(n * C, *candidates.shape[2:]), params)
    e = ad.reshape(emb, (n, C, emb.shape[1]))
    scores = ad.batched_dot(g, e)
    return ReceiverOutput(scores, np.argmax(scores.data, axis=1), hidden)


def film(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    if not (x.shape == gamma.shape == beta.shape):
        raise DimensionError(f"film shapes differ: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    return x * gamma + beta


def vqa_answer(comm_vector: Tensor, questions, params) -> tuple[Tensor, Tensor]:
    """FiLM-conditioned answerer; returns ``(logit, probability_true)``, each (n,).

    ``questions`` is a batch of token lists (strings or ids) or an int array.
    """
    if isinstance(questions, np.ndarray):
        ids = questions.astype(np.int64)
        encode_tokens(ids.reshape(-1).tolist())
    else:
        ids = np.array([encode_tokens(q) for q in questions], dtype=np.int64)
    n = ids.shape[0]
    if comm_vector.shape[0] != n:
        raise DimensionError(f"{comm_vector.shape[0]} comm vectors for {n} questions")
    u = params["q_lstm.w_h"].shape[0]
    dtype = params["q_lstm.w_h"].dtype
    lstm = _lstm_params(params, "q_lstm")
    h = Tensor(np.zeros((n, u), dtype=dtype))
    c = Tensor(np.zeros((n, u), dtype=dtype))
    for t in range(ids.shape[1]):
        h, c = ad.lstm_cell(ad.embedding(ids[:, t], params["q_embed"]), h, c, lstm)
    gb = ad.linear(h, params["film.w"], params["film.b"])
    d = comm_vector.shape[1]
    mod = film(comm_vector, gb[:, :d], gb[:, d:])
    hid = ad.relu(ad.linear(mod, params["mlp1.w"], params["mlp1.b"]))
    logit = ad.reshape(ad.linear(hid, params["mlp2.w"], params["mlp2.b"]), (n,))
    return logit, ad.sigmoid(logit)


def questions_to_ids(questions) -> np.ndarray:
    return np.array([encode_tokens(question_tokens(q)) for q in questions], dtype=np.int64)
