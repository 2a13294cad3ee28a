"""Episode protocols for the referential and visual-question-answering games."""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agents as ag
from .autodiff import Tensor, no_grad
from .datasets import ReferentialTuple, VqaSample, render
from .errors import ConfigError, ContractError

GAME_KINDS = ("referential", "vqa", "vqa_baseline")


@dataclass(frozen=True)
class GameConfig:
    kind: str = "referential"
    agents: int = 2
    distractors: int = 2
    char_count: int = 2
    channel: ag.ChannelConfig = field(default_factory=ag.ChannelConfig)
    arch: ag.ArchConfig = field(default_factory=ag.ArchConfig)
    split_k: int = 8

    def __post_init__(self):
        if self.kind not in GAME_KINDS:
            raise ConfigError(f"game kind must be one of {GAME_KINDS}, got {self.kind!r}")
        if self.agents != 2:
            raise ConfigError("only two-agent populations are supported")
        if self.kind == "referential" and self.distractors < 1:
            raise ConfigError("the referential game needs at least one distractor")

    @property
    def candidates(self) -> int:
        return self.distractors + 1


@dataclass
class RepresentationTrace:
    visual_features: np.ndarray
    sender_hidden: np.ndarray
    receiver_hidden: np.ndarray


@dataclass
class EpisodeBatch:
    """Outcome of a batch of episodes; index ``i`` is one episode."""

    rewards: np.ndarray                  # (n,) in {0, 1}
    outputs: np.ndarray                  # chosen index (referential) or answer (vqa)
    truth: np.ndarray                    # target index j, or boolean label
    message: ag.Message | None
    scores: Tensor | None = None         # (n, C) receiver scores
    logits: Tensor | None = None         # (n,) answerer logits
    trace: RepresentationTrace | None = None

    def __len__(self):
        return len(self.rewards)

    def episode(self, i: int) -> "EpisodeOutcome":
        trace = None
        if self.trace is not None:
            trace = RepresentationTrace(self.trace.visual_features[i], self.trace.sender_hidden[i],
                                        self.trace.receiver_hidden[i])
        symbols = self.message.symbols[i] if self.message is not None else None
        return EpisodeOutcome(int(self.rewards[i]), self.outputs[i].item(), symbols, trace)


@dataclass
class EpisodeOutcome:
    reward: int
    output: int | bool
    message: np.ndarray | None
    trace: RepresentationTrace | None = None


ReceiverPolicy = Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


def _render_all(scenes) -> np.ndarray:
    return np.stack([render(s) for s in scenes])


def referential_images(tuples: Sequence[ReferentialTuple]) -> np.ndarray:
    """uint8 (n, D+2, 64, 64, 3) in record order: original, target, distractors."""
    return np.stack([_render_all(t.scenes) for t in tuples])


def arrange_candidates(images: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """Insert each target at a uniform position among its distractors.

    ``images`` is the record layout (n, D+2, ...). Returns candidates
    (n, D+1, ...) and the target positions.
    """
    n, per = images.shape[:2]
    C = per - 1
    positions = rng.integers(C, size=n)
    cands = np.empty((n, C, *images.shape[2:]), dtype=images.dtype)
    for i in range(n):
        order = list(range(2, per))
        order.insert(int(positions[i]), 1)
        cands[i] = images[i, order]
    return cands, positions


def play_referential_batch(images: np.ndarray, sender: ag.Agent, receiver, mode: str, rng,
                           trace: bool = False) -> EpisodeBatch:
    """Run one episode per record of ``images`` (record layout).

    ``receiver`` is an :class:`~emergelab.agents.Agent` or a policy callable
    ``(symbols, candidates, rng) -> choices``; either way it only ever gets
    the message and the shuffled candidates.
    """
    candidates, positions = arrange_candidates(images, rng)
    visual, emb = ag.encode_image(images[:, 0], sender.params)
    msg = ag.sender_emit(emb, sender.channel, mode, rng, sender.params)
    scores = None
    if isinstance(receiver, ag.Agent):
        out = ag.receiver_choose(msg.symbols, candidates, receiver.params, receiver.channel.vocab_size)
        scores, choices, r_hidden = out.scores, out.choice, out.hidden.data
    else:
        choices = np.asarray(receiver(msg.symbols, candidates, rng), dtype=np.int64)
        r_hidden = None
    rewards = (choices == positions).astype(np.int64)
    tr = None
    if trace:
        tr = RepresentationTrace(visual.data.copy(), msg.hidden.data.copy(),
                                 None if r_hidden is None else r_hidden.copy())
    return EpisodeBatch(rewards, choices, positions, msg, scores=scores, trace=tr)


def play_referential(tup: ReferentialTuple, sender: ag.Agent, receiver, mode: str, rng,
                     trace: bool = False) -> EpisodeOutcome:
    return play_referential_batch(referential_images([tup]), sender, receiver, mode, rng, trace).episode(0)


def vqa_inputs(samples: Sequence[VqaSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = _render_all([s.scene for s in samples])
    return images, ag.questions_to_ids([s.question for s in samples]), np.array([s.label for s in samples])


def play_vqa_batch(images: np.ndarray, question_ids: np.ndarray, labels: np.ndarray,
                   sender: ag.Agent | None, receiver: ag.Agent, mode: str, rng,
                   trace: bool = False) -> EpisodeBatch:
    """Sender sees the image; the receiver sees message and question only.

    With ``receiver.role == "baseline"`` there is no channel: the single
    agent answers from its own image embedding.
    """
    labels = np.asarray(labels, dtype=bool)
    msg = None
    visual = r_hidden = None
    if receiver.role == "baseline":
        visual, comm = ag.encode_image(images, receiver.params)
    else:
        if sender is None:
            raise ContractError("the multi-agent VQA game needs a sender")
        visual, emb = ag.encode_image(images, sender.params)
        msg = ag.sender_emit(emb, sender.channel, mode, rng, sender.params)
        r_hidden, comm = ag.read_message(msg.symbols, receiver.params, receiver.channel.vocab_size)
    logit, prob = ag.vqa_answer(comm, question_ids, receiver.params)
    answers = prob.data > 0.5
    rewards = (answers == labels).astype(np.int64)
    tr = None
    if trace and msg is not None:
        tr = RepresentationTrace(visual.data.copy(), msg.hidden.data.copy(), r_hidden.data.copy())
    return EpisodeBatch(rewards, answers, labels, msg, logits=logit, trace=tr)


def play_vqa(sample: VqaSample, sender, receiver, mode: str, rng, trace: bool = False) -> EpisodeOutcome:
    images, qids, labels = vqa_inputs([sample])
    return play_vqa_batch(images, qids, labels, sender, receiver, mode, rng, trace).episode(0)


# ------------------------------------------------------------- evaluation

@dataclass
class Evaluation:
    accuracy: float
    count: int
    breakdown: dict[str, float]
    rewards: np.ndarray
    batches: list[EpisodeBatch] = field(default_factory=list, repr=False)


def accuracy(rewards) -> float:
    rewards = np.asarray(rewards)
    if rewards.size == 0:
        raise ContractError("cannot evaluate an empty dataset")
    return float(rewards.mean())


def evaluate(conditions: dict[str, dict], sender, receiver, game: GameConfig, seed: int = 0,
             mode: str = "greedy", batch_size: int = 64, trace: bool = False) -> Evaluation:
    """Mean reward over every condition plus per-condition accuracy.

    ``conditions`` maps a condition name (a char-count label for the
    referential game, ``train``/``test`` for VQA) to a dict of arrays: for
    referential ``{"images": (n, D+2, 64, 64, 3)}``, for VQA
    ``{"images", "questions", "labels"}``. Candidate order is drawn from a
    fixed stream so repeated evaluations agree exactly.
    """
    if not conditions or all(_condition_size(c) == 0 for c in conditions.values()):
        raise ContractError("cannot evaluate an empty dataset")
    all_rewards, breakdown, kept = [], {}, []
    with no_grad():
        for ci, (name, cond) in enumerate(conditions.items()):
            n = _condition_size(cond)
            if n == 0:
                continue
            rng = np.random.default_rng([seed, 0xE7A1, ci])
            rewards = []
            for start in range(0, n, batch_size):
                sl = slice(start, start + batch_size)
                if game.kind == "referential":
                    b = play_referential_batch(cond["images"][sl], sender, receiver, mode, rng, trace)
                else:
                    b = play_vqa_batch(cond["images"][sl], cond["questions"][sl], cond["labels"][sl],
                                       sender, receiver, mode, rng, trace)
                rewards.append(b.rewards)
                if trace:
                    kept.append(b)
            r = np.concatenate(rewards)
            breakdown[name] = accuracy(r)
            all_rewards.append(r)
    r = np.concatenate(all_rewards)
    return Evaluation(accuracy(r), int(r.size), breakdown, r, kept)


def _condition_size(cond) -> int:
    return len(cond["images"])


def write_episode_log(path, batch: EpisodeBatch, seed: int, start_index: int = 0, taps: bool = False) -> None:
    """Append JSONL episode records (index, seed, message, choice, reward)."""
    with open(Path(path), "a", encoding="utf-8") as fh:
        for i in range(len(batch)):
            rec = {"episode": start_index + i, "seed": seed,
                   "message": [] if batch.message is None else batch.message.symbols[i].tolist(),
                   "choice": batch.outputs[i].item(), "reward": int(batch.rewards[i])}
            if taps and batch.trace is not None:
                rec["visual"] = batch.trace.visual_features[i].tolist()
                rec["sender"] = batch.trace.sender_hidden[i].tolist()
                rec["receiver"] = batch.trace.receiver_hidden[i].tolist()
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
