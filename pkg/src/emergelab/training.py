"""Losses, the REINFORCE sender objective, Adam, and the training loop."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agents as ag
from . import autodiff as ad
from . import games
from .autodiff import Tensor
from .errors import ConfigError, ContractError, TrainingError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
METRICS_HEADER = ("step", "split", "accuracy", "receiver_loss", "sender_loss", "entropy", "baseline")


# ------------------------------------------------------------------ losses

def cross_entropy(scores: Tensor, target) -> Tensor:
    """Mean softmax cross-entropy of ``scores`` (n, C) against indices (n,)."""
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    C = scores.shape[-1]
    if target.size and (target.min() < 0 or target.max() >= C):
        raise ContractError(f"target index out of range for {C} candidates: {target.tolist()}")
    if scores.ndim == 1:
        scores = ad.reshape(scores, (1, C))
    return -ad.mean(ad.pick(ad.log_softmax(scores), target))


def binary_cross_entropy(prob: Tensor, label) -> Tensor:
    """Mean BCE of probabilities, floored at 1e-7 before the log."""
    y = np.asarray(label, dtype=prob.dtype).reshape(prob.shape)
    p = ad.clip(prob, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -ad.mean(ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y))


def binary_cross_entropy_with_logits(logit: Tensor, label) -> Tensor:
    """Mean BCE from logits: softplus(z) - y*z, stable for any z."""
    y = np.asarray(label, dtype=logit.dtype).reshape(logit.shape)
    return ad.mean(ad.softplus(logit) - logit * y)


def receiver_loss(batch: games.EpisodeBatch) -> Tensor:
    if batch.scores is not None:
        return cross_entropy(batch.scores, batch.truth)
    if batch.logits is not None:
        return binary_cross_entropy_with_logits(batch.logits, batch.truth)
    raise ContractError("episode batch carries neither scores nor logits")


@dataclass
class RewardBaseline:
    value: float = 0.0
    decay: float = 0.99

    def update(self, rewards) -> float:
        for r in np.atleast_1d(rewards):
            self.value = self.decay * self.value + (1.0 - self.decay) * float(r)
        return self.value


def sender_loss(msg: ag.Message, reward, baseline: RewardBaseline, entropy_coef: float,
                update: bool = True) -> Tensor:
    """-(r - b) * sum_t log pi(m_t) - entropy_coef * sum_t H_t, batch mean.

    The baseline is read before and updated after the loss is formed.
    """
    reward = np.atleast_1d(np.asarray(reward, dtype=msg.log_probs.dtype))
    advantage = (reward - np.asarray(baseline.value, dtype=reward.dtype)).reshape(-1)
    logp = ad.tsum(msg.log_probs, axis=1)
    ent = ad.tsum(msg.entropies, axis=1)
    loss = -ad.mean(logp * advantage) - ad.mean(ent) * entropy_coef
    if update:
        baseline.update(reward)
    return loss


# --------------------------------------------------------------------- adam

@dataclass
class Adam:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> None:
        """One bias-corrected update using each parameter's ``.grad``."""
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)
            p.data = p.data - update

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, prefix: str, params, step: int) -> None:
        self.step_count = step
        for name, p in params.items():
            key = f"{prefix}.m.{name}"
            if key in arrays:
                self.m[name] = np.array(arrays[key], dtype=p.dtype)
                self.v[name] = np.array(arrays[f"{prefix}.v.{name}"], dtype=p.dtype)


def adam_step(params: dict[str, Tensor], state: Adam) -> Adam:
    state.step(params)
    return state


# ------------------------------------------------------------------ configs

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    entropy_coef: float = 0.01
    baseline_decay: float = 0.99
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.eval_every < 1:
            raise ConfigError("epochs must be >= 0; batch_size, lr and eval_every must be positive")
        if self.entropy_coef < 0:
            raise ConfigError("entropy_coef must be >= 0")
        if not 0 < self.baseline_decay < 1:
            raise ConfigError("baseline_decay must lie in (0, 1)")


def build_agents(game: games.GameConfig, seed: int, dtype=np.float32):
    """Fresh ``(sender, receiver)``; sender is None for the VQA baseline."""
    if game.kind == "referential":
        return (ag.init_sender(np.random.default_rng([seed, 10]), game.channel, game.arch, dtype),
                ag.init_receiver(np.random.default_rng([seed, 11]), game.channel, game.arch, dtype))
    if game.kind == "vqa":
        return (ag.init_sender(np.random.default_rng([seed, 10]), game.channel, game.arch, dtype),
                ag.init_vqa_receiver(np.random.default_rng([seed, 11]), game.channel, game.arch, dtype))
    return None, ag.init_baseline(np.random.default_rng([seed, 12]), game.arch, dtype)


def checkpoint_arrays(sender, receiver, opt_s: Adam | None, opt_r: Adam, step: int,
                      baseline: RewardBaseline) -> dict[str, np.ndarray]:
    arrays = {}
    if sender is not None:
        arrays.update({f"sender.{k}": v for k, v in sender.state_dict().items()})
    arrays.update({f"receiver.{k}": v for k, v in receiver.state_dict().items()})
    if opt_s is not None:
        arrays.update(opt_s.state_arrays("opt.sender"))
    arrays.update(opt_r.state_arrays("opt.receiver"))
    arrays["state.step"] = np.array([step], dtype=np.float32)
    arrays["state.baseline"] = np.array([baseline.value], dtype=np.float32)
    return arrays


def _split_prefix(arrays, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}


def load_agents(arrays, game: games.GameConfig, dtype=np.float32):
    """Agents initialised from checkpoint arrays (raises DimensionError on mismatch)."""
    sender, receiver = build_agents(game, 0, dtype)
    if sender is not None:
        sender.load_state_dict(_split_prefix(arrays, "sender"))
    receiver.load_state_dict(_split_prefix(arrays, "receiver"))
    return sender, receiver


@dataclass
class RunResult:
    sender: ag.Agent | None
    receiver: ag.Agent
    step: int
    metrics_csv: str
    final: dict[str, float]
    baseline: float


def _format_row(step, split, acc, rl, sl, ent, base):
    return [str(step), split, f"{acc:.6f}", f"{rl:.6f}", f"{sl:.6f}", f"{ent:.6f}", f"{base:.6f}"]


def _batch(train, idx):
    return {k: v[idx] for k, v in train.items()}


def train_run(game: games.GameConfig, cfg: TrainConfig, train_data: dict, eval_data: dict[str, dict],
              out_dir=None, resume: dict | None = None, max_steps: int | None = None) -> RunResult:
    """Train both agents; returns final agents and the metrics CSV text.

    ``train_data`` holds arrays as in :func:`games.evaluate`. Each step
    samples episodes, sums the receiver loss and the sender's REINFORCE loss
    and takes one Adam step per agent. Batches come from a per-epoch
    permutation seeded by ``(seed, epoch)``, episode randomness from
    ``(seed, step)``, so a run resumed from a checkpoint follows the
    uninterrupted trajectory. Greedy evaluation runs every ``eval_every``
    steps and at the end. ``max_steps`` stops early (simulated interruption).
    """
    sender, receiver = build_agents(game, cfg.seed)
    opt_s = Adam(lr=cfg.lr) if sender is not None else None
    opt_r = Adam(lr=cfg.lr)
    baseline = RewardBaseline(decay=cfg.baseline_decay)
    step = 0
    if resume is not None:
        if sender is not None:
            sender.load_state_dict(_split_prefix(resume, "sender"))
        receiver.load_state_dict(_split_prefix(resume, "receiver"))
        step = int(resume["state.step"][0])
        baseline.value = float(resume["state.baseline"][0])
        if opt_s is not None:
            opt_s.load_state_arrays(resume, "opt.sender", sender.params, step)
        opt_r.load_state_arrays(resume, "opt.receiver", receiver.params, step)

    n = len(train_data["images"])
    if n == 0:
        raise ContractError("empty training set")
    per_epoch = max(1, -(-n // cfg.batch_size))
    total = cfg.epochs * per_epoch
    if max_steps is not None:
        total = min(total, max_steps)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[list[str]] = []
    if resume is not None and out_dir is not None and (out_dir / "metrics.csv").exists():
        with open(out_dir / "metrics.csv", newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh)][1:]
            rows = [r for r in rows if int(r[0]) <= step]

    window = {"rl": [], "sl": [], "ent": []}
    final: dict[str, float] = {}

    def save(path_name="checkpoint.emlb"):
        if out_dir is not None:
            ad.save_checkpoint(out_dir / path_name, checkpoint_arrays(sender, receiver, opt_s, opt_r, step, baseline))

    def run_eval():
        ev = games.evaluate(eval_data, sender, receiver, game, seed=cfg.seed)
        means = {k: (float(np.mean(v)) if v else 0.0) for k, v in window.items()}
        for split, acc in ev.breakdown.items():
            rows.append(_format_row(step, split, acc, means["rl"], means["sl"], means["ent"], baseline.value))
            final[split] = acc
        for v in window.values():
            v.clear()

    perm_epoch, perm = None, None
    while step < total:
        epoch, pos = divmod(step, per_epoch)
        if epoch != perm_epoch:
            perm = np.random.default_rng([cfg.seed, 0xEB0C, epoch]).permutation(n)
            perm_epoch = epoch
        idx = np.sort(perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size])
        rng = np.random.default_rng([cfg.seed, 0x57E9, step])
        batch = _batch(train_data, idx)
        with ad.Tape() as tape:
            if game.kind == "referential":
                out = games.play_referential_batch(batch["images"], sender, receiver, "sample", rng)
            else:
                out = games.play_vqa_batch(batch["images"], batch["questions"], batch["labels"],
                                           sender, receiver, "sample", rng)
            r_loss = receiver_loss(out)
            loss = r_loss
            s_val = ent_val = 0.0
            if out.message is not None:
                s_loss = sender_loss(out.message, out.rewards, baseline, cfg.entropy_coef)
                # float32 like every other checkpointed value, so resuming is exact
                baseline.value = float(np.float32(baseline.value))
                loss = r_loss + s_loss
                s_val = float(s_loss.data)
                ent_val = float(out.message.entropies.data.sum(axis=1).mean())
        if not np.isfinite(loss.data).all():
            save()
            raise TrainingError(f"non-finite loss at step {step}; last good checkpoint kept")
        for a in (sender, receiver):
            if a is not None:
                a.zero_grad()
        ad.backward(loss, tape)
        try:
            if sender is not None:
                opt_s.step(sender.params)
            opt_r.step(receiver.params)
        except TrainingError:
            save()
            raise
        window["rl"].append(float(r_loss.data))
        window["sl"].append(s_val)
        window["ent"].append(ent_val)
        step += 1
        if step % cfg.eval_every == 0 and step < total:
            run_eval()
            save()
            log.info("step %d %s", step, {k: round(v, 3) for k, v in final.items()})

    if total == 0 or not rows or int(rows[-1][0]) != step:
        run_eval()
    save()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    writer.writerows(rows)
    text = buf.getvalue()
    if out_dir is not None:
        (out_dir / "metrics.csv").write_text(text, encoding="utf-8")
    return RunResult(sender, receiver, step, text, final, baseline.value)
