"""SQOOP-style letter scenes, spatial questions, compositional splits and
referential tuples, plus the EMDS shard format.

Coordinates are integer pixel centres of 10x14 glyphs on a 64x64 canvas,
with y growing downward. Every random draw goes through a
``numpy.random.Generator``; :func:`sample_rng` derives an independent
stream per (seed, index) so samples can be generated in any order.
"""

from __future__ import annotations

import enum
import itertools
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, GenerationError
from .font import ALPHABET, GLYPH_HEIGHT, GLYPH_WIDTH, GLYPHS

CANVAS = 64
IMAGE_BYTES = CANVAS * CANVAS * 3
NUM_CHARS = len(ALPHABET)
MARGIN = 2
MAX_REJECTIONS = 10_000

_HALF_W = GLYPH_WIDTH // 2
_HALF_H = GLYPH_HEIGHT // 2
X_RANGE = (_HALF_W, CANVAS - GLYPH_WIDTH + _HALF_W)    # inclusive centre bounds
Y_RANGE = (_HALF_H, CANVAS - GLYPH_HEIGHT + _HALF_H)

ALL_CHARS = frozenset(range(NUM_CHARS))


class Relation(enum.IntEnum):
    LEFT_OF = 0
    RIGHT_OF = 1
    ABOVE = 2
    BELOW = 3

    @property
    def converse(self) -> "Relation":
        return _CONVERSE[self]


_CONVERSE = {
    Relation.LEFT_OF: Relation.RIGHT_OF,
    Relation.RIGHT_OF: Relation.LEFT_OF,
    Relation.ABOVE: Relation.BELOW,
    Relation.BELOW: Relation.ABOVE,
}


@dataclass(frozen=True)
class Scene:
    """Placements ``(char_id, cx, cy)`` of distinct characters."""

    placements: tuple[tuple[int, int, int], ...]

    @property
    def chars(self) -> tuple[int, ...]:
        return tuple(p[0] for p in self.placements)

    @property
    def char_set(self) -> frozenset[int]:
        return frozenset(self.chars)

    def position(self, char_id: int) -> tuple[int, int]:
        for c, x, y in self.placements:
            if c == char_id:
                return x, y
        raise ContractError(f"character {ALPHABET[char_id]} ({char_id}) is not in the scene")

    def __len__(self):
        return len(self.placements)


@dataclass(frozen=True)
class Question:
    lhs: int
    relation: Relation
    rhs: int

    def __post_init__(self):
        if self.lhs == self.rhs:
            raise ContractError("question characters must differ")

    def __str__(self):
        return f"{ALPHABET[self.lhs]} {self.relation.name} {ALPHABET[self.rhs]}"


@dataclass(frozen=True)
class VqaSample:
    scene: Scene
    question: Question
    label: bool


@dataclass(frozen=True)
class ReferentialTuple:
    original: Scene
    target: Scene
    distractors: tuple[Scene, ...]

    @property
    def scenes(self) -> tuple[Scene, ...]:
        """Original, target, then distractors: the on-disk record layout."""
        return (self.original, self.target, *self.distractors)


@dataclass(frozen=True)
class SplitSpec:
    k: int
    seed: int
    train_pairs: frozenset[tuple[int, int]]
    test_pairs: frozenset[tuple[int, int]]

    def pairs(self, partition: str) -> frozenset[tuple[int, int]]:
        if partition == "train":
            return self.train_pairs
        if partition == "test":
            return self.test_pairs
        raise ContractError(f"unknown partition {partition!r}")


def sample_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one (seed, stream...) coordinate."""
    return np.random.default_rng([int(seed), *map(int, stream)])


# ------------------------------------------------------------------ scenes

def scene_is_valid(scene: Scene) -> bool:
    chars = scene.chars
    if len(set(chars)) != len(chars) or any(not 0 <= c < NUM_CHARS for c in chars):
        return False
    xs = [p[1] for p in scene.placements]
    ys = [p[2] for p in scene.placements]
    if len(set(xs)) != len(xs) or len(set(ys)) != len(ys):
        return False
    if any(not X_RANGE[0] <= x <= X_RANGE[1] for x in xs) or any(not Y_RANGE[0] <= y <= Y_RANGE[1] for y in ys):
        return False
    return _separated(np.array(xs), np.array(ys))


def _separated(xs: np.ndarray, ys: np.ndarray) -> bool:
    dx = np.abs(xs[:, None] - xs[None, :]) >= GLYPH_WIDTH + MARGIN
    dy = np.abs(ys[:, None] - ys[None, :]) >= GLYPH_HEIGHT + MARGIN
    ok = dx | dy
    np.fill_diagonal(ok, True)
    return bool(ok.all())


def _distinct_coords(rng, lo, hi, n) -> np.ndarray:
    return rng.choice(hi - lo + 1, size=n, replace=False) + lo


def _place(chars, rng, x_rank=None, y_rank=None) -> Scene:
    n = len(chars)
    for _ in range(MAX_REJECTIONS):
        xs = _distinct_coords(rng, *X_RANGE, n)
        ys = _distinct_coords(rng, *Y_RANGE, n)
        if x_rank is not None:
            xs = np.sort(xs)[x_rank]
            ys = np.sort(ys)[y_rank]
        if _separated(xs, ys):
            return Scene(tuple((int(c), int(x), int(y)) for c, x, y in zip(chars, xs, ys)))
    raise GenerationError(f"could not place {n} glyphs after {MAX_REJECTIONS} attempts")


def generate_scene(char_count: int, allowed_chars=ALL_CHARS, rng=None, required=()) -> Scene:
    """Random valid scene of ``char_count`` distinct characters.

    ``required`` characters are always included; the rest are drawn
    uniformly from ``allowed_chars``.
    """
    if not 2 <= char_count <= 5:
        raise ConfigError(f"char_count must be in [2, 5], got {char_count}")
    required = tuple(required)
    pool = sorted(set(allowed_chars) - set(required))
    if len(required) + len(pool) < char_count or len(required) > char_count:
        raise ConfigError(f"cannot draw {char_count} distinct characters from {len(pool) + len(required)}")
    fillers = rng.choice(pool, size=char_count - len(required), replace=False) if char_count > len(required) else []
    chars = [*required, *(int(c) for c in fillers)]
    return _place(chars, rng)


def render(scene: Scene) -> np.ndarray:
    """64x64x3 uint8 image, white glyphs on black."""
    img = np.zeros((CANVAS, CANVAS, 3), dtype=np.uint8)
    for c, cx, cy in scene.placements:
        x0, y0 = cx - _HALF_W, cy - _HALF_H
        img[y0:y0 + GLYPH_HEIGHT, x0:x0 + GLYPH_WIDTH][GLYPHS[c]] = 255
    return img


def relation_holds(scene: Scene, q: Question) -> bool:
    lx, ly = scene.position(q.lhs)
    rx, ry = scene.position(q.rhs)
    if q.relation is Relation.LEFT_OF:
        return lx < rx
    if q.relation is Relation.RIGHT_OF:
        return lx > rx
    if q.relation is Relation.ABOVE:
        return ly < ry
    return ly > ry


def _ranks(values) -> np.ndarray:
    return np.argsort(np.argsort(values, kind="stable"), kind="stable")


def perturb_preserving(o: Scene, rng) -> Scene:
    """Resample every placement keeping the x-order and y-order of ``o``."""
    chars = o.chars
    x_rank = _ranks([p[1] for p in o.placements])
    y_rank = _ranks([p[2] for p in o.placements])
    for _ in range(MAX_REJECTIONS):
        t = _place(chars, rng, x_rank, y_rank)
        if t.placements != o.placements:
            return t
    raise GenerationError("perturbation kept reproducing the original scene")


def perturb_violating(o: Scene, rng) -> Scene:
    """Preserving resample, then swap the placements of one character pair.

    The swapped pair inverts both its horizontal and vertical order.
    """
    n = len(o)
    if n < 2:
        raise ContractError("a violating perturbation needs at least two characters")
    p = list(perturb_preserving(o, rng).placements)
    pairs = list(itertools.combinations(range(n), 2))
    i, j = pairs[int(rng.integers(len(pairs)))]
    (ci, xi, yi), (cj, xj, yj) = p[i], p[j]
    p[i], p[j] = (ci, xj, yj), (cj, xi, yi)
    return Scene(tuple(p))


def generate_referential_tuple(char_count: int, D: int, allowed_chars=ALL_CHARS, rng=None) -> ReferentialTuple:
    if D < 1:
        raise ConfigError(f"need at least one distractor, got D={D}")
    o = generate_scene(char_count, allowed_chars, rng)
    t = perturb_preserving(o, rng)
    seen = {frozenset(t.placements)}
    distractors = []
    for _ in range(MAX_REJECTIONS):
        if len(distractors) == D:
            break
        d = perturb_violating(o, rng)
        key = frozenset(d.placements)
        if key not in seen:
            seen.add(key)
            distractors.append(d)
    else:
        raise GenerationError("could not draw pairwise-distinct distractors")
    return ReferentialTuple(o, t, tuple(distractors))


# ---------------------------------------------------------------- questions

def make_split(k: int, seed: int) -> SplitSpec:
    """Give every left-hand character ``k`` right-hand partners in training."""
    if not 1 <= k <= NUM_CHARS - 1:
        raise ConfigError(f"RHS/LHS k must be in [1, {NUM_CHARS - 1}], got {k}")
    rng = sample_rng(seed, 0x5917)
    train, test = set(), set()
    for lhs in range(NUM_CHARS):
        others = np.array([c for c in range(NUM_CHARS) if c != lhs])
        perm = rng.permutation(others)
        train.update((lhs, int(r)) for r in perm[:k])
        test.update((lhs, int(r)) for r in perm[k:])
    return SplitSpec(k, seed, frozenset(train), frozenset(test))


def generate_vqa_sample(split: SplitSpec, partition: str, char_count: int, rng,
                        coin: bool | None = None, axis: int | None = None,
                        scene: Scene | None = None) -> VqaSample:
    """One question whose label carries no information from image or text.

    A fair coin picks the label; a true question states the relation that
    holds on a uniformly chosen axis, a false one states its converse.
    ``coin``, ``axis`` and ``scene`` force the respective draws (tests).
    """
    pairs = sorted(split.pairs(partition))
    if not pairs:
        raise ContractError(f"partition {partition!r} of split k={split.k} has no pairs")
    lhs, rhs = pairs[int(rng.integers(len(pairs)))]
    if scene is None:
        scene = generate_scene(char_count, ALL_CHARS, rng, required=(lhs, rhs))
    label = bool(rng.random() < 0.5) if coin is None else bool(coin)
    axis = int(rng.integers(2)) if axis is None else int(axis)
    lx, ly = scene.position(lhs)
    rx, ry = scene.position(rhs)
    if axis == 0:
        true_rel = Relation.LEFT_OF if lx < rx else Relation.RIGHT_OF
    else:
        true_rel = Relation.ABOVE if ly < ry else Relation.BELOW
    rel = true_rel if label else true_rel.converse
    return VqaSample(scene, Question(lhs, rel, rhs), label)


def swap_characters(scene: Scene, a: int, b: int) -> Scene:
    """Exchange the positions of characters ``a`` and ``b``; every relation between them inverts."""
    swap = {a: b, b: a}
    return Scene(tuple((swap.get(c, c), x, y) for c, x, y in scene.placements))


def generate_vqa_set(split: SplitSpec, partition: str, char_count: int, count: int, seed: int,
                     stream: tuple[int, ...] | None = None) -> list[VqaSample]:
    """``count`` samples with labels balanced per question string.

    Each sample is drawn as in :func:`generate_vqa_sample`. When its
    question string has already been answered true more often than false
    (or the reverse), the sample is relabelled towards the minority by
    swapping the two questioned characters in the scene, which keeps the
    question text and inverts its truth. Scene generation is symmetric in
    the two characters, so every sample keeps the same marginal law while
    the true/false counts of each string differ by at most one.
    """
    if stream is None:
        stream = (1 if partition == "train" else 2,)
    balance: dict[Question, int] = {}
    out = []
    for i in range(count):
        s = generate_vqa_sample(split, partition, char_count, sample_rng(seed, *stream, i))
        lean = balance.get(s.question, 0)
        if (lean > 0 and s.label) or (lean < 0 and not s.label):
            s = VqaSample(swap_characters(s.scene, s.question.lhs, s.question.rhs), s.question, not s.label)
        balance[s.question] = lean + (1 if s.label else -1)
        out.append(s)
    return out


def generate_referential_set(char_count: int, D: int, count: int, seed: int, stream: int = 0) -> list[ReferentialTuple]:
    return [generate_referential_tuple(char_count, D, ALL_CHARS, sample_rng(seed, 3, stream, i))
            for i in range(count)]


# ------------------------------------------------------------------- shards

SHARD_MAGIC = b"EMDS"
SHARD_VERSION = 1
KIND_VQA = 0
KIND_REFERENTIAL = 1
_HEADER = struct.Struct("<4sIBQ")


def _placements_json(scene: Scene):
    return [list(p) for p in scene.placements]


def _scene_from_json(rows) -> Scene:
    return Scene(tuple((int(c), int(x), int(y)) for c, x, y in rows))


def _sample_kind(samples) -> int:
    if not samples:
        return KIND_VQA
    first = samples[0]
    kind = KIND_VQA if isinstance(first, VqaSample) else KIND_REFERENTIAL
    expected = VqaSample if kind == KIND_VQA else ReferentialTuple
    if not all(isinstance(s, expected) for s in samples):
        raise ContractError("a shard holds a single sample kind")
    return kind


def write_shard(samples, path) -> None:
    """Header, one JSON manifest line per sample, then the packed RGB blob."""
    samples = list(samples)
    kind = _sample_kind(samples)
    lines, blobs = [], []
    offset = 0
    for i, s in enumerate(samples):
        scenes = (s.scene,) if kind == KIND_VQA else s.scenes
        offsets = []
        for sc in scenes:
            blobs.append(render(sc).tobytes())
            offsets.append(offset)
            offset += IMAGE_BYTES
        if kind == KIND_VQA:
            rec = {"index": i, "kind": "vqa", "placements": _placements_json(s.scene),
                   "question": [s.question.lhs, int(s.question.relation), s.question.rhs],
                   "label": s.label, "offsets": offsets}
        else:
            rec = {"index": i, "kind": "referential",
                   "original": _placements_json(s.original),
                   "target": _placements_json(s.target),
                   "distractors": [_placements_json(d) for d in s.distractors],
                   "offsets": offsets}
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    header = _HEADER.pack(SHARD_MAGIC, SHARD_VERSION, kind, len(samples))
    Path(path).write_bytes(header + "".join(lines).encode("utf-8") + b"".join(blobs))


def _parse_shard(path):
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(buf))
    magic, version, kind, count = _HEADER.unpack_from(buf, 0)
    if magic != SHARD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != SHARD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if kind not in (KIND_VQA, KIND_REFERENTIAL):
        raise FormatError(f"{path}: unknown sample kind {kind}", offset=8)
    pos = _HEADER.size
    records = []
    for _ in range(count):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: manifest ends after {len(records)} of {count} records", offset=pos)
        try:
            records.append(json.loads(buf[pos:end].decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt manifest line: {exc}", offset=pos) from None
        pos = end + 1
    blob = memoryview(buf)[pos:]
    for rec in records:
        for off in rec["offsets"]:
            if off + IMAGE_BYTES > len(blob):
                raise FormatError(f"{path}: image record {rec['index']} is truncated", offset=pos + off)
    per_record = len(records[0]["offsets"]) if records else 0
    if len(blob) != per_record * IMAGE_BYTES * count:
        raise FormatError(f"{path}: blob holds {len(blob)} bytes, expected {per_record * IMAGE_BYTES * count}",
                          offset=pos)
    return kind, records, blob, pos


def _record_to_sample(kind, rec):
    if kind == KIND_VQA:
        lhs, rel, rhs = rec["question"]
        return VqaSample(_scene_from_json(rec["placements"]), Question(lhs, Relation(rel), rhs), bool(rec["label"]))
    return ReferentialTuple(_scene_from_json(rec["original"]), _scene_from_json(rec["target"]),
                            tuple(_scene_from_json(d) for d in rec["distractors"]))


def read_shard(path) -> list:
    kind, records, _, _ = _parse_shard(path)
    return [_record_to_sample(kind, rec) for rec in records]


def read_shard_images(path) -> np.ndarray:
    """Images as uint8 of shape (count, images_per_record, 64, 64, 3)."""
    _, records, blob, _ = _parse_shard(path)
    per = len(records[0]["offsets"]) if records else 0
    arr = np.frombuffer(bytes(blob), dtype=np.uint8)
    return arr.reshape(len(records), per, CANVAS, CANVAS, 3)


def shard_count(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(head))
    return _HEADER.unpack(head)[3]
