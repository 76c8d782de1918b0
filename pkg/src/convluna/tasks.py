"""Synthetic sequence-classification tasks and the line-based dataset format.

Dataset file format (one sample per line)::

    <space-separated token ids> TAB <label>
    <ids of sequence a> TAB <ids of sequence b> TAB <label>     (dual input)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import TaskSpec
from .errors import ConfigError, InputError

PAD = 0

# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class SequenceSample:
    tokens: np.ndarray
    label: int
    mask: np.ndarray
    tokens_b: np.ndarray | None = None
    mask_b: np.ndarray | None = None


@dataclass
class ListOpsSample:
    tokens: list[int]
    label: int
    depth: int
    length: int


@dataclass
class Dataset:
    """Padded id matrices with validity masks; row ``i`` is one sample."""

    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    ids_b: np.ndarray | None = None
    mask_b: np.ndarray | None = None
    meta: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dual(self) -> bool:
        return self.ids_b is not None

    def __getitem__(self, i: int) -> SequenceSample:
        n = int(self.mask[i].sum())
        sample = SequenceSample(self.ids[i, :n].copy(), int(self.labels[i]), self.mask[i].copy())
        if self.dual:
            nb = int(self.mask_b[i].sum())
            sample.tokens_b = self.ids_b[i, :nb].copy()
            sample.mask_b = self.mask_b[i].copy()
        return sample

    def __iter__(self) -> Iterator[SequenceSample]:
        for i in range(len(self)):
            yield self[i]

    def batch(self, index) -> dict:
        out = {"ids": self.ids[index], "mask": self.mask[index], "labels": self.labels[index]}
        if self.dual:
            out["ids_b"] = self.ids_b[index]
            out["mask_b"] = self.mask_b[index]
        return out


def _pad(seqs: Sequence[Sequence[int]], width: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def from_samples(samples: Sequence[SequenceSample], width: int, dual: bool = False) -> Dataset:
    ids, mask = _pad([s.tokens for s in samples], width)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    if not dual:
        return Dataset(ids, mask, labels)
    ids_b, mask_b = _pad([s.tokens_b for s in samples], width)
    return Dataset(ids, mask, labels, ids_b, mask_b)


def _rng(spec: TaskSpec, seed: int | None) -> np.random.Generator:
    return np.random.default_rng(spec.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# ListOps
# ---------------------------------------------------------------------------

OPERATORS = ("MAX", "MIN", "MED", "SM")
LISTOPS_VOCAB = [str(d) for d in range(10)] + list(OPERATORS) + ["[", "]"]
LISTOPS_IDS = {tok: i + 1 for i, tok in enumerate(LISTOPS_VOCAB)}  # 0 is padding
LISTOPS_TOKENS = {i: tok for tok, i in LISTOPS_IDS.items()}
LISTOPS_VOCAB_SIZE = len(LISTOPS_VOCAB) + 1
_TOKEN_RE = re.compile(r"\[|\]|MAX|MIN|MED|SM|\d")


def apply_operator(op: str, values: Sequence[int]) -> int:
    if op == "MAX":
        return max(values)
    if op == "MIN":
        return min(values)
    if op == "MED":
        return sorted(values)[(len(values) - 1) // 2]  # lower median
    if op == "SM":
        return sum(values) % 10
    raise InputError(f"unknown ListOps operator {op!r}")


def tokenize_listops(text: str) -> list[str]:
    tokens = _TOKEN_RE.findall(text)
    if "".join(tokens) != re.sub(r"\s+", "", text):
        raise InputError(f"unrecognised characters in ListOps expression {text!r}")
    return tokens


def evaluate_listops(expr: str | Sequence[str]) -> int:
    """Recursive evaluation of a ListOps expression (string or token list)."""
    tokens = tokenize_listops(expr) if isinstance(expr, str) else list(expr)

    def parse(pos: int) -> tuple[int, int]:
        tok = tokens[pos]
        if tok.isdigit():
            return int(tok), pos + 1
        if tok != "[":
            raise InputError(f"unexpected token {tok!r} at position {pos}")
        op = tokens[pos + 1]
        pos += 2
        values = []
        while tokens[pos] != "]":
            v, pos = parse(pos)
            values.append(v)
        return apply_operator(op, values), pos + 1

    try:
        value, end = parse(0)
    except IndexError:
        raise InputError("unbalanced ListOps expression") from None
    if end != len(tokens):
        raise InputError("trailing tokens after ListOps expression")
    return value


def _tree_depth(tokens: Sequence[str]) -> int:
    depth = best = 0
    for t in tokens:
        if t == "[":
            depth += 1
            best = max(best, depth)
        elif t == "]":
            depth -= 1
    return best


def _max_listops_length(depth: int) -> int:
    # Every child of a node at the last level is a digit; arity is at most 5.
    length = 5 + 3
    for _ in range(depth - 1):
        length = 3 + 5 * length
    return length


def sample_listops(rng: np.random.Generator, max_depth: int) -> list[str]:
    def node(level: int) -> list[str]:
        op = OPERATORS[rng.integers(len(OPERATORS))]
        out = ["[", op]
        for _ in range(rng.integers(2, 6)):
            if level + 1 < max_depth and rng.random() < 0.3 * 0.6**level:
                out.extend(node(level + 1))
            else:
                out.append(str(rng.integers(10)))
        out.append("]")
        return out

    return node(0)


def gen_listops_samples(spec: TaskSpec, n: int, seed: int | None = None) -> list[ListOpsSample]:
    if spec.min_len > _max_listops_length(spec.max_depth) or spec.max_len < 5:
        raise ConfigError(
            f"ListOps bounds infeasible: length [{spec.min_len}, {spec.max_len}] with depth <= {spec.max_depth}"
        )
    rng = _rng(spec, seed)
    out: list[ListOpsSample] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 1000 * max(n, 1):
            raise ConfigError("ListOps generator could not satisfy the length/depth bounds")
        tokens = sample_listops(rng, spec.max_depth)
        depth = _tree_depth(tokens)
        if not (spec.min_len <= len(tokens) <= spec.max_len and spec.min_depth <= depth):
            continue
        ids = [LISTOPS_IDS[t] for t in tokens]
        out.append(ListOpsSample(ids, evaluate_listops(tokens), depth, len(tokens)))
    return out


def gen_listops(spec: TaskSpec, n: int, seed: int | None = None) -> Dataset:
    if spec.vocab_size < LISTOPS_VOCAB_SIZE:
        raise ConfigError(f"ListOps needs vocab_size >= {LISTOPS_VOCAB_SIZE}")
    samples = gen_listops_samples(spec, n, seed)
    ids, mask = _pad([s.tokens for s in samples], spec.max_len)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    meta = {
        "depth": np.array([s.depth for s in samples], dtype=np.int64),
        "length": np.array([s.length for s in samples], dtype=np.int64),
    }
    return Dataset(ids, mask, labels, meta=meta)


# ---------------------------------------------------------------------------
# Marker detection (classification) and key matching (dual input)
# ---------------------------------------------------------------------------

MARKER = 1
N_MATCH_KEYS = 4


def gen_marker(spec: TaskSpec, n: int, seed: int | None = None) -> Dataset:
    """Label 1 iff the marker token occurs in the first half of the sequence.

    Half of the negatives carry the marker in the second half as a distractor.
    Dual-input variant: each sequence holds one key token, label 1 iff keys match.
    """
    if spec.min_len < 4:
        raise ConfigError("marker task needs sequences of length >= 4")
    low = (N_MATCH_KEYS + 1) if spec.dual_input else 2
    if spec.vocab_size <= low:
        raise ConfigError(f"marker task needs vocab_size > {low}")
    rng = _rng(spec, seed)
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    labels = (rng.random(n) < 0.5).astype(np.int64)
    ids = np.full((n, spec.max_len), PAD, dtype=np.int64)
    mask = np.arange(spec.max_len)[None, :] < lengths[:, None]
    fill = rng.integers(low, spec.vocab_size, size=(n, spec.max_len))
    ids[mask] = fill[mask]
    if not spec.dual_input:
        for i in range(n):
            half = lengths[i] // 2
            if labels[i]:
                ids[i, rng.integers(0, half)] = MARKER
            elif rng.random() < 0.5:
                ids[i, rng.integers(half, lengths[i])] = MARKER
        return Dataset(ids, mask, labels)

    lengths_b = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    ids_b = np.full((n, spec.max_len), PAD, dtype=np.int64)
    mask_b = np.arange(spec.max_len)[None, :] < lengths_b[:, None]
    fill_b = rng.integers(low, spec.vocab_size, size=(n, spec.max_len))
    ids_b[mask_b] = fill_b[mask_b]
    for i in range(n):
        key_a = rng.integers(1, N_MATCH_KEYS + 1)
        key_b = key_a if labels[i] else 1 + (key_a - 1 + rng.integers(1, N_MATCH_KEYS)) % N_MATCH_KEYS
        ids[i, rng.integers(0, lengths[i])] = key_a
        ids_b[i, rng.integers(0, lengths_b[i])] = key_b
    return Dataset(ids, mask, labels, ids_b, mask_b)


# ---------------------------------------------------------------------------
# Pixel grids
# ---------------------------------------------------------------------------

SHAPES = ("hbar", "vbar", "diag", "antidiag", "blob-tl", "blob-tr", "blob-bl", "blob-br")


def render_shape(kind: str, g: int, position: int = 0) -> np.ndarray:
    """Noiseless ``g x g`` intensity image in [0, 1]."""
    img = np.zeros((g, g))
    position = int(position) % g
    if kind == "hbar":
        img[position, :] = 1.0
    elif kind == "vbar":
        img[:, position] = 1.0
    elif kind == "diag":
        img[np.arange(g), (np.arange(g) + position) % g] = 1.0
    elif kind == "antidiag":
        img[np.arange(g), (g - 1 - np.arange(g) + position) % g] = 1.0
    elif kind.startswith("blob-"):
        s = max(1, g // 3)
        rows = slice(0, s) if kind[5] == "t" else slice(g - s, g)
        cols = slice(0, s) if kind[6] == "l" else slice(g - s, g)
        img[rows, cols] = 1.0
    else:
        raise ConfigError(f"unknown shape {kind!r}")
    return img


def quantize(img: np.ndarray) -> np.ndarray:
    """Map intensities in [0, 1] to 8-bit token ids (1.0 -> 255, 0.0 -> 0)."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.int64)


def gen_pixel_grid(spec: TaskSpec, n: int, seed: int | None = None) -> Dataset:
    g = spec.grid
    if g * g > spec.max_len:
        raise ConfigError(f"grid {g}x{g} does not fit max_len {spec.max_len}")
    if not 2 <= spec.num_classes <= len(SHAPES):
        raise ConfigError(f"pixel-grid supports 2..{len(SHAPES)} classes")
    if spec.vocab_size < 256:
        raise ConfigError("pixel-grid needs vocab_size >= 256")
    rng = _rng(spec, seed)
    labels = rng.integers(0, spec.num_classes, size=n)
    ids = np.full((n, spec.max_len), PAD, dtype=np.int64)
    mask = np.zeros((n, spec.max_len), dtype=bool)
    mask[:, : g * g] = True
    for i, label in enumerate(labels):
        img = render_shape(SHAPES[label], g, rng.integers(g))
        img = img + rng.normal(0.0, spec.noise, size=img.shape) if spec.noise > 0 else img
        ids[i, : g * g] = quantize(img).reshape(-1)
    return Dataset(ids, mask, labels.astype(np.int64))


# ---------------------------------------------------------------------------
# Line-based files
# ---------------------------------------------------------------------------


def _parse_ids(field: str, lineno: int, vocab_size: int) -> np.ndarray:
    try:
        ids = np.array([int(t) for t in field.split()], dtype=np.int64)
    except ValueError:
        raise InputError(f"line {lineno}: token ids must be integers") from None
    if ids.size == 0:
        raise InputError(f"line {lineno}: empty token sequence")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise InputError(f"line {lineno}: token id out of range [0, {vocab_size})")
    return ids


def iter_lra(path: str | Path, vocab_size: int, dual: bool = False, max_len: int | None = None) -> Iterator[SequenceSample]:
    """Stream samples from a dataset file, validating every line."""
    fields_expected = 3 if dual else 2
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != fields_expected:
                raise InputError(f"line {lineno}: expected {fields_expected} tab-separated fields, got {len(parts)}")
            try:
                label = int(parts[-1])
            except ValueError:
                raise InputError(f"line {lineno}: label must be an integer") from None
            if label < 0:
                raise InputError(f"line {lineno}: negative label")
            seqs = [_parse_ids(p, lineno, vocab_size) for p in parts[:-1]]
            if max_len is not None and any(len(s) > max_len for s in seqs):
                raise InputError(f"line {lineno}: sequence longer than max_len {max_len}")
            sample = SequenceSample(seqs[0], label, np.ones(len(seqs[0]), dtype=bool))
            if dual:
                sample.tokens_b, sample.mask_b = seqs[1], np.ones(len(seqs[1]), dtype=bool)
            yield sample


def ingest_lra(path: str | Path, spec: TaskSpec) -> Dataset:
    samples = list(iter_lra(path, spec.vocab_size, spec.dual_input, spec.max_len))
    for s in samples:
        if s.label >= spec.num_classes:
            raise InputError(f"label {s.label} outside [0, {spec.num_classes})")
    return from_samples(samples, spec.max_len, spec.dual_input)


def export_lra(dataset: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset:
            fields = [" ".join(map(str, s.tokens))]
            if dataset.dual:
                fields.append(" ".join(map(str, s.tokens_b)))
            fields.append(str(s.label))
            fh.write("\t".join(fields) + "\n")
    return path


# ---------------------------------------------------------------------------
# Task assembly
# ---------------------------------------------------------------------------

GENERATORS = {"listops": gen_listops, "marker": gen_marker, "pixel-grid": gen_pixel_grid}


@dataclass
class Task:
    spec: TaskSpec
    train: Dataset
    val: Dataset


def split_seeds(seed: int) -> tuple[int, int]:
    """Disjoint train / validation generator seeds derived from one task seed."""
    train, val = np.random.SeedSequence(seed).spawn(2)
    return int(train.generate_state(1)[0]), int(val.generate_state(1)[0])


def build_task(spec: TaskSpec) -> Task:
    if spec.kind == "file-ingest":
        train = ingest_lra(spec.train_path, spec)
        val = ingest_lra(spec.val_path, spec) if spec.val_path else train
        return Task(spec, train, val)
    if spec.dual_input and spec.kind != "marker":
        raise ConfigError("dual_input is only available for the marker task")
    train_seed, val_seed = split_seeds(spec.seed)
    gen = GENERATORS[spec.kind]
    return Task(spec, gen(spec, spec.n_train, train_seed), gen(spec, spec.n_val, val_seed))
