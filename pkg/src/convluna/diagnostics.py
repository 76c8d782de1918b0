"""Memory-degradation metrics, attention entropy, Friedman test and Holm correction."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special, stats
from scipy.cluster import hierarchy
from scipy.spatial.distance import squareform

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InputError, UsageError

# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


@dataclass
class MemorySnapshot:
    step: int
    block: int
    matrix: np.ndarray
    tag: str = "value"  # or "gradient"


def save_snapshot(snap: MemorySnapshot, path: str | Path) -> Path:
    meta = {"kind": "memory_snapshot", "step": snap.step, "block": snap.block, "tag": snap.tag}
    return save_checkpoint(path, {"matrix": np.asarray(snap.matrix)}, meta)


def load_snapshot(path: str | Path) -> MemorySnapshot:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "memory_snapshot":
        raise InputError(f"{path}: not a memory snapshot")
    return MemorySnapshot(meta["step"], meta["block"], arrays["matrix"], meta["tag"])


# ---------------------------------------------------------------------------
# Degradation metrics
# ---------------------------------------------------------------------------


@dataclass
class DegradationReport:
    mean_pairwise_cosine: float
    numerical_rank: int
    unique_vector_count: int
    degenerate: bool = False
    step: int | None = None
    block: int | None = None
    tag: str | None = None


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)


def degradation_metrics(snapshot: MemorySnapshot | np.ndarray, tol: float = 1e-3) -> DegradationReport:
    """Scalar summaries of how collapsed the rows of a memory matrix are.

    All three metrics work on unit-normalised rows, so they ignore row order
    and positive per-row scaling:

    * mean cosine similarity over all row pairs (1.0 when M == 1),
    * number of singular values above ``tol * sigma_max``,
    * number of complete-linkage clusters at cosine distance ``tol``.

    An all-zero matrix is flagged ``degenerate`` (cosine 0, rank 0, one cluster).
    """
    if isinstance(snapshot, MemorySnapshot):
        matrix, where = snapshot.matrix, dict(step=snapshot.step, block=snapshot.block, tag=snapshot.tag)
    else:
        matrix, where = snapshot, {}
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise InputError(f"expected an M x d matrix with M >= 1, got shape {matrix.shape}")
    m = matrix.shape[0]
    if not np.any(matrix):
        return DegradationReport(0.0, 0, 1, True, **where)
    unit = _unit_rows(matrix)
    gram = unit @ unit.T
    if m == 1:
        cosine = 1.0
    else:
        iu = np.triu_indices(m, k=1)
        cosine = float(gram[iu].mean())
    sv = np.linalg.svd(unit, compute_uv=False)
    rank = int((sv > tol * sv[0]).sum())
    if m == 1:
        unique = 1
    else:
        dist = np.clip(1.0 - gram, 0.0, 2.0)
        np.fill_diagonal(dist, 0.0)
        tree = hierarchy.linkage(squareform(dist, checks=False), method="complete")
        unique = int(hierarchy.fcluster(tree, t=tol, criterion="distance").max())
    return DegradationReport(cosine, rank, unique, False, **where)


def degradation_series(snapshots: Sequence[MemorySnapshot], tol: float = 1e-3) -> list[DegradationReport]:
    return [degradation_metrics(s, tol) for s in sorted(snapshots, key=lambda s: (s.step, s.tag, s.block))]


def attention_entropy(scores) -> float:
    """Mean row entropy of attention probabilities, normalised by ``ln L_keys``."""
    p = np.asarray(getattr(scores, "data", scores), dtype=np.float64)
    if p.ndim == 0:
        raise InputError("attention scores need at least one axis")
    n_keys = p.shape[-1]
    rows = p.reshape(-1, n_keys)
    if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-6):
        raise InputError("attention rows must be probability vectors summing to 1")
    if n_keys == 1:
        return 0.0
    ent = -special.xlogy(rows, rows).sum(axis=1)
    return float(ent.mean() / math.log(n_keys))


# ---------------------------------------------------------------------------
# Friedman + Holm
# ---------------------------------------------------------------------------


class FriedmanResult(NamedTuple):
    chi2: float
    p: float


def _friedman_statistic(ranks: np.ndarray) -> np.ndarray:
    """Statistic for rank matrices shaped ``(..., n, k)``."""
    n, k = ranks.shape[-2:]
    rank_sums = ranks.sum(axis=-2)
    chi2 = 12.0 / (n * k * (k + 1)) * (rank_sums**2).sum(axis=-1) - 3.0 * n * (k + 1)
    return np.maximum(chi2, 0.0)


def friedman_test(scores, exact: bool = False, max_enumeration: int = 2_000_000) -> FriedmanResult:
    """Friedman rank test over an ``n_blocks x k_treatments`` score matrix.

    Ties get mean ranks.  The p-value uses the chi-square approximation with
    ``k - 1`` degrees of freedom, or, with ``exact=True``, the permutation
    distribution obtained by enumerating within-block rank permutations.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 2 or scores.shape[1] < 2:
        raise UsageError(f"friedman_test needs at least 2 blocks and 2 treatments, got shape {scores.shape}")
    n, k = scores.shape
    ranks = stats.rankdata(scores, axis=1)
    chi2 = float(_friedman_statistic(ranks))
    if not exact:
        return FriedmanResult(chi2, float(special.gammaincc((k - 1) / 2.0, chi2 / 2.0)))
    perms_per_block = [np.array(sorted(set(itertools.permutations(row)))) for row in ranks]
    total = math.prod(len(p) for p in perms_per_block)
    if total > max_enumeration:
        raise UsageError(f"exact Friedman enumeration needs {total} permutations (limit {max_enumeration})")
    # Accumulate rank sums block by block; the statistic only depends on them.
    sums = np.zeros((1, k))
    for perms in perms_per_block:
        sums = (sums[:, None, :] + perms[None, :, :]).reshape(-1, k)
    stat = np.maximum(12.0 / (n * k * (k + 1)) * (sums**2).sum(axis=1) - 3.0 * n * (k + 1), 0.0)
    p = float(np.mean(stat >= chi2 - 1e-9))
    return FriedmanResult(chi2, p)


def holm_adjust(p_values: Sequence[float]) -> list[float]:
    """Holm step-down adjusted p-values, returned in the input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise InputError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    scaled = (m - np.arange(m)) * p[order]
    adjusted_sorted = np.minimum(np.maximum.accumulate(scaled), 1.0)
    out = np.empty(m)
    out[order] = adjusted_sorted
    return out.tolist()


@dataclass
class Hypothesis:
    name: str
    chi2: float
    p_raw: float
    p_holm: float | None = None


@dataclass
class SignificanceReport:
    treatments: list
    blocks: list
    hypotheses: list[Hypothesis] = field(default_factory=list)

    def rows(self) -> list[list]:
        return [[h.name, h.chi2, h.p_raw, h.p_holm] for h in self.hypotheses]


def compare_treatments(families: dict[str, np.ndarray], treatments: list, blocks: list, exact: bool = False) -> SignificanceReport:
    """One Friedman test per named score matrix, Holm-adjusted across the family."""
    report = SignificanceReport(list(treatments), list(blocks))
    for name, matrix in families.items():
        res = friedman_test(matrix, exact=exact)
        report.hypotheses.append(Hypothesis(name, res.chi2, res.p))
    for h, adj in zip(report.hypotheses, holm_adjust([h.p_raw for h in report.hypotheses])):
        h.p_holm = adj
    return report


# ---------------------------------------------------------------------------
# Plot-ready tables
# ---------------------------------------------------------------------------


def write_table(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    """Tab-separated table with a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return path


def read_table(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))
