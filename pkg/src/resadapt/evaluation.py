"""Dice overlap, Wilcoxon signed-rank tests, Bonferroni, and report tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import Volume


def _as_binary(x) -> np.ndarray:
    arr = x.data if isinstance(x, Volume) else np.asarray(x)
    return arr > 0.5


def dice(a, b) -> float:
    """2|a AND b| / (|a| + |b|); 1.0 when both masks are empty."""
    if isinstance(a, Volume) and isinstance(b, Volume):
        if a.dims != b.dims:
            raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
        if a.spacing_mm != b.spacing_mm:
            raise ValueError(f"spacing mismatch: {a.spacing_mm} vs {b.spacing_mm}")
    am, bm = _as_binary(a), _as_binary(b)
    if am.shape != bm.shape:
        raise ValueError(f"shape mismatch: {am.shape} vs {bm.shape}")
    total = int(am.sum()) + int(bm.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(am, bm).sum()) / total


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


class WilcoxonResult(NamedTuple):
    statistic: float  # W = min(W+, W-)
    p_value: float  # two-sided
    n_effective: int  # pairs remaining after zero-difference removal
    degenerate: bool  # all differences were zero


def _doubled_midranks(absd: np.ndarray) -> np.ndarray:
    """Midranks of |d| scaled by 2 so ties (.5 ranks) become exact integers."""
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(len(absd), dtype=np.int64)
    i = 0
    while i < len(absd):
        j = i
        while j + 1 < len(absd) and absd[order[j + 1]] == absd[order[i]]:
            j += 1
        # ranks i+1 .. j+1 averaged, doubled: (i+1 + j+1)
        ranks[order[i : j + 1]] = (i + 1) + (j + 1)
        i = j + 1
    return ranks


def _exact_tail_count(ranks2: np.ndarray, w2: int) -> int:
    """Number of sign assignments with doubled W+ <= w2, by subset-sum counting."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in ranks2:
        nxt = counts.copy()
        nxt[r:] += counts[: total + 1 - r]
        counts = nxt
    return int(counts[: w2 + 1].sum())


def wilcoxon_signed_rank(x, y, mode: str = "exact") -> WilcoxonResult:
    """Paired two-sided signed-rank test; zero differences are dropped.

    exact: p = min(1, 2 * P(W+ <= min(W+, W-))) over all 2^n sign
    assignments with midrank ties (n <= 20 required). approx: normal
    approximation with tie and continuity corrections.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need equal-length 1-d samples, got {x.shape} and {y.shape}")
    if len(x) < 1:
        raise ValueError("need at least one pair")
    if mode not in ("exact", "approx"):
        raise ValueError(f"unknown mode {mode!r}")
    d = x - y
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, True)

    absd = np.abs(d)
    ranks2 = _doubled_midranks(absd)
    w_plus2 = int(ranks2[d > 0].sum())
    w_minus2 = int(ranks2[d < 0].sum())
    w2 = min(w_plus2, w_minus2)
    statistic = w2 / 2.0

    if mode == "exact":
        if n > 20:
            raise ValueError(f"exact mode supports n <= 20, got {n}")
        count = _exact_tail_count(ranks2, w2)
        p = min(1.0, 2.0 * count / 2.0**n)
        return WilcoxonResult(statistic, p, n, False)

    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(absd, return_counts=True)
    var -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
    if var <= 0.0:
        return WilcoxonResult(statistic, 1.0, n, False)
    z = (mu - statistic - 0.5) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return WilcoxonResult(statistic, p, n, False)


class BonferroniResult(NamedTuple):
    adjusted: list  # min(1, p * m) per input
    reject: list  # adjusted < alpha
    m: int


def bonferroni(p_values, alpha: float = 0.05) -> BonferroniResult:
    ps = [float(p) for p in p_values]
    for p in ps:
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"p-value out of range: {p}")
    m = len(ps)
    adjusted = [min(1.0, p * m) for p in ps]
    return BonferroniResult(adjusted, [a < alpha for a in adjusted], m)


# ---------------------------------------------------------------------------
# report tables


@dataclass
class ReportCell:
    model: str
    test_set: str
    mean: float
    std: float
    n: int
    best: bool = False
    starred: bool = False


@dataclass
class ReportTable:
    """Mean (std) Dice per model and test set; the best cell per test set is
    marked, starred when significantly better than every other model under
    exact pairwise Wilcoxon tests with Bonferroni correction over m = number
    of models - 1 comparisons."""

    models: list
    test_sets: list
    cells: dict  # (test_set, model) -> ReportCell
    alpha: float
    m_comparisons: int
    pairwise_p: dict = field(default_factory=dict)  # (test_set, other_model) -> raw p

    def render(self) -> str:
        width = max([len(m) for m in self.models] + [5]) + 2
        colw = 22
        lines = []
        header = "model".ljust(width) + "".join(t.ljust(colw) for t in self.test_sets)
        lines.append(header)
        lines.append("-" * len(header))
        for m in self.models:
            row = m.ljust(width)
            for t in self.test_sets:
                c = self.cells[(t, m)]
                text = f"{c.mean:.3f} ({c.std:.3f})"
                if c.best:
                    text = f"**{text}**"
                if c.starred:
                    text += " *"
                row += text.ljust(colw)
            lines.append(row)
        lines.append(
            f"* best model beats all others (two-sided exact Wilcoxon, "
            f"Bonferroni m={self.m_comparisons}, alpha={self.alpha})"
        )
        return "\n".join(lines)

    def csv_rows(self) -> list:
        rows = [
            [
                "test_set",
                "model",
                "mean_dice",
                "std_dice",
                "n_cases",
                "best",
                "significant",
                "m_comparisons",
            ]
        ]
        for t in self.test_sets:
            for m in self.models:
                c = self.cells[(t, m)]
                rows.append(
                    [t, m, c.mean, c.std, c.n, int(c.best), int(c.starred), self.m_comparisons]
                )
        return rows


def report(results: dict, alpha: float = 0.05) -> ReportTable:
    """Build the summary table from results[test_set][model][case_id] = dice.

    Case-id sets must agree across models within a test set; scores are
    paired by case id for the significance tests.
    """
    test_sets = list(results.keys())
    if not test_sets:
        raise ValueError("no test sets")
    models = list(results[test_sets[0]].keys())
    if not models:
        raise ValueError("no models")
    cells = {}
    pairwise = {}
    m_comparisons = max(1, len(models) - 1)
    for t in test_sets:
        if list(results[t].keys()) != models:
            raise ValueError(f"model set mismatch in test set {t!r}")
        case_ids = sorted(results[t][models[0]].keys())
        if not case_ids:
            raise ValueError(f"no cases in test set {t!r}")
        scores = {}
        for m in models:
            if sorted(results[t][m].keys()) != case_ids:
                raise ValueError(f"case set mismatch for model {m!r} in test set {t!r}")
            scores[m] = np.array([float(results[t][m][c]) for c in case_ids])
        for m in models:
            s = scores[m]
            std = float(s.std(ddof=1)) if len(s) > 1 else 0.0
            cells[(t, m)] = ReportCell(m, t, float(s.mean()), std, len(s))
        best = max(models, key=lambda m: (cells[(t, m)].mean, -models.index(m)))
        cells[(t, best)].best = True
        others = [m for m in models if m != best]
        if others:
            mode = "exact" if len(case_ids) <= 20 else "approx"
            ps = []
            for m in others:
                res = wilcoxon_signed_rank(scores[best], scores[m], mode=mode)
                pairwise[(t, m)] = res.p_value
                ps.append(res.p_value)
            adj = bonferroni(ps, alpha=alpha)
            better = [
                cells[(t, best)].mean > cells[(t, m)].mean for m in others
            ]
            cells[(t, best)].starred = all(adj.reject) and all(better)
    return ReportTable(
        models=models,
        test_sets=test_sets,
        cells=cells,
        alpha=alpha,
        m_comparisons=m_comparisons,
        pairwise_p=pairwise,
    )
