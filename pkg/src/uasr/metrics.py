"""Evaluation: phoneme error rate, boundary scoring, and the unsupervised
validation metric (total LM NLL divided by vocabulary usage, lower is better).

Boundary positions are the frame indices of 1-bits; the frame-0 boundary both
sequences always carry is included in matching. Harsh scoring is a one-to-one
matching within the tolerance; lenient counts hits independently on each side
and can double count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PhonemeInventory
from .lm import NGramLM


def levenshtein_distance(a, b) -> int:
    a = list(a)
    b = list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[len(b)]


@dataclass
class ErrorRateReport:
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int

    @property
    def rate(self) -> float:
        return (self.substitutions + self.insertions + self.deletions) / self.ref_length


def edit_alignment(ref, hyp) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a min-cost alignment.

    Ties break toward substitutions, then deletions, then insertions.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    # dp[i][j] = (cost, S, I, D) for ref[:i] vs hyp[:j]
    dp = [[(0, 0, 0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = (i, 0, 0, i)
    for j in range(1, m + 1):
        dp[0][j] = (j, 0, j, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c_sub, s, ins, dele = dp[i - 1][j - 1]
            sub_cost = int(ref[i - 1] != hyp[j - 1])
            cand = (c_sub + sub_cost, s + sub_cost, ins, dele)
            c_del, s, ins, dele = dp[i - 1][j]
            if c_del + 1 < cand[0]:
                cand = (c_del + 1, s, ins, dele + 1)
            c_ins, s, ins, dele = dp[i][j - 1]
            if c_ins + 1 < cand[0]:
                cand = (c_ins + 1, s, ins + 1, dele)
            dp[i][j] = cand
    _, s, ins, dele = dp[n][m]
    return s, ins, dele


def per(refs: list, hyps: list) -> ErrorRateReport:
    """Corpus-level phoneme error rate over aligned reference/hypothesis lists."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    total_s = total_i = total_d = total_ref = 0
    for ref, hyp in zip(refs, hyps):
        s, i, d = edit_alignment(ref, hyp)
        total_s += s
        total_i += i
        total_d += d
        total_ref += len(ref)
    if total_ref == 0:
        raise ValueError("empty reference corpus")
    return ErrorRateReport(total_s, total_i, total_d, total_ref)


# ---------------------------------------------------------------------------
# boundary scoring


@dataclass
class BoundaryScore:
    precision: float
    recall: float
    f1: float
    r_value: float
    n_ref: int
    n_hyp: int
    n_matched: int  # harsh: matching size; lenient: hyp-side hit count
    n_matched_ref: int  # lenient ref-side hit count (== n_matched under harsh)
    tolerance_frames: int
    scheme: str


def _greedy_matching(ref_pos: np.ndarray, hyp_pos: np.ndarray, tol: int) -> int:
    """Maximum one-to-one matching size for sorted points on a line."""
    i = j = matched = 0
    while i < len(ref_pos) and j < len(hyp_pos):
        if abs(int(ref_pos[i]) - int(hyp_pos[j])) <= tol:
            matched += 1
            i += 1
            j += 1
        elif ref_pos[i] < hyp_pos[j]:
            i += 1
        else:
            j += 1
    return matched


def _prf(n_matched_hyp, n_matched_ref, n_ref, n_hyp, tol, scheme) -> BoundaryScore:
    p = n_matched_hyp / n_hyp if n_hyp else 0.0
    r = n_matched_ref / n_ref if n_ref else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    rv = r_value(p, r) if p > 0 else float("nan")
    return BoundaryScore(p, r, f1, rv, n_ref, n_hyp, n_matched_hyp, n_matched_ref, tol, scheme)


def boundary_prf(ref: np.ndarray, hyp: np.ndarray, tol_frames: int = 1, scheme: str = "harsh") -> BoundaryScore:
    if len(ref) != len(hyp):
        raise ValueError("boundary sequences differ in length")
    return boundary_prf_positions(np.flatnonzero(ref), np.flatnonzero(hyp), tol_frames, scheme)


def boundary_prf_positions(ref_pos, hyp_pos, tol_frames: int = 1, scheme: str = "harsh") -> BoundaryScore:
    ref_pos = np.sort(np.asarray(ref_pos))
    hyp_pos = np.sort(np.asarray(hyp_pos))
    if scheme == "harsh":
        m = _greedy_matching(ref_pos, hyp_pos, tol_frames)
        return _prf(m, m, len(ref_pos), len(hyp_pos), tol_frames, scheme)
    if scheme == "lenient":
        hyp_hits = sum(1 for h in hyp_pos if len(ref_pos) and np.abs(ref_pos - h).min() <= tol_frames)
        ref_hits = sum(1 for r in ref_pos if len(hyp_pos) and np.abs(hyp_pos - r).min() <= tol_frames)
        return _prf(hyp_hits, ref_hits, len(ref_pos), len(hyp_pos), tol_frames, scheme)
    raise ValueError(f"unknown scheme {scheme!r}")


def boundary_prf_corpus(refs, hyps, tol_frames: int = 1, scheme: str = "harsh") -> BoundaryScore:
    """Aggregate counts over utterance pairs, then compute P/R/F1 once."""
    mh = mr = n_ref = n_hyp = 0
    for ref, hyp in zip(refs, hyps):
        s = boundary_prf(ref, hyp, tol_frames, scheme)
        mh += s.n_matched
        mr += s.n_matched_ref
        n_ref += s.n_ref
        n_hyp += s.n_hyp
    return _prf(mh, mr, n_ref, n_hyp, tol_frames, scheme)


def r_value(precision: float, recall: float) -> float:
    """Segmentation R-value from precision/recall (over-segmentation aware)."""
    if precision <= 0:
        raise ValueError("r_value undefined at zero precision")
    os = recall / precision - 1.0
    r1 = np.sqrt((1.0 - recall) ** 2 + os ** 2)
    r2 = (-os + recall - 1.0) / np.sqrt(2.0)
    return float(1.0 - (abs(r1) + abs(r2)) / 2.0)


def seg_frequency(boundary: np.ndarray, frame_rate_hz: float) -> float:
    """Segments per second implied by a boundary sequence."""
    if frame_rate_hz <= 0:
        raise ValueError("frame_rate_hz must be positive")
    return int(np.sum(boundary)) * frame_rate_hz / len(boundary)


def vocab_usage(seqs: list, inventory_size: int | PhonemeInventory) -> float:
    """Fraction of the inventory appearing at least once across predictions."""
    size = inventory_size.size if isinstance(inventory_size, PhonemeInventory) else int(inventory_size)
    used: set[int] = set()
    for seq in seqs:
        used.update(int(t) for t in seq)
    return len(used) / size


def unsup_metric(predictions: list, lm: NGramLM) -> float:
    """Total unnormalized NLL of all predictions divided by vocabulary usage.

    Drives every model-selection decision; no error rate is ever consulted.
    """
    usage = vocab_usage(predictions, lm.n_symbols)
    if usage == 0:
        raise ValueError("zero vocabulary usage: no symbols predicted at all")
    total_nll = sum(lm.score_nll(seq) for seq in predictions)
    return total_nll / usage


def score_report(score: BoundaryScore) -> dict:
    """JSON-friendly dict of a BoundaryScore."""
    return {
        "precision": score.precision,
        "recall": score.recall,
        "f1": score.f1,
        "r_value": None if np.isnan(score.r_value) else score.r_value,
        "n_ref": score.n_ref,
        "n_hyp": score.n_hyp,
        "n_matched": score.n_matched,
        "n_matched_ref": score.n_matched_ref,
        "tolerance_frames": score.tolerance_frames,
        "scheme": score.scheme,
    }
