"""Boundary segmentation policy and its training.

The policy is a small 1-D CNN emitting a per-frame probability that the frame
starts a new segment. Training is behavior cloning on target boundaries
followed by REINFORCE against rewards computed from the de-duplicated phoneme
predictions of a frozen predictor. Frame 0 is always a segment start: it is
forced on in sampling and inference and carries no decision, so it is excluded
from the policy log-likelihood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .lm import NGramLM
from .metrics import levenshtein_distance
from .nnet import (
    Conv1d,
    NonFiniteError,
    OptimConfig,
    ParamSet,
    gelu,
    gelu_grad,
    log_sigmoid,
    optimizer_step,
    sigmoid,
    softplus,
)

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


class SegmentationPolicy:
    """conv(k=7) -> GELU -> conv(k=3) -> GELU -> 1x1 head -> sigmoid."""

    def __init__(self, feat_dim: int, hidden: int = 64, rng=None, dtype=np.float32):
        self.feat_dim = feat_dim
        self.hidden = hidden
        self.conv1 = Conv1d(feat_dim, hidden, 7, rng, dtype)
        self.conv2 = Conv1d(hidden, hidden, 3, rng, dtype)
        self.head = Conv1d(hidden, 1, 1, rng, dtype)

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "conv1.w": self.conv1.w, "conv1.b": self.conv1.b,
            "conv2.w": self.conv2.w, "conv2.b": self.conv2.b,
            "head.w": self.head.w, "head.b": self.head.b,
        }

    def load_parameters(self, arrays: dict[str, np.ndarray]):
        for k, v in self.parameters().items():
            v[...] = arrays[k]

    def astype(self, dtype) -> "SegmentationPolicy":
        clone = SegmentationPolicy(self.feat_dim, self.hidden)
        clone.conv1 = self.conv1.astype(dtype)
        clone.conv2 = self.conv2.astype(dtype)
        clone.head = self.head.astype(dtype)
        return clone

    def forward_logits(self, features: np.ndarray):
        """features (T, d) -> per-frame logits (T,) plus backward cache."""
        if features.shape[1] != self.feat_dim:
            raise ValueError(f"policy expects {self.feat_dim}-dim features, got {features.shape[1]}")
        x = np.ascontiguousarray(features.T)
        z1 = self.conv1.forward(x)
        h1 = gelu(z1)
        z2 = self.conv2.forward(h1)
        h2 = gelu(z2)
        z3 = self.head.forward(h2)
        return z3[0], (x, z1, h1, z2, h2)

    def backward_logits(self, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        x, z1, h1, z2, h2 = cache
        dz3 = dlogits[None, :]
        dh2, dw3, db3 = self.head.backward(dz3, h2)
        dz2 = dh2 * gelu_grad(z2)
        dh1, dw2, db2 = self.conv2.backward(dz2, h1)
        dz1 = dh1 * gelu_grad(z1)
        _, dw1, db1 = self.conv1.backward(dz1, x)
        return {
            "conv1.w": dw1, "conv1.b": db1,
            "conv2.w": dw2, "conv2.b": db2,
            "head.w": dw3, "head.b": db3,
        }


def policy_forward(policy: SegmentationPolicy, features: np.ndarray) -> np.ndarray:
    """Per-frame segment-start probabilities, clipped strictly inside (0, 1)."""
    logits, _ = policy.forward_logits(features)
    return np.clip(sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)


def sample_boundaries(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    bits = (rng.random(len(probs)) < probs).astype(np.uint8)
    bits[0] = 1
    return bits


def infer_boundaries(probs: np.ndarray) -> np.ndarray:
    bits = (probs >= 0.5).astype(np.uint8)
    bits[0] = 1
    return bits


def mean_pool(features: np.ndarray, boundary: np.ndarray) -> np.ndarray:
    """One row per segment: the mean of that segment's frames."""
    if len(boundary) != features.shape[0]:
        raise ValueError("boundary length does not match frame count")
    idx = np.flatnonzero(boundary)
    sums = np.add.reduceat(features, idx, axis=0)
    counts = np.diff(np.append(idx, len(boundary)))
    return sums / counts[:, None].astype(features.dtype)


def dedup(seq) -> np.ndarray:
    """Collapse runs of identical tokens: [a a b b a] -> [a b a]."""
    seq = np.asarray(seq)
    if len(seq) == 0:
        return seq
    keep = np.ones(len(seq), dtype=bool)
    keep[1:] = seq[1:] != seq[:-1]
    return seq[keep]


def merge_boundaries(boundary: np.ndarray, predictions) -> np.ndarray:
    """Clear the start bit of segments predicted equal to their predecessor."""
    predictions = np.asarray(predictions)
    idx = np.flatnonzero(boundary)
    if len(predictions) != len(idx):
        raise ValueError(f"{len(predictions)} predictions for {len(idx)} segments")
    merged = np.array(boundary, dtype=np.uint8, copy=True)
    same = predictions[1:] == predictions[:-1]
    merged[idx[1:][same]] = 0
    return merged


# ---------------------------------------------------------------------------
# rewards


@dataclass(frozen=True)
class RewardWeights:
    c_ppl: float = 1.0
    c_edit: float = 0.2
    c_len: float = 0.2

    def __post_init__(self):
        if min(self.c_ppl, self.c_edit, self.c_len) < 0:
            raise ValueError("reward weights must be nonnegative")
        if max(self.c_ppl, self.c_edit, self.c_len) == 0:
            raise ValueError("at least one reward weight must be positive")


@dataclass
class RewardBreakdown:
    r_ppl: float
    r_edit: float
    r_len: float
    ppl_cur: float
    ppl_prev: float
    len_cur: int
    len_prev: int
    r_total: float | None = None  # filled in after batch normalization


def compute_reward(y_cur, y_prev, lm: NGramLM) -> RewardBreakdown:
    """Raw reward components of a current prediction against the frozen
    previous-iteration prediction: perplexity drop, normalized negative edit
    distance, and length agreement."""
    y_cur = np.asarray(y_cur)
    y_prev = np.asarray(y_prev)
    if len(y_prev) == 0:
        raise ValueError("previous-iteration prediction must be nonempty")
    ppl_prev = lm.perplexity(y_prev)
    ppl_cur = lm.perplexity(y_cur)
    dist = levenshtein_distance(y_prev, y_cur)
    return RewardBreakdown(
        r_ppl=ppl_prev - ppl_cur,
        r_edit=-dist / len(y_prev),
        r_len=1.0 - abs(len(y_cur) - len(y_prev)) / len(y_prev),
        ppl_cur=ppl_cur,
        ppl_prev=ppl_prev,
        len_cur=len(y_cur),
        len_prev=len(y_prev),
    )


def normalize_rewards(batch: list[RewardBreakdown], weights: RewardWeights) -> np.ndarray:
    """Z-score each component across the batch, then combine. Fills r_total."""
    comps = np.array([[b.r_ppl, b.r_edit, b.r_len] for b in batch], dtype=np.float64)
    if len(batch) < 2:
        log.warning("reward batch of size %d: falling back to raw weighted sum", len(batch))
        normed = comps
    else:
        std = comps.std(axis=0)
        normed = (comps - comps.mean(axis=0)) / np.maximum(std, 1e-8)
    totals = normed @ np.array([weights.c_ppl, weights.c_edit, weights.c_len])
    for b, r in zip(batch, totals):
        b.r_total = float(r)
    return totals


# ---------------------------------------------------------------------------
# policy log-likelihood and its gradient (frame 0 excluded)


def boundary_logprob_grads(policy: SegmentationPolicy, features: np.ndarray, bits: np.ndarray):
    """log pi(bits | features) over frames 1..T-1 and its parameter gradient."""
    logits, cache = policy.forward_logits(features)
    b = bits.astype(logits.dtype)
    logp_terms = b * log_sigmoid(logits) + (1.0 - b) * log_sigmoid(-logits)
    logp = float(logp_terms[1:].sum())
    dlogits = b - sigmoid(logits)
    dlogits[0] = 0.0
    return logp, policy.backward_logits(cache, dlogits)


def reinforce_step(
    policy: SegmentationPolicy,
    batch: list[tuple[np.ndarray, np.ndarray, float]],
    pset: ParamSet,
    optim: OptimConfig,
) -> float:
    """One policy-gradient ascent step on (features, sampled bits, reward R).

    Maximizes mean_b R_b * log pi(bits_b | X_b) by descending its negation;
    gradients are averaged over the batch in a fixed order.
    """
    pset.zero_grads()
    loss = 0.0
    scale = 1.0 / len(batch)
    for features, bits, reward in batch:
        logp, grads = boundary_logprob_grads(policy, features, bits)
        loss -= scale * reward * logp
        pset.accumulate(grads, scale=-scale * reward)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite REINFORCE loss {loss}")
    optimizer_step(pset, optim)
    return loss


def behavior_clone(
    policy: SegmentationPolicy,
    dataset: list[tuple[np.ndarray, np.ndarray]],
    epochs: int,
    pset: ParamSet,
    optim: OptimConfig,
    rng: np.random.Generator,
    class_weights: tuple[float, float] = (1.0, 5.0),
    batch_size: int = 128,
) -> float:
    """Weighted per-frame binary cross-entropy on (features, target bits)."""
    w0, w1 = class_weights
    last = 0.0
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), batch_size):
            chunk = order[start:start + batch_size]
            pset.zero_grads()
            n_frames = sum(len(dataset[i][1]) for i in chunk)
            loss = 0.0
            for i in chunk:
                features, target = dataset[i]
                if len(target) != features.shape[0]:
                    raise ValueError("target boundary length does not match features")
                logits, cache = policy.forward_logits(features)
                y = target.astype(logits.dtype)
                w = np.where(target == 1, w1, w0).astype(logits.dtype)
                # -[y log p + (1-y) log(1-p)] written on logits for stability
                bce = y * softplus(-logits) + (1.0 - y) * softplus(logits)
                loss += float((w * bce).sum()) / n_frames
                dlogits = w * (sigmoid(logits) - y) / n_frames
                pset.accumulate(policy.backward_logits(cache, dlogits))
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite behavior-cloning loss {loss}")
            optimizer_step(pset, optim)
            last = loss
    return last
