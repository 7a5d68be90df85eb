"""Phoneme predictor initialization and adversarial refinement.

Initial segment features come from PCA -> k-means change-point segmentation ->
mean pooling -> adjacent pooling. The predictor (generator, one conv layer
over segments) is then trained against a two-conv discriminator with the
four-term objective: adversarial loss on softmaxed, argmax-deduplicated
generator logits vs one-hot text, a gradient penalty on interpolated
discriminator inputs, a smoothness penalty between neighboring logits, and a
diversity term rewarding entropy of the position-averaged output distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lm import NGramLM
from .metrics import unsup_metric
from .nnet import (
    ACTIVATIONS,
    Conv1d,
    NonFiniteError,
    OptimConfig,
    ParamSet,
    conv1d,
    conv1d_input_grad,
    conv1d_param_grads,
    log_sigmoid,
    optimizer_step,
    sigmoid,
    softmax,
    softmax_backward,
)
from .segmenter import dedup, mean_pool


class DivergenceError(RuntimeError):
    """Adversarial training went non-finite or collapsed to one phoneme."""


# ---------------------------------------------------------------------------
# feature preprocessing


@dataclass
class PcaModel:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (d, d_out), orthonormal columns
    explained: np.ndarray  # (d_out,) variance shares, descending


def fit_pca(pool: np.ndarray, d_out: int) -> PcaModel:
    n, d = pool.shape
    if n <= d_out:
        raise ValueError(f"need more than {d_out} pooled frames, got {n}")
    mean = pool.mean(axis=0)
    xc = (pool - mean).astype(np.float64)
    cov = xc.T @ xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    if vals[d_out - 1] <= max(vals[0] * 1e-12, 0.0):
        raise ValueError(f"feature pool is rank deficient below {d_out}")
    comp = vecs[:, :d_out]
    flip = np.sign(comp[np.abs(comp).argmax(axis=0), np.arange(d_out)])
    comp = comp * flip
    return PcaModel(
        mean=mean.astype(np.float32),
        components=comp.astype(np.float32),
        explained=vals[:d_out] / vals.sum(),
    )


def apply_pca(model: PcaModel, features: np.ndarray) -> np.ndarray:
    return (features - model.mean) @ model.components


@dataclass
class KMeansModel:
    centroids: np.ndarray  # (k, d)
    inertia: float


def _sq_dists(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return (
        (data * data).sum(axis=1)[:, None]
        - 2.0 * data @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )


def _kmeans_pp_init(data, k, rng):
    first = int(rng.integers(len(data)))
    centroids = [data[first]]
    d2 = ((data - data[first]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        total = d2.sum()
        if total <= 0:  # fewer distinct points than requested clusters
            raise ValueError(f"data does not support {k} distinct centroids")
        probs = d2 / total
        nxt = int(rng.choice(len(data), p=probs))
        centroids.append(data[nxt])
        d2 = np.minimum(d2, ((data - data[nxt]) ** 2).sum(axis=1))
    return np.stack(centroids)


def fit_kmeans(data: np.ndarray, k: int, rng: np.random.Generator, n_init: int = 4, max_iter: int = 100) -> KMeansModel:
    if k < 2:
        raise ValueError("k must be at least 2")
    data = np.asarray(data, dtype=np.float64)
    best = None
    for _ in range(n_init):
        centroids = _kmeans_pp_init(data, k, rng)
        for _ in range(max_iter):
            d2 = _sq_dists(data, centroids)
            assign = d2.argmin(axis=1)
            new = np.zeros_like(centroids)
            moved = 0.0
            for c in range(k):
                members = data[assign == c]
                if len(members) == 0:
                    # split pressure: steal the point farthest from its centroid
                    worst = d2[np.arange(len(data)), assign].argmax()
                    new[c] = data[worst]
                    assign[worst] = c
                else:
                    new[c] = members.mean(axis=0)
                moved = max(moved, float(((new[c] - centroids[c]) ** 2).sum()))
            centroids = new
            if moved < 1e-12:
                break
        inertia = float(_sq_dists(data, centroids).min(axis=1).sum())
        if best is None or inertia < best.inertia:
            best = KMeansModel(centroids.astype(np.float32), inertia)
    return best


def kmeans_segment(model: KMeansModel, reduced: np.ndarray) -> np.ndarray:
    """Boundary bit wherever the nearest-centroid id changes (frame 0 forced)."""
    assign = _sq_dists(reduced.astype(np.float64), model.centroids.astype(np.float64)).argmin(axis=1)
    bits = np.ones(len(assign), dtype=np.uint8)
    bits[1:] = assign[1:] != assign[:-1]
    return bits


def init_segment_features(pca: PcaModel, km: KMeansModel, features: np.ndarray):
    """Initial-stage preprocessing of one utterance.

    PCA-reduce, segment at k-means cluster changes, mean-pool per segment,
    then adjacent-pool. Returns (pooled segment features, pooled boundary).
    """
    reduced = apply_pca(pca, features)
    bits = kmeans_segment(km, reduced)
    segments = mean_pool(reduced, bits)
    return adjacent_pool(segments), adjacent_pool_boundary(bits)


def adjacent_pool(segments: np.ndarray) -> np.ndarray:
    """Average consecutive non-overlapping pairs; an odd tail is kept as-is."""
    n = len(segments)
    if n == 0:
        raise ValueError("no segments to pool")
    if n == 1:
        return segments.copy()
    paired = segments[: 2 * (n // 2)].reshape(n // 2, 2, segments.shape[1]).mean(axis=1)
    if n % 2:
        paired = np.concatenate([paired, segments[-1:]], axis=0)
    return paired.astype(segments.dtype)


def adjacent_pool_boundary(bits: np.ndarray) -> np.ndarray:
    """The boundary sequence implied by adjacent pooling of its segments."""
    idx = np.flatnonzero(bits)
    out = np.array(bits, dtype=np.uint8, copy=True)
    out[idx[1::2]] = 0
    return out


# ---------------------------------------------------------------------------
# models


class Generator:
    """Single conv layer mapping segment features to per-segment logits."""

    def __init__(self, in_dim: int, n_symbols: int, kernel_size: int = 9, rng=None, dtype=np.float32):
        self.in_dim = in_dim
        self.n_symbols = n_symbols
        self.conv = Conv1d(in_dim, n_symbols, kernel_size, rng, dtype)

    def parameters(self):
        return {"conv.w": self.conv.w, "conv.b": self.conv.b}

    def load_parameters(self, arrays):
        for k, v in self.parameters().items():
            v[...] = arrays[k]

    def astype(self, dtype) -> "Generator":
        clone = Generator(self.in_dim, self.n_symbols, self.conv.kernel_size)
        clone.conv = self.conv.astype(dtype)
        return clone

    def forward_logits(self, segments: np.ndarray) -> np.ndarray:
        """segments (n, d) -> logits (n_symbols, n)."""
        return self.conv.forward(np.ascontiguousarray(segments.T))

    def backward(self, dlogits: np.ndarray, segments: np.ndarray):
        _, dw, db = self.conv.backward(dlogits, np.ascontiguousarray(segments.T))
        return {"conv.w": dw, "conv.b": db}

    def predict_ids(self, segments: np.ndarray) -> np.ndarray:
        return self.forward_logits(segments).argmax(axis=0)


class Discriminator:
    """Two conv layers over |V|-dim distributions; score = mean over positions.

    The raw (pre-sigmoid) score feeds the gradient penalty; the adversarial
    loss uses sigma(score) as D's real/fake probability.
    """

    def __init__(self, n_symbols: int, hidden: int = 64, kernels=(3, 3), activation="gelu", rng=None, dtype=np.float32):
        self.n_symbols = n_symbols
        self.hidden = hidden
        self.activation = activation
        self.act, self.act_grad, self.act_grad2 = ACTIVATIONS[activation]
        self.conv1 = Conv1d(n_symbols, hidden, kernels[0], rng, dtype)
        self.conv2 = Conv1d(hidden, 1, kernels[1], rng, dtype)

    def parameters(self):
        return {"conv1.w": self.conv1.w, "conv1.b": self.conv1.b, "conv2.w": self.conv2.w, "conv2.b": self.conv2.b}

    def load_parameters(self, arrays):
        for k, v in self.parameters().items():
            v[...] = arrays[k]

    def astype(self, dtype) -> "Discriminator":
        clone = Discriminator(self.n_symbols, self.hidden, activation=self.activation)
        clone.conv1 = self.conv1.astype(dtype)
        clone.conv2 = self.conv2.astype(dtype)
        return clone

    def score(self, x: np.ndarray):
        """x (n_symbols, N) -> (scalar score, cache)."""
        if x.shape[0] != self.n_symbols:
            raise ValueError(f"discriminator expects {self.n_symbols}-dim distributions, got {x.shape[0]}")
        z1 = self.conv1.forward(x)
        h = self.act(z1)
        z2 = self.conv2.forward(h)
        return float(z2[0].mean()), (x, z1, h)

    def backward(self, cache, dscore: float):
        x, z1, h = cache
        n = x.shape[1]
        dz2 = np.full((1, n), dscore / n, dtype=x.dtype)
        dh, dw2, db2 = self.conv2.backward(dz2, h)
        dz1 = dh * self.act_grad(z1)
        dx, dw1, db1 = self.conv1.backward(dz1, x)
        return dx, {"conv1.w": dw1, "conv1.b": db1, "conv2.w": dw2, "conv2.b": db2}

    def input_gradient(self, x: np.ndarray) -> np.ndarray:
        """d(score)/d(input), closed form."""
        n = x.shape[1]
        z1 = self.conv1.forward(x)
        r = np.full((1, n), 1.0 / n, dtype=x.dtype)
        u = conv1d_input_grad(r, self.conv2.w, n)
        q = self.act_grad(z1) * u
        return conv1d_input_grad(q, self.conv1.w, n)

    def gp_grads(self, x: np.ndarray):
        """((|grad_x score| - 1)^2, its exact parameter gradients) at one input.

        Differentiating the input-gradient norm in the parameters needs the
        activation's second derivative; all paths are written out by hand.
        """
        n = x.shape[1]
        z1 = self.conv1.forward(x)
        ap = self.act_grad(z1)
        r = np.full((1, n), 1.0 / n, dtype=x.dtype)
        u = conv1d_input_grad(r, self.conv2.w, n)
        q = ap * u
        gs = conv1d_input_grad(q, self.conv1.w, n)
        m = float(np.sqrt((gs * gs).sum()))
        gp = (m - 1.0) ** 2
        zeros = {k: np.zeros_like(v) for k, v in self.parameters().items()}
        if m < 1e-12:
            return gp, zeros
        factor = 2.0 * (m - 1.0) / m
        v = gs
        c = conv1d(v, self.conv1.w)  # no bias: comes from the adjoint identity
        dw2 = conv1d_param_grads(r, ap * c, self.conv2.kernel_size)[0]
        dz1 = self.act_grad2(z1) * u * c
        db1 = dz1.sum(axis=1)
        dw1 = conv1d_param_grads(dz1, x, self.conv1.kernel_size)[0]
        dw1 += conv1d_param_grads(q, v, self.conv1.kernel_size)[0]
        return gp, {
            "conv1.w": factor * dw1,
            "conv1.b": factor * db1,
            "conv2.w": factor * dw2,
            "conv2.b": zeros["conv2.b"],
        }


# ---------------------------------------------------------------------------
# logit shortening and loss pieces


def shorten_logits(logits: np.ndarray):
    """Average logits over runs of equal argmax; returns (short, run_starts)."""
    ids = logits.argmax(axis=0)
    starts = np.flatnonzero(np.concatenate(([True], ids[1:] != ids[:-1])))
    counts = np.diff(np.append(starts, logits.shape[1]))
    short = np.add.reduceat(logits, starts, axis=1) / counts.astype(logits.dtype)
    return short, starts


def shorten_backward(dshort: np.ndarray, run_starts: np.ndarray, n: int) -> np.ndarray:
    counts = np.diff(np.append(run_starts, n))
    run_id = np.repeat(np.arange(len(run_starts)), counts)
    return dshort[:, run_id] / counts[run_id].astype(dshort.dtype)


def one_hot(ids, n_symbols: int, dtype=np.float32) -> np.ndarray:
    ids = np.asarray(ids)
    out = np.zeros((n_symbols, len(ids)), dtype=dtype)
    out[ids, np.arange(len(ids))] = 1.0
    return out


def smoothness_penalty(short: np.ndarray) -> float:
    d = short[:, 1:] - short[:, :-1]
    return float((d * d).sum())


def smoothness_grad(short: np.ndarray) -> np.ndarray:
    g = np.zeros_like(short)
    d = short[:, 1:] - short[:, :-1]
    g[:, 1:] += 2.0 * d
    g[:, :-1] -= 2.0 * d
    return g


def diversity_loss(y: np.ndarray) -> float:
    """Negative entropy of the position-averaged distribution (min -ln V)."""
    p = y.mean(axis=1)
    return float((p * np.log(np.maximum(p, 1e-30))).sum())


def diversity_grad_y(y: np.ndarray) -> np.ndarray:
    p = y.mean(axis=1)
    dp = np.log(np.maximum(p, 1e-30)) + 1.0
    return np.repeat(dp[:, None], y.shape[1], axis=1) / y.shape[1]


@dataclass(frozen=True)
class GanWeights:
    grad_penalty: float = 1.5  # lambda
    smoothness: float = 0.5  # gamma
    diversity: float = 3.0  # eta

    def __post_init__(self):
        vals = (self.grad_penalty, self.smoothness, self.diversity)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("GAN weights must be finite and nonnegative")


def generator_inputs(gen: Generator, segments: np.ndarray):
    """Generator forward through shortening and softmax: what D sees for one
    speech sample, with everything the backward pass needs."""
    logits = gen.forward_logits(segments)
    short, starts = shorten_logits(logits)
    y = softmax(short, axis=0)
    return logits, short, starts, y


def generator_grads(gen: Generator, disc: Discriminator, batch, weights: GanWeights, non_saturating: bool = True):
    """Loss parts and generator-parameter gradients for one speech batch.

    The generator minimizes adv + gamma * smoothness + eta * diversity, where
    adv is -E[log D(G(S))] (non-saturating) or E[log(1 - D(G(S)))].
    """
    scale = 1.0 / len(batch)
    grads = None
    adv = sp = pd = 0.0
    for segments in batch:
        logits, short, starts, y = generator_inputs(gen, segments)
        s, cache = disc.score(y)
        prob = sigmoid(s)
        if non_saturating:
            adv += -float(log_sigmoid(np.float64(s))) * scale
            ds = (prob - 1.0) * scale
        else:
            adv += float(log_sigmoid(np.float64(-s))) * scale
            ds = -prob * scale
        dy, _ = disc.backward(cache, ds)
        sp_u = smoothness_penalty(short)
        pd_u = diversity_loss(y)
        sp += sp_u * scale
        pd += pd_u * scale
        dy = dy + weights.diversity * scale * diversity_grad_y(y)
        dshort = softmax_backward(y, dy, axis=0)
        dshort += weights.smoothness * scale * smoothness_grad(short)
        dlogits = shorten_backward(dshort, starts, logits.shape[1])
        g = gen.backward(dlogits, segments)
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    parts = {"adv": adv, "l_sp": sp, "l_pd": pd}
    return parts, grads


def discriminator_adv_grads(disc: Discriminator, fake_batch, real_batch):
    """-E[log D(real)] - E[log(1 - D(fake))] and its discriminator gradients."""
    grads = {k: np.zeros_like(v) for k, v in disc.parameters().items()}
    log_d_real = 0.0
    log_1m_d_fake = 0.0
    for x in real_batch:
        s, cache = disc.score(x)
        log_d_real += float(log_sigmoid(np.float64(s))) / len(real_batch)
        ds = (sigmoid(s) - 1.0) / len(real_batch)  # d(-log sigma(s))/ds
        _, g = disc.backward(cache, ds)
        for k in grads:
            grads[k] += g[k]
    for x in fake_batch:
        s, cache = disc.score(x)
        log_1m_d_fake += float(log_sigmoid(np.float64(-s))) / len(fake_batch)
        ds = sigmoid(s) / len(fake_batch)  # d(softplus(s))/ds
        _, g = disc.backward(cache, ds)
        for k in grads:
            grads[k] += g[k]
    loss = -(log_d_real + log_1m_d_fake)
    return {"log_d_real": log_d_real, "log_1m_d_fake": log_1m_d_fake, "loss": loss}, grads


def grad_penalty_batch(disc: Discriminator, interpolated):
    """Mean gradient penalty over interpolated inputs, with parameter grads."""
    grads = {k: np.zeros_like(v) for k, v in disc.parameters().items()}
    total = 0.0
    for x in interpolated:
        gp, g = disc.gp_grads(x)
        total += gp / len(interpolated)
        for k in grads:
            grads[k] += g[k] / len(interpolated)
    return total, grads


def interpolate_pairs(fake_batch, real_batch, rng: np.random.Generator):
    """Pairwise alpha-blends of fake and real inputs, cropped to equal length."""
    out = []
    for fake, real in zip(fake_batch, real_batch):
        n = min(fake.shape[1], real.shape[1])
        alpha = rng.random(dtype=np.float64)
        out.append((alpha * fake[:, :n] + (1.0 - alpha) * real[:, :n]).astype(fake.dtype))
    return out


@dataclass
class GanLossReport:
    l_gan: float  # E[log D(Z)] + E[log(1 - D(G(S)))]
    l_gp: float
    l_sp: float
    l_pd: float
    d_loss: float  # what the discriminator minimizes
    g_loss: float  # what the generator minimizes


def gan_losses(gen: Generator, disc: Discriminator, speech_batch, real_batch, weights: GanWeights, rng: np.random.Generator, non_saturating: bool = True) -> GanLossReport:
    """Evaluate all loss components on one batch without touching parameters."""
    fakes = [generator_inputs(gen, s)[3] for s in speech_batch]
    if fakes and real_batch and fakes[0].shape[0] != real_batch[0].shape[0]:
        raise ValueError("generated and real distributions have different widths")
    parts, _ = discriminator_adv_grads(disc, fakes, real_batch)
    gp, _ = grad_penalty_batch(disc, interpolate_pairs(fakes, real_batch, rng))
    gparts, _ = generator_grads(gen, disc, speech_batch, weights, non_saturating)
    l_gan = parts["log_d_real"] + parts["log_1m_d_fake"]
    return GanLossReport(
        l_gan=l_gan,
        l_gp=gp,
        l_sp=gparts["l_sp"],
        l_pd=gparts["l_pd"],
        d_loss=parts["loss"] + weights.grad_penalty * gp,
        g_loss=gparts["adv"] + weights.smoothness * gparts["l_sp"] + weights.diversity * gparts["l_pd"],
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass
class GanTrainConfig:
    steps: int
    batch_size: int = 16
    eval_interval: int = 250
    gen_lr: float = 5e-4
    disc_lr: float = 5e-4
    weight_decay: float = 1e-4
    non_saturating: bool = True
    divergence_patience: int = 100


@dataclass
class GanTrainResult:
    best_metric: float
    best_step: int
    best_gen_arrays: dict
    final_gen_arrays: dict
    history: list = field(default_factory=list)


def generator_predictions(gen: Generator, segment_seqs) -> list[np.ndarray]:
    """De-duplicated argmax predictions for a list of segment-feature arrays."""
    return [dedup(gen.predict_ids(s)) for s in segment_seqs]


def train_gan(
    gen: Generator,
    disc: Discriminator,
    speech_train: list[np.ndarray],
    speech_valid: list[np.ndarray],
    text_sents: list[np.ndarray],
    vlm: NGramLM,
    weights: GanWeights,
    cfg: GanTrainConfig,
    rng: np.random.Generator,
    loss_csv=None,
) -> GanTrainResult:
    """Alternating 1:1 generator/discriminator updates; the returned best
    checkpoint (lowest unsupervised validation metric, step 0 included) is
    loaded back into the generator."""
    g_pset = ParamSet(gen.parameters())
    d_pset = ParamSet(disc.parameters())
    g_optim = OptimConfig(learning_rate=cfg.gen_lr, weight_decay=cfg.weight_decay)
    d_optim = OptimConfig(learning_rate=cfg.disc_lr, weight_decay=cfg.weight_decay)
    n_sym = gen.n_symbols

    def evaluate() -> float:
        return unsup_metric(generator_predictions(gen, speech_valid), vlm)

    best_metric = evaluate()
    best_step = 0
    best_arrays = {k: v.copy() for k, v in gen.parameters().items()}
    history = [(0, best_metric)]
    csv_fh = open(loss_csv, "w") if loss_csv else None
    if csv_fh:
        csv_fh.write("step,l_gan_g,l_gan_d,l_gp,l_sp,l_pd,unsup_metric_at_eval\n")
    collapse_streak = 0
    try:
        for step in range(1, cfg.steps + 1):
            # discriminator update
            fake_idx = rng.integers(0, len(speech_train), cfg.batch_size)
            real_idx = rng.integers(0, len(text_sents), cfg.batch_size)
            fakes = [generator_inputs(gen, speech_train[i])[3] for i in fake_idx]
            reals_onehot = [one_hot(text_sents[i], n_sym) for i in real_idx]
            parts, adv_grads = discriminator_adv_grads(disc, fakes, reals_onehot)
            gp, gp_grads = grad_penalty_batch(disc, interpolate_pairs(fakes, reals_onehot, rng))
            d_pset.zero_grads()
            d_pset.accumulate(adv_grads)
            d_pset.accumulate(gp_grads, scale=weights.grad_penalty)
            optimizer_step(d_pset, d_optim)

            # generator update
            g_idx = rng.integers(0, len(speech_train), cfg.batch_size)
            g_batch = [speech_train[i] for i in g_idx]
            gparts, g_grads = generator_grads(gen, disc, g_batch, weights, cfg.non_saturating)
            g_pset.zero_grads()
            g_pset.accumulate(g_grads)
            optimizer_step(g_pset, g_optim)

            values = [parts["loss"], gp, gparts["adv"], gparts["l_sp"], gparts["l_pd"]]
            if not all(np.isfinite(v) for v in values):
                raise DivergenceError(f"non-finite loss at step {step}: {values}")
            symbols_seen = set()
            for s in g_batch:
                symbols_seen.update(np.unique(gen.predict_ids(s)).tolist())
            collapse_streak = collapse_streak + 1 if len(symbols_seen) == 1 else 0
            if collapse_streak >= cfg.divergence_patience:
                raise DivergenceError(
                    f"generator collapsed to symbol {symbols_seen.pop()} for "
                    f"{collapse_streak} consecutive steps (step {step})"
                )

            metric_cell = ""
            if step % cfg.eval_interval == 0 or step == cfg.steps:
                metric = evaluate()
                history.append((step, metric))
                metric_cell = f"{metric:.6f}"
                if metric < best_metric:
                    best_metric = metric
                    best_step = step
                    best_arrays = {k: v.copy() for k, v in gen.parameters().items()}
            if csv_fh:
                l_gan_d = parts["log_d_real"] + parts["log_1m_d_fake"]
                csv_fh.write(
                    f"{step},{gparts['adv']:.6f},{l_gan_d:.6f},{gp:.6f},"
                    f"{gparts['l_sp']:.6f},{gparts['l_pd']:.6f},{metric_cell}\n"
                )
    except NonFiniteError as exc:
        raise DivergenceError(str(exc)) from exc
    finally:
        if csv_fh:
            csv_fh.close()
    final_arrays = {k: v.copy() for k, v in gen.parameters().items()}
    gen.load_parameters(best_arrays)
    return GanTrainResult(
        best_metric=best_metric,
        best_step=best_step,
        best_gen_arrays=best_arrays,
        final_gen_arrays=final_arrays,
        history=history,
    )
