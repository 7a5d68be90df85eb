"""Minimal differentiable kernels for the project's three tiny 1-D CNNs.

Everything is plain numpy. Layers are functional: forward passes return
outputs, backward passes take the cached inputs back in and return exact
reverse-mode gradients. Parameters live in float32; gradient checking runs
the same code on float64 copies.

Array convention: sequences are (channels, time).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import binio

CKPT_MAGIC = b"RBCK"
CKPT_VERSION = 1

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(RuntimeError):
    """A loss or gradient went non-finite; the pending update was aborted."""


# ---------------------------------------------------------------------------
# activations (value, first and second derivative; the second derivative is
# needed for differentiating through input-gradient norms)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    phi = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


def gelu_grad2(x):
    phi = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return phi * (2.0 - x * x)


def identity(x):
    return x


def identity_grad(x):
    return np.ones_like(x)


def identity_grad2(x):
    return np.zeros_like(x)


ACTIVATIONS = {
    "gelu": (gelu, gelu_grad, gelu_grad2),
    "identity": (identity, identity_grad, identity_grad2),
}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def log_sigmoid(x):
    return -softplus(-x)


def softmax(z, axis=0):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=0):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(y, dy, axis=0):
    """Gradient through y = softmax(z): dz given dL/dy."""
    dot = (dy * y).sum(axis=axis, keepdims=True)
    return y * (dy - dot)


# ---------------------------------------------------------------------------
# 1-D convolution, same-length zero padding, stride 1


def conv1d(x, w, b=None):
    """Cross-correlation of x (C_in, T) with w (C_out, C_in, K) -> (C_out, T)."""
    c_in, t = x.shape
    c_out, c_in_w, k = w.shape
    if c_in != c_in_w:
        raise ValueError(f"input has {c_in} channels, kernel expects {c_in_w}")
    left = (k - 1) // 2
    xp = np.zeros((c_in, t + k - 1), dtype=x.dtype)
    xp[:, left:left + t] = x
    win = sliding_window_view(xp, k, axis=1)  # (C_in, T, K)
    y = np.einsum("ock,ctk->ot", w, win)
    if b is not None:
        y = y + b[:, None]
    return y


def conv1d_input_grad(dy, w, t):
    """dL/dx for conv1d, given upstream dy (C_out, T)."""
    c_out, c_in, k = w.shape
    left = (k - 1) // 2
    dyp = np.zeros((c_out, t + 2 * (k - 1)), dtype=dy.dtype)
    dyp[:, k - 1:k - 1 + t] = dy
    win = sliding_window_view(dyp, k, axis=1)  # (C_out, T + K - 1, K)
    wf = w[:, :, ::-1]
    dxp = np.einsum("ock,otk->ct", wf, win)
    return dxp[:, left:left + t]


def conv1d_param_grads(dy, x, k):
    """(dL/dw, dL/db) for conv1d."""
    c_in, t = x.shape
    left = (k - 1) // 2
    xp = np.zeros((c_in, t + k - 1), dtype=x.dtype)
    xp[:, left:left + t] = x
    win = sliding_window_view(xp, k, axis=1)
    dw = np.einsum("ot,ctk->ock", dy, win)
    return dw, dy.sum(axis=1)


class Conv1d:
    """Weight container; init is uniform +-1/sqrt(fan_in * k)."""

    def __init__(self, in_channels, out_channels, kernel_size, rng=None, dtype=np.float32):
        bound = 1.0 / math.sqrt(in_channels * kernel_size)
        if rng is None:
            self.w = np.zeros((out_channels, in_channels, kernel_size), dtype=dtype)
            self.b = np.zeros(out_channels, dtype=dtype)
        else:
            self.w = rng.uniform(-bound, bound, (out_channels, in_channels, kernel_size)).astype(dtype)
            self.b = rng.uniform(-bound, bound, out_channels).astype(dtype)

    @property
    def kernel_size(self):
        return self.w.shape[2]

    def forward(self, x):
        return conv1d(x, self.w, self.b)

    def backward(self, dy, x):
        """Returns (dx, dw, db)."""
        dw, db = conv1d_param_grads(dy, x, self.kernel_size)
        return conv1d_input_grad(dy, self.w, x.shape[1]), dw, db

    def astype(self, dtype):
        out = Conv1d(self.w.shape[1], self.w.shape[0], self.kernel_size)
        out.w = self.w.astype(dtype)
        out.b = self.b.astype(dtype)
        return out


# ---------------------------------------------------------------------------
# parameters and AdamW


@dataclass
class OptimConfig:
    learning_rate: float
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    schedule: str = "constant"  # "constant" | "cosine"
    total_steps: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.schedule == "cosine" and not self.total_steps:
            raise ValueError("cosine schedule needs total_steps")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def cosine_multiplier(step: int, total_steps: int) -> float:
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


class ParamSet:
    """Named parameter arrays with gradient accumulators and Adam moments.

    Holds live references: in-place optimizer updates are visible to the
    network that contributed the arrays.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params
        self.grads = {k: np.zeros_like(v) for k, v in params.items()}
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0

    def accumulate(self, grads: dict[str, np.ndarray], scale: float = 1.0):
        for k, g in grads.items():
            self.grads[k] += scale * g

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update({f"adam_m.{k}": v for k, v in self.m.items()})
        out.update({f"adam_v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int):
        for k in self.params:
            self.params[k][...] = arrays[k]
            self.m[k][...] = arrays[f"adam_m.{k}"]
            self.v[k][...] = arrays[f"adam_v.{k}"]
        self.step = step


def optimizer_step(pset: ParamSet, config: OptimConfig):
    """One AdamW update with decoupled weight decay; cosine-scales when set."""
    for name, g in pset.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}; step aborted")
    mult = cosine_multiplier(pset.step, config.total_steps) if config.schedule == "cosine" else 1.0
    lr = config.learning_rate * mult
    b1, b2 = config.betas
    t = pset.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in pset.params.items():
        g = pset.grads[name]
        m = pset.m[name]
        v = pset.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.epsilon)
        if config.weight_decay:
            update = update + config.weight_decay * p
        p -= lr * update
    pset.step += 1


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_max_rel_err(loss_fn, params: dict[str, np.ndarray], h: float = 1e-3) -> float:
    """Worst relative error between analytic and central-difference gradients.

    loss_fn() recomputes (loss, grads-dict) from the current parameter values;
    params must be float64 for the check to be meaningful at 1e-4. The error
    denominator is floored at 1e-2 so that near-zero gradient elements are
    compared absolutely (truncation noise of the h^2 stencil would otherwise
    dominate a vanishing denominator).
    """
    _, grads = loss_fn()
    worst = 0.0
    for name, p in params.items():
        g = grads[name]
        flat_p = p.reshape(-1)
        flat_g = np.asarray(g).reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            lo_plus, _ = loss_fn()
            flat_p[i] = orig - h
            lo_minus, _ = loss_fn()
            flat_p[i] = orig
            numeric = (lo_plus - lo_minus) / (2.0 * h)
            analytic = flat_g[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-2)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoints: named arrays + optimizer state + RNG state + step counter


def save_checkpoint(path, arrays: dict[str, np.ndarray], step: int = 0, rng: np.random.Generator | None = None):
    meta = {
        "step": step,
        "rng": rng.bit_generator.state if rng is not None else None,
        "arrays": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()],
    }
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        binio.write_header(fh, CKPT_MAGIC, CKPT_VERSION)
        binio.pack_u32(fh, len(blob))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, np.random.Generator | None]:
    with open(path, "rb") as fh:
        binio.read_header(fh, CKPT_MAGIC, CKPT_VERSION)
        (n,) = binio.unpack_u32(fh, 1)
        meta = json.loads(binio.read_exact(fh, n).decode("utf-8"))
        arrays = {}
        for spec in meta["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = binio.read_exact(fh, dtype.itemsize * count)
            arrays[spec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(spec["shape"]).copy()
    rng = None
    if meta["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
    return arrays, meta["step"], rng
