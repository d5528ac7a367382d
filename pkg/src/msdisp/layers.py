"""Differentiable layers: valid 2-D convolution, batch norm, ReLU, linear.

Convolution is cross-correlation (no kernel flip), stride 1, no padding.
It lowers to one large sgemm per direction via an im2col scratch laid out
channel-major, which keeps every heavy op a single BLAS call on this
single-core target.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, apply_op, scratch_buffer, scratch_release

__all__ = [
    "Conv2d",
    "BatchNorm2d",
    "Linear",
    "conv2d",
    "batch_norm",
    "relu",
    "linear",
    "init_parameters",
]


def _fill_cols(cols: np.ndarray, x: np.ndarray, k: int, ho: int, wo: int) -> None:
    # cols: (C, k, k, B, ho, wo); x: (B, C, H, W)
    xt = x.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + ho, j : j + wo]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, name: str = "conv") -> Tensor:
    """Valid cross-correlation plus bias.

    x: (B, C_in, H, W); weight: (C_out, C_in, k, k); bias: (C_out,).
    Output is (B, C_out, H-k+1, W-k+1).
    """
    B, C, H, W = x.shape
    Co, Ci, k, k2 = weight.shape
    if Ci != C:
        raise ValueError(f"{name}: input has {C} channels, kernel expects {Ci}")
    if H < k or W < k:
        raise ValueError(
            f"{name}: input {H}x{W} is smaller than the {k}x{k} kernel"
        )
    ho, wo = H - k + 1, W - k + 1
    L = B * ho * wo
    K = C * k * k

    cols = scratch_buffer((C, k, k, B, ho, wo))
    _fill_cols(cols, x.data, k, ho, wo)
    cm = cols.reshape(K, L)
    wr = weight.data.reshape(Co, K)
    out_t = scratch_buffer((Co, L))
    np.matmul(wr, cm, out=out_t)
    scratch_release(cols)
    out_t += bias.data[:, None]
    out = scratch_buffer((B, Co, ho, wo))
    np.copyto(out, out_t.reshape(Co, B, ho, wo).transpose(1, 0, 2, 3))
    scratch_release(out_t)

    xd = x.data

    def bwd(g, needs):
        g_t = scratch_buffer((Co, B, ho, wo))
        np.copyto(g_t, g.transpose(1, 0, 2, 3))
        gm = g_t.reshape(Co, L)
        db = gm.sum(axis=1) if needs[2] else None
        dw = None
        if needs[1]:
            cols_b = scratch_buffer((C, k, k, B, ho, wo))
            _fill_cols(cols_b, xd, k, ho, wo)
            dw = (gm @ cols_b.reshape(K, L).T).reshape(Co, C, k, k)
            scratch_release(cols_b)
        dx = None
        if needs[0]:
            dcols = scratch_buffer((C, k, k, B, ho, wo))
            np.matmul(wr.T, gm, out=dcols.reshape(K, L))
            dx = scratch_buffer((B, C, H, W))
            dx_t = dx.transpose(1, 0, 2, 3)
            dx_t[:] = 0.0
            for i in range(k):
                for j in range(k):
                    dx_t[:, :, i : i + ho, j : j + wo] += dcols[:, i, j]
            scratch_release(dcols)
        scratch_release(g_t)
        return dx, dw, db

    return apply_op("conv2d", out, (x, weight, bias), bwd)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); subgradient 0 at 0."""
    out = scratch_buffer(x.shape)
    np.maximum(x.data, np.float32(0), out=out)

    def bwd(g, needs):
        gi = scratch_buffer(out.shape)
        np.greater(out, 0, out=gi, casting="unsafe")
        gi *= g
        return (gi,)

    return apply_op("relu", out, (x,), bwd)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over a (B, C, H, W) tensor.

    Train mode normalizes with batch statistics (biased variance) and updates
    the running buffers in place by exponential moving average; eval mode is
    a fixed per-channel affine map from the running statistics.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    m = B * H * W

    if training:
        if B < 2:
            raise ValueError(
                f"batch_norm in train mode needs a batch of at least 2, got {B}"
            )
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + np.float32(eps))
        x_hat = scratch_buffer(x.shape)
        np.subtract(x.data, mu[None, :, None, None], out=x_hat)
        x_hat *= inv[None, :, None, None]
        out = scratch_buffer(x.shape)
        np.multiply(x_hat, gamma.data[None, :, None, None], out=out)
        out += beta.data[None, :, None, None]
        running_mean *= np.float32(1.0 - momentum)
        running_mean += np.float32(momentum) * mu
        running_var *= np.float32(1.0 - momentum)
        running_var += np.float32(momentum) * var
        gd = gamma.data

        def bwd_train(g, needs):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = np.einsum("bchw,bchw->c", g, x_hat, dtype=np.float32)
            dx = None
            if needs[0]:
                dx = scratch_buffer(x_hat.shape)
                np.multiply(x_hat, (dgamma / m)[None, :, None, None], out=dx)
                np.subtract(g, dx, out=dx)
                dx -= (dbeta / m)[None, :, None, None]
                dx *= (gd * inv)[None, :, None, None]
            return (
                dx,
                dgamma if needs[1] else None,
                dbeta if needs[2] else None,
            )

        return apply_op("batch_norm", out, (x, gamma, beta), bwd_train)

    inv = 1.0 / np.sqrt(running_var + np.float32(eps))
    sc = (gamma.data * inv).astype(np.float32)
    sh = (beta.data - running_mean * sc).astype(np.float32)
    out = scratch_buffer(x.shape)
    np.multiply(x.data, sc[None, :, None, None], out=out)
    out += sh[None, :, None, None]
    xd = x.data
    rm = running_mean.copy()

    def bwd_eval(g, needs):
        dbeta = g.sum(axis=(0, 2, 3))
        dx = None
        if needs[0]:
            dx = scratch_buffer(xd.shape)
            np.multiply(g, sc[None, :, None, None], out=dx)
        dgamma = None
        if needs[1]:
            gx = np.einsum("bchw,bchw->c", g, xd, dtype=np.float32)
            dgamma = inv * (gx - dbeta * rm)
        return dx, dgamma, dbeta if needs[2] else None

    return apply_op("batch_norm_eval", out, (x, gamma, beta), bwd_eval)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias for x of shape (N, n_in), weight (n_out, n_in)."""
    if x.ndim != 2:
        raise ValueError(f"linear expects a 2-D input, got {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear: input width {x.shape[1]} does not match weight {weight.shape}"
        )
    out = scratch_buffer((x.shape[0], weight.shape[0]))
    np.matmul(x.data, weight.data.T, out=out)
    out += bias.data
    xd, wd = x.data, weight.data

    def bwd(g, needs):
        dx = g @ wd if needs[0] else None
        dw = g.T @ xd if needs[1] else None
        db = g.sum(axis=0) if needs[2] else None
        return dx, dw, db

    return apply_op("linear", out, (x, weight, bias), bwd)


class Conv2d:
    """Valid convolution layer; stride 1, no padding."""

    def __init__(self, c_in: int, c_out: int, k: int, name: str = "conv"):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.name = name
        self.weight = Tensor(np.zeros((c_out, c_in, k, k), np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True)

    def init(self, rng: np.random.Generator) -> None:
        bound = np.sqrt(6.0 / (self.c_in * self.k * self.k))
        self.weight.data[:] = rng.uniform(
            -bound, bound, self.weight.shape
        ).astype(np.float32)
        self.bias.data[:] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, name=self.name)

    def parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


class BatchNorm2d:
    """Batch normalization with running statistics and train/eval modes."""

    def __init__(self, c: int, name: str = "bn", momentum: float = 0.1, eps: float = 1e-5):
        self.c = c
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)
        self.training = True

    def init(self, rng: np.random.Generator) -> None:
        self.gamma.data[:] = 1.0
        self.beta.data[:] = 0.0
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
        )

    def parameters(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def state(self):
        return [
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]


class Linear:
    def __init__(self, n_in: int, n_out: int, name: str = "fc"):
        self.n_in, self.n_out = n_in, n_out
        self.name = name
        self.weight = Tensor(np.zeros((n_out, n_in), np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, np.float32), requires_grad=True)

    def init(self, rng: np.random.Generator) -> None:
        bound = np.sqrt(6.0 / self.n_in)
        self.weight.data[:] = rng.uniform(
            -bound, bound, self.weight.shape
        ).astype(np.float32)
        self.bias.data[:] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


def init_parameters(layer, seed_or_rng) -> None:
    """Seed-deterministic init: uniform +-sqrt(6/fan_in) weights, zero biases,
    unit-affine batch norm with (0, 1) running statistics."""
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    layer.init(rng)
