"""Finite-difference verification suite over every layer type.

Runs each differentiable building block on a small random shape and checks
its tape gradient against central differences, then spot-checks the full
pair loss on a random slice of network parameters.  The CLI ``gradcheck``
command and the acceptance tests both drive this.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, check_parameter_slice, gradient_check
from .layers import batch_norm, conv2d, linear, relu
from .model import PatchMatcher, fuse_concatenation, fuse_correlation
from .tensor import Tensor
from .train import head_loss

__all__ = ["run_gradcheck_suite", "END_TO_END"]

END_TO_END = "pair_loss_param_slice"


def run_gradcheck_suite(seed: int = 0, tol: float = 1e-2) -> dict:
    """Name -> GradCheckReport for every layer type plus the end-to-end loss."""
    rng = np.random.default_rng(seed)
    checks: dict = {}

    def rnd(*shape):
        return rng.standard_normal(shape).astype(np.float32)

    b = Tensor(rnd(6))
    checks["elementwise_mul"] = gradient_check(lambda t: T.mul(t, b), Tensor(rnd(6)), tol=tol)

    c = Tensor(rnd(2, 3))
    checks["concat"] = gradient_check(
        lambda t: T.concat(t, c, axis=1), Tensor(rnd(2, 4)), tol=tol
    )

    m = Tensor(rnd(4, 5))
    checks["matmul"] = gradient_check(lambda t: T.matmul(t, m), Tensor(rnd(3, 4)), tol=tol)

    w_sm = Tensor(rnd(5, 5))
    checks["softmax"] = gradient_check(
        lambda t: T.softmax(T.matmul(t, w_sm), axis=1), Tensor(rnd(2, 5)), tol=tol
    )

    # relu away from the kink
    x_relu = rnd(24)
    x_relu[np.abs(x_relu) < 0.2] = 0.5
    checks["relu"] = gradient_check(relu, Tensor(x_relu), tol=tol)

    cw = Tensor(rnd(3, 2, 3, 3) * 0.3, requires_grad=True)
    cb = Tensor(rnd(3) * 0.1, requires_grad=True)
    cx = rnd(1, 2, 6, 6)
    checks["conv2d_input"] = gradient_check(
        lambda t: conv2d(t, cw, cb), Tensor(cx), tol=tol
    )
    checks["conv2d_kernel"] = gradient_check(
        lambda t: conv2d(Tensor(cx), t, cb), Tensor(cw.data.copy()), tol=tol
    )

    gamma = Tensor(1.0 + 0.1 * rnd(2), requires_grad=True)
    beta = Tensor(0.1 * rnd(2), requires_grad=True)
    rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
    bx = rnd(4, 2, 3, 3)
    checks["batchnorm_train_input"] = gradient_check(
        lambda t: batch_norm(t, gamma, beta, rm, rv, training=True), Tensor(bx), tol=tol
    )
    checks["batchnorm_train_gamma"] = gradient_check(
        lambda t: batch_norm(Tensor(bx), t, beta, rm, rv, training=True),
        Tensor(gamma.data.copy()),
        tol=tol,
    )

    lw = Tensor(rnd(4, 6) * 0.4, requires_grad=True)
    lb = Tensor(rnd(4) * 0.1, requires_grad=True)
    checks["linear"] = gradient_check(
        lambda t: linear(t, lw, lb), Tensor(rnd(3, 6)), tol=tol
    )

    fr = Tensor(rnd(2, 8))
    checks["fuse_correlation"] = gradient_check(
        lambda t: fuse_correlation(t, fr), Tensor(rnd(2, 8)), tol=tol
    )
    checks["fuse_concatenation"] = gradient_check(
        lambda t: fuse_concatenation(t, fr), Tensor(rnd(2, 8)), tol=tol
    )

    labels = Tensor((np.arange(4) % 2).astype(np.float32))
    checks["head_loss"] = gradient_check(
        lambda t: head_loss(T.take_column(T.softmax(t, axis=1), 1), labels),
        Tensor(rnd(4, 2)),
        tol=tol,
    )

    # end-to-end: full pair loss, 10 random parameter elements
    model = PatchMatcher("both", seed=seed)
    model.train()
    rgb = Tensor(rnd(2, 3, 36, 36))
    lwir = Tensor(rnd(2, 3, 36, 36))
    pair_labels = Tensor(np.array([1.0, 0.0], np.float32))

    def pair_loss():
        probs = model.forward_pair(rgb, lwir)
        lc = head_loss(probs["corr"], pair_labels)
        lk = head_loss(probs["concat"], pair_labels)
        return lc + lk

    checks[END_TO_END] = check_parameter_slice(
        pair_loss, model.parameters(), n_elements=10, h=1e-2, tol=tol, seed=seed
    )
    return checks
