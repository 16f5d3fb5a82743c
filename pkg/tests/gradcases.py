"""Differentiable-op inventory shared by the unit tests and the acceptance suite.

Each case is ``(name, params, closure)``; the closure rebuilds a scalar graph
from float64 params so it can be handed to ``grad_check``.
"""

import numpy as np

from agpad import attention as A
from agpad import tensor as T
from agpad.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def op_cases(rng):
    """(name, params, closure) for every differentiable op."""
    a, b = t64(rng.standard_normal((3, 4)), True), t64(rng.standard_normal((4, 2)), True)
    c = t64(rng.standard_normal((3, 4)), True)
    w2 = t64(rng.standard_normal((2, 4)), True)
    x = t64(rng.standard_normal((2, 5, 5)), True)
    k, kb = t64(rng.standard_normal((3, 2, 3, 3)), True), t64(rng.standard_normal(3), True)
    s = t64(rng.standard_normal(1), True)
    v = t64(rng.standard_normal(4), True)
    fcw, fcb = t64(rng.standard_normal((2, 4)), True), t64(rng.standard_normal(2), True)
    # project non-scalar outputs to a scalar with fixed random weights
    def proj(out):
        return T.sum_all(T.mul(out, t64(np.cos(np.arange(out.size)).reshape(out.shape))))

    x_relu = t64(rng.standard_normal((3, 3)) + np.sign(rng.standard_normal((3, 3))) * 0.1, True)
    return [
        ("matmul", [a, b], lambda: proj(T.matmul(a, b))),
        ("softmax_cols", [a], lambda: proj(T.softmax_cols(a))),
        ("conv2d", [x, k, kb], lambda: proj(T.conv2d(x, k, kb, stride=1, padding=1))),
        ("conv2d_stride2", [x, k, kb], lambda: proj(T.conv2d(x, k, kb, stride=2, padding=1))),
        ("maxpool2d", [x], lambda: proj(T.maxpool2d(x, 2, 1))),
        ("global_avg_pool", [x], lambda: proj(T.global_avg_pool(x))),
        ("add", [a, c], lambda: proj(T.add(a, c))),
        ("mul", [a], lambda: proj(T.mul(a, a))),
        ("relu", [x_relu], lambda: proj(T.relu(x_relu))),
        ("reshape", [a], lambda: proj(T.reshape(a, (2, 6)))),
        ("transpose", [x], lambda: proj(T.transpose(x, (2, 0, 1)))),
        ("dense", [v, fcw, fcb], lambda: proj(T.dense(v, fcw, fcb))),
        ("scale", [a, s], lambda: proj(T.scale(a, s))),
        ("concat", [a, w2], lambda: proj(T.concat([T.transpose(a), T.transpose(w2)], axis=1))),
        ("select", [v], lambda: T.select(T.softmax(v), 2)),
        ("cross_entropy", [w2], lambda: T.softmax_cross_entropy(T.transpose(w2), np.array([0, 1, 1, 0]))),
    ]


def attention_cases(rng):
    a = t64(rng.standard_normal((4, 3, 3)), True)
    p = A.PamParams.init(4, 2, rng, np.float64, alpha=float(rng.standard_normal()))
    c = A.CamParams.init(np.float64, beta=float(rng.standard_normal()))
    return [
        ("pam_forward", [a, *p.parameters().values()], lambda: T.sum_all(A.pam_forward(a, p))),
        ("cam_forward", [a, c.beta], lambda: T.sum_all(A.cam_forward(a, c))),
    ]
