"""Two-layer perceptrons with hand-written backward passes, the distance
losses used for weight regression, and the Adam optimiser.

The networks here are deliberately small and explicit: a ``LinearLayer``
holds its parameters and gradient accumulators, and ``MlpTwoLayer`` composes
two layers with a rectifier between them (the encoder half ends in the
rectifier, the decoder half is purely affine). Gradients are derived by
chain rule in closed form rather than by an autodiff framework, so the test
suite can check them against central finite differences as a genuinely
independent second route.
"""

import numpy as np

from .errors import IcisError, ShapeMismatchError, ZeroNormError
from .tensor import RngState, as_matrix, as_vector, rand_normal

# ---------------------------------------------------------------------------
# distances


def cosine_distance(v, q) -> float:
    """1 - cos(v, q). Range [0, 2]; both vectors must have positive norm."""
    v = as_vector(v)
    q = as_vector(q)
    if v.shape != q.shape:
        raise ShapeMismatchError("cosine_distance operands differ", left=v.shape, right=q.shape)
    nv = np.linalg.norm(v)
    nq = np.linalg.norm(q)
    if nv == 0.0 or nq == 0.0:
        raise ZeroNormError("cosine distance is undefined for zero-norm vectors")
    return float(1.0 - (v @ q) / (nv * nq))


def cosine_distance_grad(v, q) -> np.ndarray:
    """Gradient of ``cosine_distance(v, q)`` with respect to ``v``.

    d/dv [1 - v.q / (|v||q|)] = cos(v, q) * v / |v|^2 - q / (|v||q|),
    which is orthogonal to ``v`` and vanishes exactly when v is a positive
    multiple of q.
    """
    v = as_vector(v)
    q = as_vector(q)
    if v.shape != q.shape:
        raise ShapeMismatchError("cosine_distance_grad operands differ", left=v.shape, right=q.shape)
    nv = np.linalg.norm(v)
    nq = np.linalg.norm(q)
    if nv == 0.0 or nq == 0.0:
        raise ZeroNormError("cosine distance is undefined for zero-norm vectors")
    cos = (v @ q) / (nv * nq)
    return cos * v / (nv * nv) - q / (nv * nq)


def l2_distance(v, q) -> float:
    """Mean squared difference over coordinates."""
    v = as_vector(v)
    q = as_vector(q)
    if v.shape != q.shape:
        raise ShapeMismatchError("l2_distance operands differ", left=v.shape, right=q.shape)
    diff = v - q
    return float(diff @ diff / v.size)


def batch_cosine_loss(pred: np.ndarray, target: np.ndarray):
    """Mean cosine distance over paired rows, plus d(loss)/d(pred).

    Returns ``(loss, grad)`` where ``grad`` has the shape of ``pred``.
    A zero-norm row on either side aborts with :class:`ZeroNormError`; a
    zero predicted row in particular signals divergence and must surface
    instead of being silently patched.
    """
    pred = as_matrix(pred)
    target = as_matrix(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError("loss operands differ", left=pred.shape, right=target.shape)
    n = pred.shape[0]
    pn = np.linalg.norm(pred, axis=1)
    tn = np.linalg.norm(target, axis=1)
    if np.any(pn == 0.0):
        raise ZeroNormError("zero-norm predicted row(s); training has collapsed")
    if np.any(tn == 0.0):
        raise ZeroNormError("zero-norm target row(s)")
    dots = np.einsum("ij,ij->i", pred, target)
    cos = dots / (pn * tn)
    loss = float(np.mean(1.0 - cos))
    grad = (cos / (pn * pn))[:, None] * pred - target / (pn * tn)[:, None]
    return loss, grad / n


def batch_l2_loss(pred: np.ndarray, target: np.ndarray):
    """Mean over rows of the per-row coordinate-mean squared error."""
    pred = as_matrix(pred)
    target = as_matrix(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError("loss operands differ", left=pred.shape, right=target.shape)
    n, d = pred.shape
    diff = pred - target
    loss = float(np.sum(diff * diff) / (n * d))
    return loss, 2.0 * diff / (n * d)


BATCH_LOSSES = {"cosine": batch_cosine_loss, "l2": batch_l2_loss}


def batch_loss(distance: str):
    try:
        return BATCH_LOSSES[distance]
    except KeyError:
        raise IcisError(f"unknown distance {distance!r}; expected one of {sorted(BATCH_LOSSES)}") from None


# ---------------------------------------------------------------------------
# layers


class LinearLayer:
    """Affine map ``y = x @ W.T + b`` with gradient accumulators."""

    def __init__(self, weight, bias):
        self.weight = as_matrix(weight)
        self.bias = as_vector(bias)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeMismatchError("bias length must match output dim", left=self.bias.shape, right=self.weight.shape)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: RngState, pre_rectifier: bool) -> "LinearLayer":
        """Seeded Gaussian initialisation, std sqrt(2/in) before a rectifier
        and sqrt(1/in) otherwise; biases start at zero."""
        std = np.sqrt((2.0 if pre_rectifier else 1.0) / in_dim)
        return cls(rand_normal(rng, out_dim, in_dim, std), np.zeros(out_dim))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_dim:
            raise ShapeMismatchError("input dim mismatch", left=x.shape, right=self.weight.shape)
        return x @ self.weight.T + self.bias

    def zero_grad(self):
        self.grad_weight[:] = 0.0
        self.grad_bias[:] = 0.0

    def parameters(self):
        return [self.weight, self.bias]

    def gradients(self):
        return [self.grad_weight, self.grad_bias]

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weight.copy(), self.bias.copy())


class MlpTwoLayer:
    """Composition ``layer2(relu(layer1(x)))``.

    The two layers may be shared with other compositions; ``backward``
    accumulates into their gradient buffers, so loss terms that reuse an
    encoder or decoder simply sum their contributions.
    """

    def __init__(self, layer1: LinearLayer, layer2: LinearLayer):
        if layer2.in_dim != layer1.out_dim:
            raise ShapeMismatchError("layer dims do not compose", left=layer1.weight.shape, right=layer2.weight.shape)
        self.layer1 = layer1
        self.layer2 = layer2
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.layer1.in_dim

    @property
    def out_dim(self) -> int:
        return self.layer2.out_dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batched forward pass; caches pre-activations for ``backward``."""
        x = as_matrix(x)
        pre = self.layer1.forward(x)
        hidden = np.maximum(pre, 0.0)
        out = self.layer2.forward(hidden)
        self._cache = (x, pre, hidden)
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without touching the backward cache."""
        x = as_matrix(x)
        hidden = np.maximum(self.layer1.forward(x), 0.0)
        return self.layer2.forward(hidden)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for the cached batch.

        ``upstream`` is d(loss)/d(output). Returns d(loss)/d(input). The
        rectifier gate uses the cached pre-activations, with zero slope at
        exactly zero.
        """
        if self._cache is None:
            raise IcisError("backward called without a cached forward pass")
        x, pre, hidden = self._cache
        upstream = as_matrix(upstream)
        if upstream.shape != (x.shape[0], self.out_dim):
            raise ShapeMismatchError("upstream gradient shape mismatch", left=upstream.shape, right=(x.shape[0], self.out_dim))
        self.layer2.grad_weight += upstream.T @ hidden
        self.layer2.grad_bias += upstream.sum(axis=0)
        dhidden = upstream @ self.layer2.weight
        dpre = dhidden * (pre > 0.0)
        self.layer1.grad_weight += dpre.T @ x
        self.layer1.grad_bias += dpre.sum(axis=0)
        self._cache = None
        return dpre @ self.layer1.weight


# ---------------------------------------------------------------------------
# optimiser


class AdamState:
    """Adam optimiser state over an ordered list of parameter arrays."""

    def __init__(self, lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = None
        self._v = None


def adam_step(state: AdamState, params, grads):
    """One Adam update with bias correction; parameters update in place."""
    if len(params) != len(grads):
        raise ShapeMismatchError("params/grads count mismatch", left=len(params), right=len(grads))
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatchError("parameter/gradient shape mismatch", left=p.shape, right=g.shape)
    if state._m is None:
        state._m = [np.zeros_like(p) for p in params]
        state._v = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state._m, state._v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
