"""Slow/fast classifiers, joint prediction, and the episodic and query losses.

The base classifier is a bias-free linear map ``x -> W_a^T x`` fitted once on
base-class data and frozen. Each episode trains fast weights from scratch: a
logistic-regression matrix, or a 2-layer tanh MLP with a linear shortcut from
input to output. Joint prediction concatenates base and fast logits and takes
one softmax over all K+K' classes.

Gradients and Hessian-vector products here are analytic; the softmax Hessian
is exact because all logits are affine in the fast weights (LR) or handled by
forward-over-reverse tangents (MLP).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockfile import DimensionMismatchError, Reader, Writer
from .embeddings import examples_to_arrays
from .util import NonFiniteError, check_finite, log_softmax, rng_from, softmax

MAGIC_BASE = b"WA01"

VARIANT_LR = "lr"
VARIANT_MLP = "mlp"


@dataclass(frozen=True)
class BaseClassifier:
    """Frozen slow weights, one column per base class."""

    w_a: np.ndarray   # (dim, k_base)

    def __post_init__(self):
        check_finite(self.w_a, "base classifier weights")

    @property
    def dim(self) -> int:
        return self.w_a.shape[0]

    @property
    def k_base(self) -> int:
        return self.w_a.shape[1]

    def logits(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"features have dim {X.shape[1]}, classifier expects {self.dim}"
            )
        return X @ self.w_a


def save_base_classifier(base: BaseClassifier, path):
    w = Writer(MAGIC_BASE)
    w.u32(base.dim)
    w.u32(base.k_base)
    w.f32_array(base.w_a)
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_base_classifier(path) -> BaseClassifier:
    with open(path, "rb") as fh:
        data = fh.read()
    r = Reader(data, MAGIC_BASE)
    d, k = r.u32(), r.u32()
    if d < 1 or k < 1:
        raise DimensionMismatchError(f"invalid header: dim={d}, k={k}")
    w = r.f32_array(d * k).reshape(d, k).astype(float)
    r.expect_end()
    return BaseClassifier(w_a=w)


def pretrain_base(
    base_data,
    epochs: int,
    lr: float,
    weight_decay: float,
    seed: int,
) -> BaseClassifier:
    """Fit the slow weights with full-batch gradient descent.

    ``base_data`` is an ``(X, y)`` pair with labels covering 0..K-1. The
    objective is mean K-way softmax cross-entropy plus
    ``weight_decay * ||W||_F^2``. Full batch keeps desk-scale runs exactly
    reproducible.
    """
    X, y = base_data
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("base data must be a non-empty (n, dim) array")
    k = int(y.max()) + 1
    present = np.unique(y)
    if y.min() < 0 or len(present) != k:
        missing = sorted(set(range(k)) - set(present.tolist()))
        raise ValueError(f"labels must cover 0..K-1; empty classes: {missing}")
    n, d = X.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    rng = rng_from(seed)
    w = 0.01 * rng.standard_normal((d, k))
    for _ in range(int(epochs)):
        p = softmax(X @ w, axis=1)
        grad = X.T @ (p - onehot) / n + 2.0 * weight_decay * w
        w -= lr * grad
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("pretraining diverged (reduce lr)")
    return BaseClassifier(w_a=w)


@dataclass
class FastWeights:
    """Per-episode classifier parameters.

    LR holds a single (dim, k_novel) matrix. MLP holds ``w1`` (dim, hidden),
    ``w2`` (hidden, k_novel) and a full linear shortcut ``w_sc``
    (dim, k_novel); the flat layout is w1 | w2 | w_sc.
    """

    variant: str
    w_b: np.ndarray | None = None
    w1: np.ndarray | None = None
    w2: np.ndarray | None = None
    w_sc: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.w_b.shape[0] if self.variant == VARIANT_LR else self.w1.shape[0]

    @property
    def k_novel(self) -> int:
        return self.w_b.shape[1] if self.variant == VARIANT_LR else self.w2.shape[1]

    def flatten(self) -> np.ndarray:
        if self.variant == VARIANT_LR:
            return self.w_b.ravel().copy()
        return np.concatenate([self.w1.ravel(), self.w2.ravel(), self.w_sc.ravel()])

    @classmethod
    def unflatten(cls, vec, variant: str, dim: int, k_novel: int, hidden: int = 40):
        vec = np.asarray(vec, dtype=float)
        if variant == VARIANT_LR:
            if vec.size != dim * k_novel:
                raise DimensionMismatchError("flat vector does not match LR shape")
            return cls(VARIANT_LR, w_b=vec.reshape(dim, k_novel).copy())
        sizes = (dim * hidden, hidden * k_novel, dim * k_novel)
        if vec.size != sum(sizes):
            raise DimensionMismatchError("flat vector does not match MLP shape")
        a, b = sizes[0], sizes[0] + sizes[1]
        return cls(
            VARIANT_MLP,
            w1=vec[:a].reshape(dim, hidden).copy(),
            w2=vec[a:b].reshape(hidden, k_novel).copy(),
            w_sc=vec[b:].reshape(dim, k_novel).copy(),
        )


def init_fast_weights(variant: str, dim: int, k_novel: int, hidden: int = 40, seed: int = 0) -> FastWeights:
    """Zeros for LR (convex objective, unique optimum); small seeded Gaussian
    for the MLP."""
    if variant == VARIANT_LR:
        return FastWeights(VARIANT_LR, w_b=np.zeros((dim, k_novel)))
    rng = rng_from(seed)
    return FastWeights(
        VARIANT_MLP,
        w1=0.01 * rng.standard_normal((dim, hidden)),
        w2=0.01 * rng.standard_normal((hidden, k_novel)),
        w_sc=0.01 * rng.standard_normal((dim, k_novel)),
    )


def fast_forward(fw: FastWeights, x) -> np.ndarray:
    """Fast-classifier logits; accepts one feature vector or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != fw.dim:
        raise DimensionMismatchError(f"feature dim {X.shape[1]} != weights dim {fw.dim}")
    if fw.variant == VARIANT_LR:
        out = X @ fw.w_b
    else:
        out = np.tanh(X @ fw.w1) @ fw.w2 + X @ fw.w_sc
    return out[0] if single else out


def joint_logits(base: BaseClassifier, fw: FastWeights, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    out = np.concatenate([base.logits(X), np.atleast_2d(fast_forward(fw, X))], axis=1)
    return out[0] if single else out


def joint_predict(base: BaseClassifier, fw: FastWeights, x) -> np.ndarray:
    """Softmax over the concatenated K+K' logits; rows sum to 1."""
    return softmax(joint_logits(base, fw, x), axis=-1)


@dataclass
class LossValue:
    value: float
    grad: np.ndarray | None = None


def _ce_from_logits(Z, y):
    """Mean cross-entropy and d(loss)/d(logits) for integer labels."""
    n = len(y)
    logp = log_softmax(Z, axis=1)
    value = -float(logp[np.arange(n), y].mean())
    if not np.isfinite(value):
        raise NonFiniteError("cross-entropy is non-finite")
    dZ = np.exp(logp)
    dZ[np.arange(n), y] -= 1.0
    return value, dZ / n


class _FastPass:
    """Forward activations plus CE backward/HVP for one batch.

    ``base_logits`` is None when base classes are masked out of the softmax
    (then labels are fast-block indices 0..K'-1); otherwise labels index the
    joint K+K' range.
    """

    def __init__(self, fw: FastWeights, X, y, base_logits):
        self.fw = fw
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=int)
        self.base_logits = base_logits
        self.k_off = 0 if base_logits is None else base_logits.shape[1]
        if fw.variant == VARIANT_MLP:
            self.A = self.X @ fw.w1
            self.T = np.tanh(self.A)
            zf = self.T @ fw.w2 + self.X @ fw.w_sc
        else:
            zf = self.X @ fw.w_b
        self.zf = zf
        Z = zf if base_logits is None else np.concatenate([base_logits, zf], axis=1)
        self.Z = Z
        self.P = softmax(Z, axis=1)

    def value_and_grad(self):
        value, dZ = _ce_from_logits(self.Z, self.y)
        dZf = dZ[:, self.k_off:]
        return value, self._backward(dZf)

    def _backward(self, dZf) -> np.ndarray:
        fw, X = self.fw, self.X
        if fw.variant == VARIANT_LR:
            return (X.T @ dZf).ravel()
        g2 = self.T.T @ dZf
        gsc = X.T @ dZf
        dT = dZf @ fw.w2.T
        dA = dT * (1.0 - self.T ** 2)
        g1 = X.T @ dA
        return np.concatenate([g1.ravel(), g2.ravel(), gsc.ravel()])

    def hessian_vp(self, v: np.ndarray) -> np.ndarray:
        """Exact CE Hessian-vector product in the flat fast-weight layout."""
        fw, X, n = self.fw, self.X, len(self.y)
        Pf = self.P[:, self.k_off:]
        if fw.variant == VARIANT_LR:
            V = v.reshape(fw.w_b.shape)
            S = X @ V
            r = (Pf * S).sum(axis=1, keepdims=True)
            dPf = Pf * (S - r)
            return (X.T @ dPf / n).ravel()

        vfw = FastWeights.unflatten(v, VARIANT_MLP, fw.dim, fw.k_novel, fw.w1.shape[1])
        # Forward tangents of the fast logits.
        A_dot = X @ vfw.w1
        T_dot = (1.0 - self.T ** 2) * A_dot
        Zf_dot = T_dot @ fw.w2 + self.T @ vfw.w2 + X @ vfw.w_sc
        r = (Pf * Zf_dot).sum(axis=1, keepdims=True)
        Pf_dot = Pf * (Zf_dot - r)
        # Tangents of the backward pass; dZf = (Pf - Yf)/n so its tangent is Pf_dot/n.
        dZf = self._dZf()
        dZf_dot = Pf_dot / n
        g2_dot = T_dot.T @ dZf + self.T.T @ dZf_dot
        gsc_dot = X.T @ dZf_dot
        dT = dZf @ fw.w2.T
        dT_dot = dZf_dot @ fw.w2.T + dZf @ vfw.w2.T
        dA_dot = dT_dot * (1.0 - self.T ** 2) + dT * (-2.0 * self.T * T_dot)
        g1_dot = X.T @ dA_dot
        return np.concatenate([g1_dot.ravel(), g2_dot.ravel(), gsc_dot.ravel()])

    def _dZf(self):
        n = len(self.y)
        dZ = self.P.copy()
        dZ[np.arange(n), self.y] -= 1.0
        return dZ[:, self.k_off:] / n


def support_ce(base: BaseClassifier, fw: FastWeights, support, mask_base: bool = False):
    """Cross-entropy of the support set under joint prediction.

    The softmax spans all K+K' classes unless ``mask_base`` is set; base
    classes are present in the denominator but never correct.
    """
    X, y = examples_to_arrays(support)
    if mask_base:
        return _FastPass(fw, X, y - base.k_base, None)
    return _FastPass(fw, X, y, base.logits(X))


def episodic_loss(fw: FastWeights, support, base: BaseClassifier, reg,
                  mask_base: bool = False) -> LossValue:
    """Mean support cross-entropy plus the regularizer.

    ``reg`` is the regularizer evaluated at ``fw`` (an object with ``value``
    and a flat ``grad`` aligned with ``fw.flatten()``).
    """
    if not support:
        raise ValueError("support set is empty")
    ce, g = support_ce(base, fw, support, mask_base).value_and_grad()
    rgrad = np.asarray(reg.grad, dtype=float).ravel()
    if rgrad.size != g.size:
        raise DimensionMismatchError("regularizer gradient does not match fast weights")
    return LossValue(value=ce + float(reg.value), grad=g + rgrad)


def query_loss(base: BaseClassifier, fw: FastWeights, joint_query) -> LossValue:
    """Mean joint cross-entropy over the base+novel query set."""
    if not joint_query:
        raise ValueError("query set is empty")
    X, y = examples_to_arrays(joint_query)
    pass_ = _FastPass(fw, X, y, base.logits(X))
    value, grad = pass_.value_and_grad()
    return LossValue(value=value, grad=grad)
