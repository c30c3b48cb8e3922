"""Meta-parameterized attractor regularizer.

A memory row is produced for every base class by passing its frozen weight
column through a small tanh MLP. Each novel class attends over those rows
with softmax(tau * cosine(support class mean, base weight column)), and the
attended mix plus a learned bias vector becomes the class's attractor. Fast
weights pay a squared Mahalanobis penalty, with per-dimension slopes
exp(gamma), for straying from their attractor.

The static variant drops attention and memory: every novel class shares the
bias attractor. At initialization (zero bias, zero log-slopes, near-zero
memory MLP) both variants reduce to plain unit weight decay, which is the
vanilla baseline.

For the MLP fast classifier the penalty is applied layer-wise: shortcut
columns use the main attention attractors, final-layer columns use a second
memory MLP that maps base columns into hidden-unit space (same attention
rows), and hidden-layer columns share one learned static center.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .blockfile import DimensionMismatchError, Reader, Writer
from .classifier import VARIANT_LR, VARIANT_MLP, BaseClassifier
from .embeddings import examples_to_arrays
from .util import check_finite, rng_from, softmax

MAGIC_META = b"TH01"

MODE_VANILLA = "vanilla"
MODE_STATIC = "static"
MODE_ATTENTION = "attention"
MODES = (MODE_VANILLA, MODE_STATIC, MODE_ATTENTION)


class DegenerateInputError(ValueError):
    """Cosine similarity asked of a zero-norm vector."""


@dataclass
class MLPWeights:
    """One-hidden-layer tanh MLP, used for the memory maps."""

    w_in: np.ndarray    # (d_in, hidden)
    b_in: np.ndarray    # (hidden,)
    w_out: np.ndarray   # (hidden, d_out)
    b_out: np.ndarray   # (d_out,)

    def apply(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.w_in.shape[0]:
            raise DimensionMismatchError(
                f"memory MLP expects inputs of dim {self.w_in.shape[0]}, got {X.shape[1]}"
            )
        H = np.tanh(X @ self.w_in + self.b_in)
        return H @ self.w_out + self.b_out

    def apply_with_cache(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        H = np.tanh(X @ self.w_in + self.b_in)
        return H @ self.w_out + self.b_out, (X, H)

    def backward(self, d_out, cache) -> "MLPWeights":
        """Gradient of sum(d_out * output) with respect to the weights."""
        X, H = cache
        d_out = np.atleast_2d(d_out)
        gw_out = H.T @ d_out
        gb_out = d_out.sum(axis=0)
        dH = d_out @ self.w_out.T
        dpre = dH * (1.0 - H ** 2)
        return MLPWeights(
            w_in=X.T @ dpre,
            b_in=dpre.sum(axis=0),
            w_out=gw_out,
            b_out=gb_out,
        )

    def arrays(self):
        return [self.w_in, self.b_in, self.w_out, self.b_out]

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def zeros(cls, d_in, hidden, d_out):
        return cls(
            w_in=np.zeros((d_in, hidden)),
            b_in=np.zeros(hidden),
            w_out=np.zeros((hidden, d_out)),
            b_out=np.zeros(d_out),
        )

    @classmethod
    def init(cls, d_in, hidden, d_out, rng, scale=0.01):
        # Weights small so memory rows start near zero; biases at zero.
        return cls(
            w_in=scale * rng.standard_normal((d_in, hidden)),
            b_in=np.zeros(hidden),
            w_out=scale * rng.standard_normal((hidden, d_out)),
            b_out=np.zeros(d_out),
        )


@dataclass
class MetaParams:
    """Everything the meta-optimizer trains.

    ``phi``/``u0``/``gamma``/``tau`` drive the main attractor pipeline in
    feature space. The remaining fields exist only for the MLP fast
    classifier: a second memory map into hidden space (``phi2``, ``u0_2``,
    ``gamma2``) and a static center with slopes for the hidden layer
    (``c1``, ``gamma1``).
    """

    phi: MLPWeights
    u0: np.ndarray
    gamma: np.ndarray
    tau: float
    phi2: MLPWeights | None = None
    u0_2: np.ndarray | None = None
    gamma2: np.ndarray | None = None
    c1: np.ndarray | None = None
    gamma1: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.u0.shape[0]

    @property
    def variant(self) -> str:
        return VARIANT_LR if self.phi2 is None else VARIANT_MLP

    @property
    def fast_hidden(self) -> int:
        return 0 if self.phi2 is None else self.u0_2.shape[0]

    @property
    def attractor_hidden(self) -> int:
        return self.phi.w_in.shape[1]

    def _blocks(self):
        blocks = self.phi.arrays() + [self.u0, self.gamma, np.array([self.tau])]
        if self.phi2 is not None:
            blocks += self.phi2.arrays() + [self.u0_2, self.gamma2, self.c1, self.gamma1]
        return blocks

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(b, dtype=float).ravel() for b in self._blocks()])

    @property
    def n_params(self) -> int:
        return sum(np.asarray(b).size for b in self._blocks())

    def from_vector(self, vec: np.ndarray) -> "MetaParams":
        """Rebuild a MetaParams with this one's shapes from a flat vector."""
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise DimensionMismatchError(
                f"vector has {vec.size} entries, layout needs {self.n_params}"
            )
        pos = 0

        def take(template):
            nonlocal pos
            t = np.asarray(template)
            out = vec[pos:pos + t.size].reshape(t.shape).copy()
            pos += t.size
            return out

        def take_mlp(m: MLPWeights) -> MLPWeights:
            return MLPWeights(take(m.w_in), take(m.b_in), take(m.w_out), take(m.b_out))

        phi = take_mlp(self.phi)
        u0, gamma = take(self.u0), take(self.gamma)
        tau = float(take(np.zeros(1))[0])
        if self.phi2 is None:
            return MetaParams(phi, u0, gamma, tau)
        phi2 = take_mlp(self.phi2)
        return MetaParams(
            phi, u0, gamma, tau,
            phi2=phi2,
            u0_2=take(self.u0_2),
            gamma2=take(self.gamma2),
            c1=take(self.c1),
            gamma1=take(self.gamma1),
        )

    def zeros_like(self) -> "MetaParams":
        z = self.from_vector(np.zeros(self.n_params))
        return z


def init_meta_params(
    dim: int,
    variant: str = VARIANT_LR,
    fast_hidden: int = 40,
    attractor_hidden: int = 50,
    seed: int = 0,
) -> MetaParams:
    """Start as plain weight decay: zero centers, unit slopes, tau=1,
    near-zero memory maps."""
    rng = rng_from(seed)
    phi = MLPWeights.init(dim, attractor_hidden, dim, rng)
    params = MetaParams(
        phi=phi,
        u0=np.zeros(dim),
        gamma=np.zeros(dim),
        tau=1.0,
    )
    if variant == VARIANT_MLP:
        params = replace(
            params,
            phi2=MLPWeights.init(dim, attractor_hidden, fast_hidden, rng),
            u0_2=np.zeros(fast_hidden),
            gamma2=np.zeros(fast_hidden),
            c1=np.zeros(dim),
            gamma1=np.zeros(dim),
        )
    return params


def save_meta_params(meta: MetaParams, path):
    w = Writer(MAGIC_META)
    w.u32(meta.dim)
    w.u32(meta.attractor_hidden)
    w.u8(0 if meta.variant == VARIANT_LR else 1)
    w.u32(meta.fast_hidden)
    blocks = meta._blocks()
    w.u32(len(blocks))
    for b in blocks:
        arr = np.asarray(b, dtype=float).ravel()
        w.u32(arr.size)
        w.f32_array(arr)
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_meta_params(path) -> MetaParams:
    with open(path, "rb") as fh:
        data = fh.read()
    r = Reader(data, MAGIC_META)
    dim, hidden = r.u32(), r.u32()
    variant = VARIANT_LR if r.u8() == 0 else VARIANT_MLP
    fast_hidden = r.u32()
    template = init_meta_params(dim, variant, max(fast_hidden, 1), hidden, seed=0)
    if variant == VARIANT_LR:
        template = init_meta_params(dim, VARIANT_LR, attractor_hidden=hidden, seed=0)
    n_blocks = r.u32()
    expected = template._blocks()
    if n_blocks != len(expected):
        raise DimensionMismatchError(
            f"file holds {n_blocks} blocks, layout needs {len(expected)}"
        )
    parts = []
    for b in expected:
        want = np.asarray(b).size
        got = r.u32()
        if got != want:
            raise DimensionMismatchError(f"block of length {got} where {want} expected")
        parts.append(r.f32_array(got).astype(float))
    r.expect_end()
    return template.from_vector(np.concatenate(parts))


def memory_from_base(base: BaseClassifier, phi: MLPWeights) -> np.ndarray:
    """Memory matrix, one row per base class: row k = phi(W_a column k)."""
    return phi.apply(base.w_a.T)


def support_class_means(support, k_base: int):
    """Mean support feature per novel class, rows ordered by episode label."""
    X, y = examples_to_arrays(support)
    labels = np.unique(y)
    if labels.min() < k_base:
        raise ValueError("support must contain only novel labels")
    return np.stack([X[y == l].mean(axis=0) for l in labels]), labels


def compute_attention(support, base: BaseClassifier, tau: float) -> np.ndarray:
    """Attention of each novel class over base classes.

    Row k' is softmax over k of tau * cosine(mean support feature of class
    k', base weight column k). Rows are probability vectors; the cosine makes
    them invariant to positive rescaling of either input.
    """
    A, _ = _attention_forward(support, base, tau)
    return A


def _attention_forward(support, base: BaseClassifier, tau: float):
    means, _ = support_class_means(support, base.k_base)
    m_norm = np.linalg.norm(means, axis=1)
    w_norm = np.linalg.norm(base.w_a, axis=0)
    if np.any(m_norm == 0) or np.any(w_norm == 0):
        raise DegenerateInputError("zero-norm vector in cosine similarity")
    cos = (means @ base.w_a) / np.outer(m_norm, w_norm)
    A = softmax(tau * cos, axis=1)
    return A, cos


def attention_tau_backward(dA: np.ndarray, A: np.ndarray, cos: np.ndarray) -> float:
    """d/d(tau) of sum(dA * A) through the row softmaxes."""
    # Per row: dA_j/dtau = A_j (cos_j - <A, cos>).
    inner = (A * cos).sum(axis=1, keepdims=True)
    return float((dA * A * (cos - inner)).sum())


def assemble_attractors(memory: np.ndarray, attention: np.ndarray, u0: np.ndarray) -> np.ndarray:
    """Attractor per novel class: attention-weighted memory rows plus bias."""
    if attention.shape[1] != memory.shape[0] or memory.shape[1] != u0.shape[0]:
        raise DimensionMismatchError("attention/memory/bias shapes disagree")
    return attention @ memory + u0


@dataclass(frozen=True)
class AttractorSet:
    """Forward state of one attractor pipeline (used per regularized block)."""

    memory: np.ndarray       # (k_base, d)
    attention: np.ndarray    # (k_novel, k_base)
    attractors: np.ndarray   # (k_novel, d)
    mode: str


@dataclass
class RegularizerEval:
    """Value and partials of the Mahalanobis penalty at one weight block."""

    value: float
    grad_w: np.ndarray       # (d, k) like the weight block
    grad_u: np.ndarray       # (k, d) per-attractor partial
    grad_gamma: np.ndarray   # (d,)


def regularizer(w_cols: np.ndarray, attractors: np.ndarray, gamma: np.ndarray) -> RegularizerEval:
    """sum_k (w_k - u_k)^T diag(exp gamma) (w_k - u_k) over columns of
    ``w_cols`` with matching attractor rows."""
    w_cols = np.asarray(w_cols, dtype=float)
    attractors = np.atleast_2d(np.asarray(attractors, dtype=float))
    d, k = w_cols.shape
    if attractors.shape == (1, d) and k != 1:
        attractors = np.repeat(attractors, k, axis=0)
    if attractors.shape != (k, d) or gamma.shape != (d,):
        raise DimensionMismatchError("regularizer shapes disagree")
    slope = np.exp(gamma)
    diff = w_cols.T - attractors            # (k, d)
    value = float((slope * diff ** 2).sum())
    grad_w = (2.0 * slope * diff).T          # (d, k)
    grad_u = -2.0 * slope * diff             # (k, d)
    grad_gamma = (slope * diff ** 2).sum(axis=0)
    return RegularizerEval(value, grad_w, grad_u, grad_gamma)


def static_regularizer(w_cols: np.ndarray, u0: np.ndarray, gamma: np.ndarray) -> RegularizerEval:
    """Shared-attractor penalty: every column is pulled toward ``u0``."""
    u = np.repeat(np.asarray(u0, dtype=float)[None, :], w_cols.shape[1], axis=0)
    return regularizer(w_cols, u, gamma)
