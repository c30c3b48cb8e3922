"""Episode data model, synthetic embedding worlds, and the embedding file format.

The learning problem operates on fixed feature vectors, never raw images: a
frozen backbone is assumed to have produced them. Two sources are supported.
A ``SyntheticWorld`` draws features from isotropic Gaussian clusters, one per
class, which preserves the geometry the attractor mechanism relies on
(class-mean structure, cosine similarity) without any network. An
``EmbeddingTable`` holds externally computed features loaded from disk.

Classes are partitioned into base classes ``0..K-1`` (seen during
pretraining, with train/val/test example splits) and a novel pool. Within an
episode, the sampled novel classes are relabeled to ``K..K+K'-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blockfile import (
    DimensionMismatchError,
    Reader,
    Writer,
)
from .util import rng_from

MAGIC_EMBEDDINGS = b"IFSL"

SPLIT_BASE_TRAIN = 0
SPLIT_BASE_VAL = 1
SPLIT_BASE_TEST = 2
SPLIT_NOVEL = 3

SPLIT_NAMES = {
    SPLIT_BASE_TRAIN: "base-train",
    SPLIT_BASE_VAL: "base-val",
    SPLIT_BASE_TEST: "base-test",
    SPLIT_NOVEL: "novel",
}
SPLIT_IDS = {v: k for k, v in SPLIT_NAMES.items()}


@dataclass(frozen=True)
class LabeledExample:
    """One feature vector with its class index."""

    feature: np.ndarray
    label: int


def examples_to_arrays(examples):
    """Stack a list of LabeledExample into (X, y) float64/int arrays."""
    X = np.stack([np.asarray(e.feature, dtype=float) for e in examples])
    y = np.array([e.label for e in examples], dtype=int)
    return X, y


@dataclass(frozen=True)
class EpisodeConfig:
    """Shape of one few-shot episode.

    ``base_query_size`` defaults to ``m_queries * k_base`` (one mini-batch
    drawing m per base class on average); set it to ``m_queries * k_novel``
    for a base/novel query set in equal proportion.
    """

    n_shots: int
    k_novel: int
    m_queries: int
    k_base: int
    dim: int
    base_query_size: int | None = None
    balanced_base: bool = False

    def __post_init__(self):
        for name in ("n_shots", "k_novel", "m_queries", "k_base", "dim"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.base_query_size is not None and self.base_query_size < 1:
            raise ValueError("base_query_size must be positive when given")

    @property
    def n_base_queries(self) -> int:
        if self.base_query_size is not None:
            return int(self.base_query_size)
        return self.m_queries * self.k_base


@dataclass(frozen=True)
class Episode:
    """One sampled few-shot task.

    ``support`` and ``query_novel`` carry episode labels in
    ``k_base..k_base+k_novel-1``; ``query_base`` carries original base labels
    ``0..k_base-1``. ``novel_class_ids`` records which source classes were
    drawn, in episode-label order. The joint query set is base queries
    followed by novel queries.
    """

    support: list[LabeledExample]
    query_novel: list[LabeledExample]
    query_base: list[LabeledExample]
    novel_class_ids: list[int]
    k_base: int

    @property
    def k_novel(self) -> int:
        return len(self.novel_class_ids)

    def joint_query(self) -> list[LabeledExample]:
        return list(self.query_base) + list(self.query_novel)


@dataclass(frozen=True)
class SyntheticWorld:
    """Gaussian-cluster stand-in for a frozen feature extractor."""

    class_means: np.ndarray            # (k_base + novel_pool, dim)
    within_class_stddev: float
    base_class_count: int
    novel_pool_count: int
    seed: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.class_means)):
            raise ValueError("class means must be finite")
        if self.within_class_stddev <= 0:
            raise ValueError("within-class stddev must be positive")

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    @property
    def novel_labels(self) -> list[int]:
        k = self.base_class_count
        return list(range(k, k + self.novel_pool_count))

    def sample_class(self, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
        mean = self.class_means[label]
        return mean + self.within_class_stddev * rng.standard_normal((n, self.dim))


def generate_synthetic_world(
    base_count: int,
    novel_pool: int,
    dim: int,
    separation: float,
    stddev: float,
    seed: int,
) -> SyntheticWorld:
    """Draw class means so the expected (RMS) pairwise mean distance equals
    ``separation``; within-class samples are isotropic with ``stddev``.
    """
    if base_count < 1 or novel_pool < 1 or dim < 1:
        raise ValueError("base_count, novel_pool and dim must all be >= 1")
    if separation <= 0 or stddev <= 0:
        raise ValueError("separation and stddev must be positive")
    rng = rng_from(seed)
    # Means ~ N(0, s^2 I) give E||m_i - m_j||^2 = 2 D s^2.
    scale = separation / np.sqrt(2.0 * dim)
    means = scale * rng.standard_normal((base_count + novel_pool, dim))
    return SyntheticWorld(
        class_means=means,
        within_class_stddev=float(stddev),
        base_class_count=int(base_count),
        novel_pool_count=int(novel_pool),
        seed=int(seed),
    )


@dataclass(frozen=True)
class ClassBlock:
    label: int
    split: int
    features: np.ndarray   # (count, dim) float32


@dataclass
class EmbeddingTable:
    """Per-class feature vectors with split tags.

    Features are stored as float32, matching the on-disk format, so a
    save/load round trip is bit-exact.
    """

    dim: int
    blocks: list[ClassBlock] = field(default_factory=list)

    def __post_init__(self):
        norm = []
        for b in self.blocks:
            feats = np.ascontiguousarray(b.features, dtype=np.float32)
            if feats.ndim != 2:
                raise DimensionMismatchError("class features must be 2-D")
            if feats.shape[1] != self.dim:
                raise DimensionMismatchError(
                    f"class {b.label} has width {feats.shape[1]}, table dim is {self.dim}"
                )
            if feats.shape[0] == 0:
                raise ValueError(f"class {b.label} (split {b.split}) is empty")
            if b.label < 0:
                raise ValueError("labels must be non-negative")
            if b.split not in SPLIT_NAMES:
                raise ValueError(f"unknown split tag {b.split}")
            norm.append(ClassBlock(int(b.label), int(b.split), feats))
        self.blocks = norm

    @property
    def class_count(self) -> int:
        return len({(b.label, b.split) for b in self.blocks})

    def labels(self, split: int) -> list[int]:
        return sorted({b.label for b in self.blocks if b.split == split})

    def features(self, label: int, split: int) -> np.ndarray:
        parts = [b.features for b in self.blocks if b.label == label and b.split == split]
        if not parts:
            raise KeyError(f"no examples for class {label} in split {SPLIT_NAMES[split]}")
        return np.concatenate(parts, axis=0)

    def split_arrays(self, split: int):
        """All examples of a split as (X float64, y int)."""
        xs, ys = [], []
        for label in self.labels(split):
            f = self.features(label, split)
            xs.append(f.astype(float))
            ys.append(np.full(len(f), label, dtype=int))
        if not xs:
            raise KeyError(f"split {SPLIT_NAMES[split]} is empty")
        return np.concatenate(xs), np.concatenate(ys)


def materialize_table(
    world: SyntheticWorld,
    per_class_train: int,
    per_class_val: int,
    per_class_test: int,
    per_class_novel: int,
    seed: int,
) -> EmbeddingTable:
    """Sample a finite EmbeddingTable from a synthetic world."""
    rng = rng_from(seed)
    blocks = []
    for label in range(world.base_class_count):
        for split, n in (
            (SPLIT_BASE_TRAIN, per_class_train),
            (SPLIT_BASE_VAL, per_class_val),
            (SPLIT_BASE_TEST, per_class_test),
        ):
            blocks.append(ClassBlock(label, split, world.sample_class(label, n, rng)))
    for label in world.novel_labels:
        blocks.append(ClassBlock(label, SPLIT_NOVEL, world.sample_class(label, per_class_novel, rng)))
    return EmbeddingTable(dim=world.dim, blocks=blocks)


def _check_episode_fits(cfg: EpisodeConfig, dim: int, n_novel_pool: int):
    if cfg.dim != dim:
        raise DimensionMismatchError(f"episode dim {cfg.dim} != source dim {dim}")
    if cfg.k_novel > n_novel_pool:
        raise ValueError(
            f"k_novel={cfg.k_novel} exceeds the novel pool ({n_novel_pool} classes)"
        )


def sample_episode(source, cfg: EpisodeConfig, seed: int, base_split: int = SPLIT_BASE_VAL) -> Episode:
    """Sample one episode from a SyntheticWorld or an EmbeddingTable.

    Pure function of (source, cfg, seed): repeated calls are identical. Novel
    classes come from the novel pool only. Base queries default to a uniform
    draw over the split's examples; ``cfg.balanced_base`` draws the same
    number per base class instead.
    """
    rng = rng_from(seed)
    if isinstance(source, SyntheticWorld):
        return _sample_from_world(source, cfg, rng)
    if isinstance(source, EmbeddingTable):
        return _sample_from_table(source, cfg, rng, base_split)
    raise TypeError(f"cannot sample episodes from {type(source).__name__}")


def _as_examples(X, labels):
    if np.isscalar(labels):
        labels = [labels] * len(X)
    return [LabeledExample(np.asarray(x, dtype=float), int(l)) for x, l in zip(X, labels)]


def _base_query_plan(cfg: EpisodeConfig, k_base: int, rng) -> np.ndarray:
    """Class label per base query, uniform or balanced."""
    n_q = cfg.n_base_queries
    if cfg.balanced_base:
        if n_q % k_base != 0:
            raise ValueError(
                f"balanced base queries need base_query_size divisible by k_base "
                f"({n_q} vs {k_base})"
            )
        return np.repeat(np.arange(k_base), n_q // k_base)
    return rng.integers(0, k_base, size=n_q)


def _sample_from_world(world: SyntheticWorld, cfg: EpisodeConfig, rng) -> Episode:
    _check_episode_fits(cfg, world.dim, world.novel_pool_count)
    if cfg.k_base != world.base_class_count:
        raise DimensionMismatchError(
            f"cfg.k_base={cfg.k_base} != world base classes {world.base_class_count}"
        )
    novel_ids = rng.choice(world.novel_labels, size=cfg.k_novel, replace=False)
    support, query_novel = [], []
    for i, cid in enumerate(novel_ids):
        ep_label = cfg.k_base + i
        support += _as_examples(world.sample_class(cid, cfg.n_shots, rng), ep_label)
        query_novel += _as_examples(world.sample_class(cid, cfg.m_queries, rng), ep_label)
    plan = _base_query_plan(cfg, cfg.k_base, rng)
    query_base = [
        LabeledExample(world.sample_class(c, 1, rng)[0], int(c)) for c in plan
    ]
    return Episode(support, query_novel, query_base, [int(c) for c in novel_ids], cfg.k_base)


def _sample_from_table(table: EmbeddingTable, cfg: EpisodeConfig, rng, base_split: int) -> Episode:
    pool = table.labels(SPLIT_NOVEL)
    _check_episode_fits(cfg, table.dim, len(pool))
    base_labels = table.labels(base_split)
    if len(base_labels) != cfg.k_base or base_labels != list(range(cfg.k_base)):
        raise ValueError(
            f"split {SPLIT_NAMES[base_split]} must contain exactly classes 0..{cfg.k_base - 1}"
        )
    novel_ids = rng.choice(pool, size=cfg.k_novel, replace=False)
    support, query_novel = [], []
    need = cfg.n_shots + cfg.m_queries
    for i, cid in enumerate(novel_ids):
        feats = table.features(int(cid), SPLIT_NOVEL)
        if len(feats) < need:
            raise ValueError(
                f"novel class {cid} has {len(feats)} examples, episode needs {need}"
            )
        idx = rng.choice(len(feats), size=need, replace=False)
        ep_label = cfg.k_base + i
        support += _as_examples(feats[idx[: cfg.n_shots]].astype(float), ep_label)
        query_novel += _as_examples(feats[idx[cfg.n_shots:]].astype(float), ep_label)

    plan = _base_query_plan(cfg, cfg.k_base, rng)
    per_class = {c: np.flatnonzero(plan == c).size for c in np.unique(plan)}
    query_base = [None] * len(plan)
    for c, cnt in per_class.items():
        feats = table.features(int(c), base_split)
        if len(feats) < cnt:
            raise ValueError(
                f"base class {c} has {len(feats)} examples in "
                f"{SPLIT_NAMES[base_split]}, episode needs {cnt}"
            )
        rows = rng.choice(len(feats), size=cnt, replace=False)
        for slot, r in zip(np.flatnonzero(plan == c), rows):
            query_base[slot] = LabeledExample(feats[r].astype(float), int(c))
    return Episode(support, query_novel, query_base, [int(c) for c in novel_ids], cfg.k_base)


def save_embeddings(table: EmbeddingTable, path):
    """Write the binary embedding container (magic IFSL, version 1)."""
    if not table.blocks:
        raise ValueError("refusing to save a table with no classes")
    w = Writer(MAGIC_EMBEDDINGS)
    w.u32(table.dim)
    w.u32(len(table.blocks))
    for b in table.blocks:
        w.u32(b.label)
        w.u8(b.split)
        w.u32(b.features.shape[0])
        w.f32_array(b.features)
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_embeddings(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        data = fh.read()
    r = Reader(data, MAGIC_EMBEDDINGS)
    dim = r.u32()
    n_blocks = r.u32()
    if dim < 1 or n_blocks < 1:
        raise DimensionMismatchError(f"invalid header: dim={dim}, classes={n_blocks}")
    blocks = []
    for _ in range(n_blocks):
        label = r.u32()
        split = r.u8()
        count = r.u32()
        feats = r.f32_array(count * dim).reshape(count, dim)
        blocks.append(ClassBlock(label, split, feats))
    r.expect_end()
    return EmbeddingTable(dim=dim, blocks=blocks)
