"""Core attention-map operations: softmax attention, entropy-guided
sharpening, and iterative cross-attention refinement.

All functions are pure: they never mutate their inputs and are safe to
call concurrently on distinct data. Matrices are dense numpy arrays at
working resolutions up to 64x64 (4096x4096 affinities).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_ITERATIONS = 10
DEFAULT_LAMBDA = 0.01
DEFAULT_GAMMA = 1.6
DEFAULT_TAU = 0.5
DEFAULT_EPS_LOG = 1e-8

# Channels whose spread is below this relative tolerance are treated as
# constant by min-max normalization: propagating an all-ones map through
# float32 row-stochastic attention leaves ~1e-7 of accumulation dust that
# must not be blown up into full [0, 1] contrast.
_CONST_RTOL = 1e-6


class ShapeError(ValueError):
    """Incompatible matrix dimensions."""


@dataclass
class SelfAttentionMap:
    """Dense spatial affinity matrix of shape (H*W, H*W).

    Rows of a freshly computed map are stochastic (sum to 1). After
    entropy reduction rows are no longer renormalized, so only
    non-negativity and squareness are enforced here.
    """

    data: np.ndarray
    side: tuple[int, int]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.side = (int(self.side[0]), int(self.side[1]))
        h, w = self.side
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise ShapeError(f"self-attention must be square, got {self.data.shape}")
        if self.data.shape[0] != h * w:
            raise ShapeError(
                f"side {self.side} implies {h * w} cells, matrix has {self.data.shape[0]} rows"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("self-attention contains NaN or Inf")
        if (self.data < 0).any():
            raise ValueError("self-attention entries must be non-negative")

    @property
    def n_cells(self) -> int:
        return self.data.shape[0]

    def require_row_stochastic(self, atol: float = 1e-5) -> None:
        err = np.abs(self.data.sum(axis=1) - 1.0).max()
        if err > atol:
            raise ValueError(f"rows deviate from sum 1 by {err:.3g} (atol={atol:g})")


@dataclass
class CrossAttentionStack:
    """Per-layer text/image attention maps plus their fused map.

    ``layers`` holds ``((H_l, W_l), map)`` pairs with map shape
    (H_l*W_l, T); ``fused`` is (H*W, T) at the working resolution.
    """

    layers: list[tuple[tuple[int, int], np.ndarray]]
    fused: np.ndarray
    token_count: int

    def __post_init__(self):
        self.fused = np.asarray(self.fused, dtype=np.float64)
        if self.fused.ndim != 2 or self.fused.shape[1] != self.token_count:
            raise ShapeError("fused map must be (HW, token_count)")
        if (self.fused < 0).any():
            raise ValueError("cross-attention entries must be non-negative")


@dataclass
class TokenMeta:
    """Prompt tokens with the positions of category and background words.

    ``category_groups`` optionally groups token positions per category
    (multi-word category names span several positions); when omitted
    every category index forms its own group. The flat ``category_indices``
    set always drives the key-weighting vector.
    """

    tokens: tuple[str, ...]
    category_indices: frozenset[int]
    background_indices: frozenset[int] = frozenset()
    gamma: float = DEFAULT_GAMMA
    category_groups: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        self.tokens = tuple(str(t) for t in self.tokens)
        self.category_indices = frozenset(int(i) for i in self.category_indices)
        self.background_indices = frozenset(int(i) for i in self.background_indices)
        self.gamma = float(self.gamma)
        t = len(self.tokens)
        for name, idx in (("category", self.category_indices),
                          ("background", self.background_indices)):
            for i in idx:
                if not 0 <= i < t:
                    raise ValueError(f"{name} index {i} outside [0, {t})")
        if self.category_indices & self.background_indices:
            raise ValueError("category and background indices must be disjoint")
        if self.gamma < 1.0:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        if self.category_groups is not None:
            self.category_groups = tuple(tuple(int(i) for i in g) for g in self.category_groups)
            flat = {i for g in self.category_groups for i in g}
            if flat != set(self.category_indices):
                raise ValueError("category_groups must cover exactly category_indices")
            if any(len(g) == 0 for g in self.category_groups):
                raise ValueError("empty category group")

    @property
    def token_count(self) -> int:
        return len(self.tokens)

    def groups(self) -> tuple[tuple[int, ...], ...]:
        """Token-position groups, one per category channel."""
        if self.category_groups is not None:
            return self.category_groups
        return tuple((i,) for i in sorted(self.category_indices))


@dataclass
class CategoryMaps:
    """Stack of per-category spatial response maps, shape (C, H*W)."""

    data: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 2:
            raise ShapeError(f"category maps must be (C, HW), got {self.data.shape}")
        self.iteration = int(self.iteration)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_cells(self) -> int:
        return self.data.shape[1]


@dataclass
class RefineConfig:
    """Knobs of the refinement pipeline (defaults follow the reference
    operating point: N=10, lambda=0.01, gamma=1.6)."""

    iterations: int = DEFAULT_ITERATIONS
    lam: float = DEFAULT_LAMBDA
    gamma: float = DEFAULT_GAMMA
    tau: float = DEFAULT_TAU
    epsilon_log: float = DEFAULT_EPS_LOG
    normalize: str = "minmax"

    def __post_init__(self):
        self.iterations = int(self.iterations)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.gamma < 1.0:
            raise ValueError("gamma must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.epsilon_log <= 0:
            raise ValueError("epsilon_log must be positive")
        if self.normalize not in ("minmax", "none"):
            raise ValueError(f"unknown normalization mode {self.normalize!r}")


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    # subtract the row max before exponentiation (overflow guard)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attention_from_qk(q: np.ndarray, k: np.ndarray, d: float) -> np.ndarray:
    """Row-wise Softmax(q @ k.T / sqrt(d)); every output row sums to 1."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2:
        raise ShapeError("q and k must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"inner dims differ: q {q.shape} vs k {k.shape}")
    if not d > 0:
        raise ValueError(f"normalization factor must be positive, got {d}")
    if not (np.isfinite(q).all() and np.isfinite(k).all()):
        raise ValueError("q/k contain NaN or Inf")
    return _row_softmax(q @ k.T / np.sqrt(d))


def category_weights(meta: TokenMeta) -> np.ndarray:
    """Per-token weighting vector: gamma on category positions, 1 elsewhere."""
    w = np.ones(meta.token_count, dtype=np.float64)
    if meta.category_indices:
        w[sorted(meta.category_indices)] = meta.gamma
    return w


def category_enhanced_attention(q: np.ndarray, k: np.ndarray, meta: TokenMeta,
                                d: float) -> np.ndarray:
    """Attention with category token embeddings amplified by gamma.

    The key row of every category token is scaled by gamma before the
    softmax, shifting attention mass toward the named categories. With
    gamma=1 (or no category tokens) this is plain attention.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != meta.token_count:
        raise ShapeError(f"k has {k.shape[0] if k.ndim == 2 else '?'} rows, "
                         f"meta declares {meta.token_count} tokens")
    if not meta.category_indices:
        warnings.warn("no category tokens; returning plain attention", stacklevel=2)
        return attention_from_qk(q, k, d)
    return attention_from_qk(q, k * category_weights(meta)[:, None], d)


def self_attention_entropy(a: SelfAttentionMap | np.ndarray,
                           epsilon_log: float = DEFAULT_EPS_LOG) -> float:
    """Shannon entropy -sum(a * ln a) over all entries, with 0*ln(0) = 0.

    Maximal for the uniform matrix (HW * ln HW), zero for a binary
    one-hot-row matrix.
    """
    m = a.data if isinstance(a, SelfAttentionMap) else np.asarray(a, dtype=np.float64)
    if (m < 0).any():
        raise ValueError("entropy requires non-negative entries")
    terms = np.where(m > 0, m * np.log(np.maximum(m, epsilon_log)), 0.0)
    return float(-terms.sum())


def entropy_reduce(a: SelfAttentionMap, lam: float,
                   epsilon_log: float = DEFAULT_EPS_LOG) -> SelfAttentionMap:
    """One gradient step against entropy: a <- a + lam * (1 + ln a).

    Entries above 1/e grow, entries below shrink (1/e is the fixed
    point), so weak long-range affinities are suppressed while strong
    local ones sharpen. The result is clamped entrywise to [0, 1]; rows
    are deliberately NOT renormalized, preserving the relative weight
    lost by suppressed rows.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0.0:
        return SelfAttentionMap(a.data.copy(), a.side)
    updated = a.data + lam * (1.0 + np.log(np.maximum(a.data, epsilon_log)))
    return SelfAttentionMap(np.clip(updated, 0.0, 1.0), a.side)


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Per-channel min-max rescale to [0, 1] along the last axis.

    Channels that are numerically constant (relative spread below 1e-6,
    i.e. float32 accumulation noise) are clamped to [0, 1] and otherwise
    left untouched: all-zero channels stay zero and an all-ones channel
    stays one, instead of having floating-point dust amplified into full
    contrast.
    """
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    spread = hi - lo
    const = spread <= _CONST_RTOL * np.maximum(1.0, np.abs(hi))
    safe = np.where(const, 1.0, spread)
    return np.where(const, np.clip(x, 0.0, 1.0), (x - lo) / safe)


def _normalize_channels(x: np.ndarray, mode: str) -> np.ndarray:
    if mode == "minmax":
        return minmax_normalize(x)
    if mode == "none":
        return x
    raise ValueError(f"unknown normalization mode {mode!r}")


def iterative_refine(initial: CategoryMaps, a_ent: SelfAttentionMap,
                     n_iters: int, normalize: str = "minmax") -> CategoryMaps:
    """Refine category maps by repeated propagation through ``a_ent``.

    Each iteration normalizes every channel, then left-multiplies it by
    the (entropy-reduced) self-attention matrix; a final normalization
    follows the loop. With the identity matrix this is a no-op after the
    first normalization; with mode "none" the loop collapses to plain
    matrix powers.
    """
    if n_iters < 1:
        raise ValueError("iteration count must be >= 1")
    if initial.n_cells != a_ent.n_cells:
        raise ShapeError(f"maps have {initial.n_cells} cells, "
                         f"self-attention has {a_ent.n_cells}")
    x = initial.data
    for _ in range(n_iters):
        x = _normalize_channels(x, normalize)
        x = x @ a_ent.data.T
    x = _normalize_channels(x, normalize)
    return CategoryMaps(x, iteration=initial.iteration + n_iters)


def refined_self_attention_power(a_ent: SelfAttentionMap, n: int) -> SelfAttentionMap:
    """n-th matrix power of the affinity map (n=0 gives the identity).

    The power form is the normalization-free view of ``iterative_refine``
    and is what ``cmd_inspect`` renders for chosen pixels.
    """
    if n < 0:
        raise ValueError("power must be >= 0")
    return SelfAttentionMap(np.linalg.matrix_power(a_ent.data, n), a_ent.side)
