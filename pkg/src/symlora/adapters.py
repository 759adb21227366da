"""LoRA and SymLoRA adapters over frozen linear maps.

A LoRA adapter stores the weight update as a rank-r product B @ A added
to the frozen base weight. A SymLoRA adapter stores it as a truncated
spectral form Q @ diag(Lambda) @ Q^T, which is symmetric and has rank at
most r by construction, plus a trainable scalar that multiplies the base
weight itself (so the update can rescale or zero the original map, not
just add to it). Both updates are scaled by alpha / r.

Parameter budget per adapted square n x n matrix: LoRA trains 2*n*r
values, SymLoRA (n+1)*r plus the one base scale.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Node, Tape
from .errors import (
    ConfigError,
    NoAdaptersError,
    RankRangeError,
    ShapeMismatchError,
    SymloraError,
)
from .linalg import jacobi_eigh
from .matrix import Matrix
from .rng import SeededRng, gaussian_matrix

DEFAULT_INIT_STD = 0.02


class BaseLinear:
    """A frozen weight matrix with its network position.

    The entries never change after construction (or after an explicit
    refreeze when a pretraining phase produces the weights); this is
    enforced by content hashing.
    """

    def __init__(self, w0: Matrix | np.ndarray, layer_index: int = 0, name: str = "linear"):
        self._w0 = np.array(w0.to_numpy() if isinstance(w0, Matrix) else w0,
                            dtype=np.float64, order="C")
        if self._w0.ndim != 2:
            raise ShapeMismatchError(f"BaseLinear weight must be 2-D, got {self._w0.shape}")
        if layer_index < 0:
            raise ConfigError(f"layer_index must be >= 0, got {layer_index}")
        self.layer_index = int(layer_index)
        self.name = str(name)
        self._frozen_hash = self._content_hash()

    @property
    def W0(self) -> Matrix:
        return Matrix(self._w0)

    @property
    def n(self) -> int:
        return self._w0.shape[0]

    @property
    def m(self) -> int:
        return self._w0.shape[1]

    def _content_hash(self) -> int:
        return hash(self._w0.tobytes())

    def refreeze(self) -> None:
        """Re-record the frozen content hash (after a pretraining phase)."""
        self._frozen_hash = self._content_hash()

    def assert_frozen(self) -> None:
        if self._content_hash() != self._frozen_hash:
            raise SymloraError(f"frozen base weight {self.name!r} was modified")

    def fingerprint_bytes(self) -> bytes:
        return self._w0.astype("<f8").tobytes()


class LoraAdapter:
    """Rank-r additive update delta = (alpha/r) * B @ A.

    B starts at zero so the initial update is exactly zero and the
    adapted forward equals the base forward.
    """

    kind = "lora"

    def __init__(self, b: Matrix | np.ndarray, a: Matrix | np.ndarray,
                 r: int, alpha: float, init_std: float = DEFAULT_INIT_STD,
                 dropout: float = 0.0):
        self._b = _own_array(b)
        self._a = _own_array(a)
        self.r = int(r)
        self.alpha = float(alpha)
        self.init_std = float(init_std)
        self.dropout = float(dropout)
        n, rb = self._b.shape
        ra, m = self._a.shape
        if rb != self.r or ra != self.r:
            raise ShapeMismatchError(
                f"lora factors disagree with rank {self.r}: B {self._b.shape}, A {self._a.shape}")
        _check_rank(self.r, min(n, m))
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {alpha}")

    @property
    def B(self) -> Matrix:
        return Matrix(self._b)

    @property
    def A(self) -> Matrix:
        return Matrix(self._a)

    @property
    def n(self) -> int:
        return self._b.shape[0]

    @property
    def m(self) -> int:
        return self._a.shape[1]

    def delta_weight_array(self) -> np.ndarray:
        return (self.alpha / self.r) * (self._b @ self._a)

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [("B", self._b), ("A", self._a)]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self._b.copy(), self._a.copy(), self.r, self.alpha,
                           self.init_std, self.dropout)


class SymLoraAdapter:
    """Rank-r symmetric spectral update plus a trainable base scale.

    delta = (alpha/r) * Q @ diag(Lambda) @ Q^T is symmetric with rank at
    most r for any parameter values; the scalar lambda_scale multiplies
    the frozen base weight in the forward pass, enabling multiplicative
    updates (and zeroing) of the original map. Requires a square base.

    Initialization: Q Gaussian, Lambda = 0, lambda_scale = 1. This is the
    zero-one-factor choice that keeps the initial forward equal to the
    base forward while Q still receives gradient signal through Lambda.
    """

    kind = "symlora"

    def __init__(self, q: Matrix | np.ndarray, lam: Matrix | np.ndarray,
                 lambda_scale: float | np.ndarray, r: int, alpha: float,
                 init_std: float = DEFAULT_INIT_STD, dropout: float = 0.0):
        self._q = _own_array(q)
        lam_arr = _own_array(lam)
        self._lam = lam_arr.reshape(-1, 1)
        if isinstance(lambda_scale, np.ndarray):
            self._scale = lambda_scale  # may be shared when lambdas are tied
        else:
            self._scale = np.array([[float(lambda_scale)]])
        self.r = int(r)
        self.alpha = float(alpha)
        self.init_std = float(init_std)
        self.dropout = float(dropout)
        n, rq = self._q.shape
        if rq != self.r or self._lam.shape != (self.r, 1):
            raise ShapeMismatchError(
                f"symlora factors disagree with rank {self.r}: "
                f"Q {self._q.shape}, Lambda {self._lam.shape}")
        _check_rank(self.r, n)
        if self._scale.shape != (1, 1):
            raise ShapeMismatchError(f"lambda_scale must be 1x1, got {self._scale.shape}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {alpha}")

    @property
    def Q(self) -> Matrix:
        return Matrix(self._q)

    @property
    def Lambda(self) -> Matrix:
        """Spectrum as an r x 1 column."""
        return Matrix(self._lam)

    @property
    def lambda_scale(self) -> float:
        return float(self._scale[0, 0])

    @property
    def n(self) -> int:
        return self._q.shape[0]

    @property
    def m(self) -> int:
        return self._q.shape[0]

    def delta_weight_array(self) -> np.ndarray:
        return (self.alpha / self.r) * ((self._q * self._lam.reshape(-1)) @ self._q.T)

    def symmetry_violation(self) -> float:
        d = self.delta_weight_array()
        return float(np.max(np.abs(d - d.T)))

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [("Q", self._q), ("Lambda", self._lam), ("lambda_scale", self._scale)]

    def tie_lambda_to(self, other: "SymLoraAdapter") -> None:
        """Share the base-scale parameter with another adapter."""
        self._scale = other._scale

    def copy(self) -> "SymLoraAdapter":
        return SymLoraAdapter(self._q.copy(), self._lam.copy(), self._scale.copy(),
                              self.r, self.alpha, self.init_std, self.dropout)


Adapter = LoraAdapter | SymLoraAdapter


def _own_array(value: Matrix | np.ndarray) -> np.ndarray:
    a = value.to_numpy() if isinstance(value, Matrix) else np.asarray(value)
    return np.array(a, dtype=np.float64, order="C")


def _check_rank(r: int, limit: int) -> None:
    if not 1 <= r <= limit:
        raise RankRangeError(f"rank {r} outside [1, {limit}]")


def init_lora(n: int, m: int, r: int, alpha: float,
              init_std: float = DEFAULT_INIT_STD, rng: SeededRng | None = None,
              dropout: float = 0.0) -> LoraAdapter:
    """Fresh LoRA adapter: A ~ N(0, init_std^2), B = 0."""
    _check_rank(r, min(n, m))
    if rng is None:
        rng = SeededRng(0)
    a = gaussian_matrix(r, m, init_std, rng)
    return LoraAdapter(np.zeros((n, r)), a, r, alpha, init_std, dropout)


def init_symlora(n: int, r: int, alpha: float,
                 init_std: float = DEFAULT_INIT_STD, rng: SeededRng | None = None,
                 dropout: float = 0.0) -> SymLoraAdapter:
    """Fresh SymLoRA adapter: Q ~ N(0, init_std^2), Lambda = 0, scale = 1."""
    _check_rank(r, n)
    if rng is None:
        rng = SeededRng(0)
    q = gaussian_matrix(n, r, init_std, rng)
    return SymLoraAdapter(q, np.zeros((r, 1)), 1.0, r, alpha, init_std, dropout)


def delta_weight(adapter: Adapter) -> Matrix:
    """The realized update matrix (alpha/r)-scaled."""
    return Matrix._wrap(adapter.delta_weight_array())


def param_count(adapter: Adapter, include_lambda_scale: bool = False) -> int:
    """Trainable parameter count.

    SymLoRA's spectral factors hold (n+1)*r values; the base scale is
    counted only when include_lambda_scale is set, since the headline
    budget formula leaves it out even though it is trained.
    """
    if adapter.kind == "lora":
        return adapter.n * adapter.r + adapter.r * adapter.m
    count = (adapter.n + 1) * adapter.r
    return count + 1 if include_lambda_scale else count


class AdaptedLinear:
    """A frozen linear map with an optional adapter attached.

    SymLoRA attaches only to square bases; requesting it on a rectangular
    one is a configuration error rather than a silent fallback.
    """

    def __init__(self, base: BaseLinear, adapter: Adapter | None = None):
        self.base = base
        self.adapter = None
        if adapter is not None:
            self.attach(adapter)

    def attach(self, adapter: Adapter) -> None:
        n, m = self.base.n, self.base.m
        if adapter.kind == "symlora":
            if n != m:
                raise ConfigError(
                    f"symlora requires a square base, {self.base.name!r} is {n}x{m}")
            if adapter.n != n:
                raise ShapeMismatchError(
                    f"adapter size {adapter.n} != base size {n} on {self.base.name!r}")
        else:
            if adapter.n != n or adapter.m != m:
                raise ShapeMismatchError(
                    f"adapter {adapter.n}x{adapter.m} != base {n}x{m} on {self.base.name!r}")
        self.adapter = adapter

    def detach(self) -> None:
        self.adapter = None

    # -- parameters -------------------------------------------------------

    def param_specs(self, prefix: str = "") -> list[tuple[str, np.ndarray, bool]]:
        """(key, array, trainable) triples; the base weight is frozen."""
        specs = [(prefix + "W0", self.base._w0, False)]
        if self.adapter is not None:
            for local, arr in self.adapter.param_items():
                specs.append((prefix + local, arr, True))
        return specs

    # -- forward ----------------------------------------------------------

    def forward_node(self, tape: Tape, x: Node, leaves: dict[str, Node],
                     prefix: str = "", dropout_rng: SeededRng | None = None) -> Node:
        """Adapted forward as three matrix products; the update matrix is
        never materialized."""
        base_out = tape.matmul(leaves[prefix + "W0"], x)
        ad = self.adapter
        if ad is None:
            return base_out
        x_in = x
        if ad.dropout > 0.0 and dropout_rng is not None:
            keep = (dropout_rng.uniform(x.shape[0] * x.shape[1])
                    .reshape(x.shape) >= ad.dropout) / (1.0 - ad.dropout)
            x_in = tape.mul(x, tape.constant(keep))
        scale = ad.alpha / ad.r
        if ad.kind == "lora":
            delta = tape.matmul(leaves[prefix + "B"],
                                tape.matmul(leaves[prefix + "A"], x_in))
            return tape.add(base_out, tape.scale(delta, scale))
        q = leaves[prefix + "Q"]
        qtx = tape.matmul(tape.transpose(q), x_in)
        delta = tape.matmul(q, tape.mul_col(qtx, leaves[prefix + "Lambda"]))
        scaled_base = tape.smul(leaves[prefix + "lambda_scale"], base_out)
        return tape.add(scaled_base, tape.scale(delta, scale))

    def forward(self, x: Matrix) -> Matrix:
        if x.rows != self.base.m:
            raise ShapeMismatchError(
                f"forward: input has {x.rows} rows, base {self.base.name!r} "
                f"expects {self.base.m}")
        tape = Tape()
        leaves = {key: tape.leaf(arr, name=key, trainable=False)
                  for key, arr, _ in self.param_specs()}
        out = self.forward_node(tape, tape.constant(x), leaves)
        return Matrix(out.value)

    # -- merge ------------------------------------------------------------

    def merge(self) -> Matrix:
        """Collapse base and adapter into one dense matrix."""
        if self.adapter is None:
            raise NoAdaptersError(f"no adapter attached to {self.base.name!r}")
        w0 = self.base._w0
        ad = self.adapter
        if ad.kind == "symlora":
            return Matrix._wrap(ad.lambda_scale * w0 + ad.delta_weight_array())
        return Matrix._wrap(w0 + ad.delta_weight_array())

    def realized_map(self) -> Matrix:
        """The dense linear map currently computed by forward()."""
        if self.adapter is None:
            return self.base.W0
        return self.merge()

    def copy(self) -> "AdaptedLinear":
        clone = AdaptedLinear(BaseLinear(self.base._w0, self.base.layer_index,
                                         self.base.name))
        if self.adapter is not None:
            clone.adapter = self.adapter.copy()
        return clone


def forward(layer: AdaptedLinear, x: Matrix) -> Matrix:
    return layer.forward(x)


def merge(layer: AdaptedLinear) -> Matrix:
    return layer.merge()


def best_symmetric_rank_r_approximation(target: Matrix, r: int) -> Matrix:
    """Frobenius-optimal symmetric matrix of rank <= r approximating target.

    Symmetrize, eigendecompose, and keep the r largest-magnitude
    eigenpairs; for symmetric matrices this truncation is optimal, and
    the symmetric part is the closest symmetric matrix to an arbitrary
    target (the antisymmetric part is orthogonal in Frobenius geometry).
    """
    t = target.to_numpy()
    n = t.shape[0]
    if t.shape[0] != t.shape[1]:
        raise ShapeMismatchError(f"target must be square, got {t.shape}")
    _check_rank(r, n)
    sym = (t + t.T) / 2.0
    w, v = jacobi_eigh(sym)
    keep = np.argsort(-np.abs(w))[:r]
    vk = v[:, keep]
    return Matrix._wrap((vk * w[keep]) @ vk.T)
