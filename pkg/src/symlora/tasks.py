"""Synthetic desk-scale tasks with known optima.

Planted linear tasks regress y = (W0 + D*) x + noise where D* is a known
low-rank update, optionally exactly symmetric. Because the base weight
is constructed symmetric, the antisymmetric part of D* is exactly the
irreducible error of any symmetric-update hypothesis, which makes the
training floors checkable against the spectral-truncation oracle.

Toy sequence tasks (parity, majority, first-token-copy) stand in for
text classification at a scale where a tiny transformer trains in
seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RankRangeError
from .matrix import Matrix, frobenius_norm
from .rng import SeededRng, gaussian_matrix

SEQUENCE_KINDS = ("parity", "majority", "copy")
_KIND_ALIASES = {"first-token-copy": "copy"}


@dataclass
class PlantedLinearTask:
    """Linear regression around a frozen base map with a planted update."""

    n: int
    r_star: int
    symmetric: bool
    noise_std: float
    seed: int
    W0: Matrix = field(repr=False)
    delta_star: Matrix = field(repr=False)

    metric_name = "mse"
    higher_is_better = False

    def target_map(self) -> Matrix:
        return self.W0 + self.delta_star

    def sample_batch(self, batch_size: int, rng: SeededRng) -> tuple[Matrix, Matrix]:
        """(inputs, targets) with standard Gaussian inputs as columns."""
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        x = rng.normal(self.n * batch_size).reshape(self.n, batch_size)
        y = self.target_map().to_numpy() @ x
        if self.noise_std > 0.0:
            y = y + self.noise_std * rng.normal(self.n * batch_size).reshape(self.n, batch_size)
        return Matrix._wrap(x), Matrix._wrap(y)

    def eval_set(self, size: int = 1024) -> tuple[Matrix, Matrix]:
        """Fixed evaluation batch derived from the task seed."""
        return self.sample_batch(size, SeededRng(self.seed).spawn(1))

    def population_mse(self, model_map: Matrix) -> float:
        """Exact expected per-entry squared error of a candidate linear map."""
        gap = frobenius_norm(model_map - self.target_map())
        return gap * gap / self.n + self.noise_std**2

    def antisymmetric_residual(self) -> float:
        """Frobenius norm of the antisymmetric part of the planted update."""
        d = self.delta_star.to_numpy()
        return float(np.linalg.norm((d - d.T) / 2.0))

    def spec(self) -> dict:
        return {
            "type": "planted",
            "n": self.n,
            "r_star": self.r_star,
            "symmetric": self.symmetric,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }


def make_planted_task(n: int, r_star: int, symmetric: bool,
                      noise_std: float = 0.01, seed: int = 0) -> PlantedLinearTask:
    """Construct a planted task with unit-norm update of exact rank r_star.

    The base W0 is symmetric so a symmetric-hypothesis model never incurs
    base-induced asymmetric error; the symmetric update is built as
    G @ diag(g) @ G^T, the general one as B @ A.
    """
    if not 1 <= r_star <= n:
        raise RankRangeError(f"r_star {r_star} outside [1, {n}]")
    if noise_std < 0.0:
        raise ConfigError(f"noise_std must be >= 0, got {noise_std}")
    rng = SeededRng(seed)
    g = gaussian_matrix(n, n, 1.0, rng).to_numpy()
    w0 = (g + g.T) / (2.0 * np.sqrt(n))
    if symmetric:
        gq = gaussian_matrix(n, r_star, 1.0, rng).to_numpy()
        spectrum = gaussian_matrix(r_star, 1, 1.0, rng).to_numpy().reshape(-1)
        delta = (gq * spectrum) @ gq.T
    else:
        b = gaussian_matrix(n, r_star, 1.0, rng).to_numpy()
        a = gaussian_matrix(r_star, n, 1.0, rng).to_numpy()
        delta = b @ a
    delta = delta / np.linalg.norm(delta)
    return PlantedLinearTask(n=n, r_star=r_star, symmetric=symmetric,
                             noise_std=noise_std, seed=seed,
                             W0=Matrix._wrap(w0), delta_star=Matrix._wrap(delta))


@dataclass
class ToySequenceTask:
    """Token-sequence classification with a closed-form labeling rule.

    parity:   label = sum of tokens mod 2
    majority: label = the more common parity among tokens (odd seq_len)
    copy:     label = the first token's id
    """

    kind: str
    vocab_size: int
    seq_len: int
    n_classes: int
    seed: int

    metric_name = "accuracy"
    higher_is_better = True

    def __post_init__(self) -> None:
        self.kind = _KIND_ALIASES.get(self.kind, self.kind)
        if self.kind not in SEQUENCE_KINDS:
            raise ConfigError(f"unknown sequence task kind {self.kind!r}")
        if self.vocab_size < 2 or self.seq_len < 1:
            raise ConfigError("vocab_size must be >= 2 and seq_len >= 1")
        if self.kind in ("parity", "majority"):
            if self.n_classes != 2:
                raise ConfigError(f"{self.kind} is binary, got n_classes={self.n_classes}")
            if self.vocab_size % 2 != 0:
                raise ConfigError(f"{self.kind} needs an even vocab for class balance")
        if self.kind == "majority" and self.seq_len % 2 == 0:
            raise ConfigError("majority needs an odd seq_len to avoid ties")
        if self.kind == "copy" and self.n_classes != self.vocab_size:
            raise ConfigError("copy labels are token ids, so n_classes must equal vocab_size")

    def labels_for(self, tokens: np.ndarray) -> np.ndarray:
        bits = tokens % 2
        if self.kind == "parity":
            return bits.sum(axis=1) % 2
        if self.kind == "majority":
            return (bits.sum(axis=1) * 2 > self.seq_len).astype(np.int64)
        return tokens[:, 0].astype(np.int64)

    def sample_batch(self, batch_size: int, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
        """(tokens, labels): int arrays of shape (batch, seq_len) and (batch,)."""
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        tokens = rng.integers(batch_size * self.seq_len, self.vocab_size)
        tokens = tokens.reshape(batch_size, self.seq_len)
        return tokens, self.labels_for(tokens)

    def eval_set(self, size: int = 512) -> tuple[np.ndarray, np.ndarray]:
        return self.sample_batch(size, SeededRng(self.seed).spawn(1))

    def spec(self) -> dict:
        return {
            "type": "sequence",
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "seq_len": self.seq_len,
            "n_classes": self.n_classes,
            "seed": self.seed,
        }


def make_sequence_task(kind: str, vocab_size: int = 8, seq_len: int = 9,
                       seed: int = 0) -> ToySequenceTask:
    kind = _KIND_ALIASES.get(kind, kind)
    n_classes = vocab_size if kind == "copy" else 2
    return ToySequenceTask(kind=kind, vocab_size=vocab_size, seq_len=seq_len,
                           n_classes=n_classes, seed=seed)


def make_task(spec: dict):
    """Rebuild a task from its spec dict (the checkpoint metadata form)."""
    kind = spec.get("type")
    if kind == "planted":
        return make_planted_task(spec["n"], spec["r_star"], spec["symmetric"],
                                 spec["noise_std"], spec["seed"])
    if kind == "sequence":
        return ToySequenceTask(kind=spec["kind"], vocab_size=spec["vocab_size"],
                               seq_len=spec["seq_len"], n_classes=spec["n_classes"],
                               seed=spec["seed"])
    raise ConfigError(f"unknown task spec type {kind!r}")
