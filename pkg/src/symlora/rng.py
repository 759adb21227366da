"""Deterministic seeded random numbers.

The generator is a fixed, documented algorithm rather than a library
default so that checkpoints and configs can name it and reproduce every
draw: a counter-based SplitMix64 stream feeding Box-Muller for Gaussians.
The integer pipeline is bit-exact on every platform; the Gaussian
transform goes through sqrt/log/cos and is bit-exact for a given
numpy build.

Draw k of the stream for seed s is mix64(s + (k+1) * GOLDEN) where mix64
is the SplitMix64 finalizer. Because the stream is a pure function of
(seed, counter), cloning and deterministic child streams are trivial.
"""

from __future__ import annotations

import numpy as np

from .matrix import Matrix

# Public identifier baked into the checkpoint format.
RNG_ALGORITHM = "splitmix64-boxmuller-v1"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SPAWN_SALT = np.uint64(0xD1B54A32D192ED03)
_U64_MASK = (1 << 64) - 1
_INV_2_53 = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64_MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64_MASK
    return z ^ (z >> 31)


class SeededRng:
    """Deterministic random stream identified by (seed, algorithm).

    Identical seeds yield identical draw sequences. Instances are stateful
    (they advance a draw counter) and must not be shared across threads;
    use spawn() to derive independent child streams for parallel work.
    """

    algorithm = RNG_ALGORITHM

    __slots__ = ("seed", "_counter")

    def __init__(self, seed: int, _counter: int = 0) -> None:
        self.seed = int(seed) & _U64_MASK
        self._counter = int(_counter)

    def clone(self) -> "SeededRng":
        """Copy of this stream at its current position."""
        return SeededRng(self.seed, self._counter)

    def spawn(self, index: int) -> "SeededRng":
        """Independent child stream number `index`, derived deterministically."""
        salt = (int(_SPAWN_SALT) * ((int(index) + 1) & _U64_MASK)) & _U64_MASK
        return SeededRng(_mix64_int(_mix64_int(self.seed) ^ salt))

    def uint64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit draws."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1)."""
        return (self.uint64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        """n standard normal doubles via Box-Muller pairs."""
        m = (n + 1) // 2
        bits = self.uint64(2 * m)
        # u1 in (0, 1] keeps the log finite; u2 in [0, 1).
        u1 = ((bits[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (bits[m:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])
        return z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """n ints uniform on [0, high)."""
        if high < 1:
            raise ValueError("high must be >= 1")
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, counter={self._counter})"


def gaussian_matrix(rows: int, cols: int, std: float, rng: SeededRng) -> Matrix:
    """rows x cols matrix of i.i.d. N(0, std^2) entries drawn from rng.

    Entries are standard normals scaled by std, so gaussian_matrix with
    std=2 is exactly twice the std=1 draw from the same stream position.
    """
    if std <= 0.0:
        raise ValueError(f"std must be positive, got {std}")
    z = rng.normal(rows * cols).reshape(rows, cols)
    return Matrix._wrap(z * std)
