"""Deterministic, platform-independent random streams.

Every frozen matrix in a model is a pure function of (global seed, layer
index, draw kind), so serialized models never ship backbone bytes.  The
generator is fixed and versioned rather than borrowed from any numerics
framework: a splitmix64 state advance with Box-Muller normals, tagged
``splitmix64-boxmuller-v1``.  The tag is written into every artifact header
and checked at reconstruction time.

Draw conventions (frozen by the algorithm tag, do not change):
  * ``next_u64``: splitmix64 -- state advances by the 64-bit golden gamma,
    output is the xor/multiply finalizer of the new state.
  * ``next_unit``: top 53 bits of ``next_u64`` scaled into [0, 1).
  * ``next_gaussian``: Box-Muller over two consecutive unit draws
    (u1, u2); ``sqrt(-2*ln(1-u1))`` pairs with angle ``2*pi*u2``; the
    cosine branch is returned first and the sine branch is cached for the
    next call.

Block draws (``u64_block`` and friends) produce the exact same sequence as
repeated scalar calls; the scalar methods are defined as 1-element blocks
so there is a single code path.
"""

from __future__ import annotations

import enum

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_MULT_1 = 0xBF58476D1CE4E5B9
MIX_MULT_2 = 0x94D049BB133111EB

ALGORITHM_ID = "splitmix64-boxmuller-v1"

_INV_2_53 = 2.0 ** -53
_U64_GAMMA = np.uint64(GOLDEN_GAMMA)
_U64_M1 = np.uint64(MIX_MULT_1)
_U64_M2 = np.uint64(MIX_MULT_2)


class DrawKind(enum.IntEnum):
    """Purpose tag for a derived stream.

    Each kind maps to a distinct stream, so e.g. dropout masks and data
    shuffling can never perturb backbone bytes.
    """

    BACKBONE_WEIGHT = 0
    ADAPTER_A_INIT = 1
    DROPOUT_MASK = 2
    DATA_SHUFFLE = 3
    HEAD_INIT = 4


def mix64(z: int) -> int:
    """splitmix64 finalizer on a plain python int (mod 2**64)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX_MULT_1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_MULT_2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps mod 2**64, matching the scalar path
    z = (z ^ (z >> np.uint64(30))) * _U64_M1
    z = (z ^ (z >> np.uint64(27))) * _U64_M2
    return z ^ (z >> np.uint64(31))


class Stream:
    """A value-like random stream; never share one mutably across threads.

    The visible state is a single u64 plus the Box-Muller carry; advancing
    is a pure function of the previous state, so identical seeds give
    identical sequences on every platform.
    """

    __slots__ = ("state", "_gauss_cache")

    algorithm_id = ALGORITHM_ID

    def __init__(self, state: int):
        self.state = state & MASK64
        self._gauss_cache: float | None = None

    def copy(self) -> "Stream":
        dup = Stream(self.state)
        dup._gauss_cache = self._gauss_cache
        return dup

    def u64_block(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs as a uint64 array."""
        if n < 0:
            raise ValueError("block size must be nonnegative")
        steps = np.arange(1, n + 1, dtype=np.uint64) * _U64_GAMMA
        states = np.uint64(self.state) + steps
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return _mix64_array(states)

    def next_u64(self) -> int:
        return int(self.u64_block(1)[0])

    def unit_block(self, n: int) -> np.ndarray:
        """Next ``n`` uniform draws in [0, 1) with 53-bit mantissas."""
        bits = self.u64_block(n) >> np.uint64(11)
        return bits.astype(np.float64) * _INV_2_53

    def next_unit(self) -> float:
        return float(self.unit_block(1)[0])

    def gaussian_block(self, n: int) -> np.ndarray:
        """Next ``n`` standard normal draws (Box-Muller, cos branch first)."""
        out = np.empty(n, dtype=np.float64)
        i = 0
        if self._gauss_cache is not None and n > 0:
            out[0] = self._gauss_cache
            self._gauss_cache = None
            i = 1
        m = n - i
        if m > 0:
            pairs = (m + 1) // 2
            u = self.unit_block(2 * pairs).reshape(pairs, 2)
            # 1-u1 lies in (0, 1], so the log is always finite
            radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
            angle = (2.0 * np.pi) * u[:, 1]
            z = np.empty(2 * pairs, dtype=np.float64)
            z[0::2] = radius * np.cos(angle)
            z[1::2] = radius * np.sin(angle)
            out[i:] = z[:m]
            if m % 2 == 1:
                self._gauss_cache = float(z[m])
        return out

    def next_gaussian(self) -> float:
        return float(self.gaussian_block(1)[0])

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) driven by unit draws."""
        keys = self.unit_block(n)
        return np.argsort(keys, kind="stable")

    def __repr__(self):
        return f"Stream(state=0x{self.state:016X})"


def derive_stream(global_seed: int, layer_index: int, kind: DrawKind) -> Stream:
    """Derive the stream for one (seed, layer, kind) triple.

    Mixing folds each component through the splitmix64 finalizer in turn;
    distinct inputs give distinct states with overwhelming probability.
    """
    if layer_index < 0:
        raise ValueError("layer_index must be nonnegative")
    s = mix64((global_seed + GOLDEN_GAMMA) & MASK64)
    s = mix64((s + (layer_index + 1) * GOLDEN_GAMMA) & MASK64)
    s = mix64((s + (int(kind) + 1) * GOLDEN_GAMMA) & MASK64)
    return Stream(s)
