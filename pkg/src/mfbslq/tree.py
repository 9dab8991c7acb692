"""Binary scenario tree: a finite filtered probability space with exact operators.

The driving noise is a +/-sqrt(dt) random walk on n_steps steps.  Nodes at
level k are indexed by j in [0, 2^k); the children of (k, j) are
(k+1, 2j) -- the "up" move, increment +sqrt(dt) -- and (k+1, 2j+1) -- the
"down" move, increment -sqrt(dt).  The bits of j therefore spell the path,
most significant bit first.  Every level-k node carries probability 2^-k
(exact in binary floating point).

Adapted processes are stored as one flat contiguous array per level with
the node index as the leading axis, so children of node j sit at 2j and
2j+1 and all level sweeps are plain slicing.  Reductions (``expect``) use
numpy's fixed pairwise summation order, which is bit-reproducible for a
given input regardless of threading.
"""

from __future__ import annotations

import math

import numpy as np

from ._errors import ConfigurationError

MAX_DEPTH = 24
DEFAULT_DEPTH = 16


class ScenarioTree:
    """Time grid plus the exact conditional-expectation calculus of the walk."""

    def __init__(self, horizon: float, n_steps: int):
        if not horizon > 0:
            raise ConfigurationError(f"horizon must be positive, got {horizon}")
        if not 1 <= int(n_steps) <= MAX_DEPTH:
            raise ConfigurationError(
                f"n_steps must be within [1, {MAX_DEPTH}], got {n_steps}"
            )
        self.horizon = float(horizon)
        self.n_steps = int(n_steps)
        self.dt = self.horizon / self.n_steps
        self.sqrt_dt = math.sqrt(self.dt)
        self.times = np.arange(self.n_steps + 1) * self.dt

    # -- structure ---------------------------------------------------------

    def n_nodes(self, level: int) -> int:
        self._check_level(level)
        return 1 << level

    @property
    def total_nodes(self) -> int:
        return (1 << (self.n_steps + 1)) - 1

    def node_probability(self, level: int) -> float:
        self._check_level(level)
        return 2.0 ** (-level)

    def brownian(self, level: int) -> np.ndarray:
        """Walk values W(level, j) for every node of a level, shape (2^level,)."""
        self._check_level(level)
        j = np.arange(1 << level, dtype=np.int64)
        downs = np.zeros(1 << level, dtype=np.int64)
        for bit in range(level):
            downs += (j >> bit) & 1
        return self.sqrt_dt * (level - 2 * downs).astype(np.float64)

    def child_signs(self, level: int) -> np.ndarray:
        """Sign of the increment for each child node at ``level + 1``.

        Entry 2j is +1 (up child of j), entry 2j+1 is -1.
        """
        self._check_level(level + 1)
        return np.tile(np.array([1.0, -1.0]), 1 << level)

    # -- operators ---------------------------------------------------------

    def cond_expect(self, values: np.ndarray) -> np.ndarray:
        """One-step conditional expectation: average the two children of each node."""
        if len(values) < 2 or len(values) % 2:
            raise ConfigurationError(
                f"cond_expect needs a full child level, got {len(values)} nodes"
            )
        return 0.5 * (values[0::2] + values[1::2])

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Unconditional mean over a level (uniform node probability 2^-k)."""
        return values.mean(axis=0)

    def z_from_next(self, y_next: np.ndarray) -> np.ndarray:
        """Martingale-representation integrand of a next-level process.

        Z(k, j) = (y(k+1, 2j) - y(k+1, 2j+1)) / (2 sqrt(dt)), exact on the tree.
        """
        if len(y_next) < 2 or len(y_next) % 2:
            raise ConfigurationError(
                f"z_from_next needs a full child level, got {len(y_next)} nodes"
            )
        return (y_next[0::2] - y_next[1::2]) / (2.0 * self.sqrt_dt)

    # -- helpers -----------------------------------------------------------

    def to_children(self, values: np.ndarray) -> np.ndarray:
        """Copy level-k node values onto their two children (repeat along axis 0)."""
        return np.repeat(values, 2, axis=0)

    def _check_level(self, level: int) -> None:
        if not 0 <= level <= self.n_steps:
            raise ConfigurationError(
                f"level {level} outside [0, {self.n_steps}]"
            )


def build_tree(horizon: float, n_steps: int) -> ScenarioTree:
    """Build the scenario tree for a horizon and step count (1 <= n_steps <= 24)."""
    return ScenarioTree(horizon, n_steps)
