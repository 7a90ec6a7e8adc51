"""Integration rules over the heterogeneity support [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParameterError


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes strictly inside (0, 1) with positive weights summing to one."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape:
            raise ParameterError("nodes and weights must be 1-D arrays of equal length")
        if np.any(nodes <= 0) or np.any(nodes >= 1):
            raise ParameterError("quadrature nodes must lie strictly inside (0, 1)")
        if np.any(weights <= 0):
            raise ParameterError("quadrature weights must be positive")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return len(self.nodes)

    def integrate(self, values, axis=-1):
        return np.tensordot(np.asarray(values), self.weights, axes=([axis], [0]))


def gauss_legendre(n: int = 64, a: float = 0.0, b: float = 1.0) -> QuadratureRule:
    """n-point Gauss-Legendre rule mapped to [a, b] (weights sum to b - a)."""
    if n < 2:
        raise ConfigError(f"quadrature needs at least 2 nodes, got {n}")
    z, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return QuadratureRule(a + half * (z + 1.0), half * w)


def point_mass(tau: float) -> QuadratureRule:
    """Single node carrying all the weight; a degenerate heterogeneity distribution."""
    return QuadratureRule(np.array([tau]), np.array([1.0]))
