"""Panel Gauss-Legendre quadrature for Bessel-oscillatory integrals.

Used for the Hankel-type integrals behind the radial Fourier transform
and the fractional-Laplacian symbol.  Panels are sized to resolve the
oscillation J_nu(omega t) and refined geometrically near t = 0 where the
integrands carry fractional powers.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import special


def panel_nodes(
    upper: float,
    omega: float,
    n_per_panel: int = 24,
    max_width: float = 2.0,
    n_geometric: int = 10,
) -> tuple[np.ndarray, np.ndarray]:
    """GL nodes/weights on [0, upper] with panel width <= pi/omega.

    The first panel is split geometrically toward 0 to absorb fractional
    power behaviour of the integrand.
    """
    if upper <= 0:
        raise ValueError("upper must be positive")
    width = max_width if omega <= 0 else min(max_width, math.pi / omega)
    width = min(width, upper)
    edges = [0.0]
    # geometric refinement of the first panel
    for k in range(n_geometric, 0, -1):
        edges.append(width * 2.0 ** (-k))
    t = width
    while t < upper - 1e-12 * upper:
        t = min(t + width, upper)
        edges.append(t)
    edges = np.asarray(edges)
    x, w = np.polynomial.legendre.leggauss(n_per_panel)
    a = edges[:-1][:, None]
    b = edges[1:][:, None]
    nodes = 0.5 * (b - a) * x[None, :] + 0.5 * (a + b)
    weights = 0.5 * (b - a) * np.broadcast_to(w, nodes.shape)
    return nodes.ravel(), weights.ravel()


def bessel_panel_integral(
    g, nu: float, omega: float, upper: float, n_per_panel: int = 24
) -> float:
    """int_0^upper g(t) J_nu(omega t) dt with oscillation-resolving panels."""
    nodes, weights = panel_nodes(upper, omega, n_per_panel)
    vals = np.asarray(g(nodes), dtype=float)
    bess = special.jv(nu, omega * nodes)
    return float(np.dot(weights, vals * bess))
