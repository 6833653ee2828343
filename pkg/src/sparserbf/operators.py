"""Quasi-analytic operator calculus on radial atoms.

Integer-order operators come from the chain rule through the radial
profile; fractional Laplacians go through the Hankel-integral symbol
K_d^{beta/2}[phi](rho), tabulated on a rho grid for training.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import sympy as sp
from scipy import special
from scipy.interpolate import PchipInterpolator

from .kernels import AnisoKernel, Kernel
from .profiles import RHO, QuadratureError, RadialProfile, from_name
from .quadrature import panel_nodes


# -- symbolic radial helpers -------------------------------------------------

_RADIAL_CACHE: dict = {}


class RadialFn:
    """Numeric wrapper of a sympy expression in rho with a rho->0 limit.

    Below ``eps`` the (possibly 0/0) expression is replaced by its
    one-sided limit; the substitution error is O(eps^2) for the smooth
    families.
    """

    def __init__(self, expr: sp.Expr, eps: float = 1e-6):
        self.expr = expr
        self.fn = sp.lambdify(RHO, expr, modules="numpy")
        self.eps = eps
        self._limit = "unset"

    @property
    def limit0(self):
        if self._limit == "unset":
            try:
                lim = sp.limit(self.expr, RHO, 0, "+")
                self._limit = float(lim) if lim.is_finite else None
            except (TypeError, ValueError, NotImplementedError):
                self._limit = None
        return self._limit

    def __call__(self, rho):
        rho = np.asarray(rho, dtype=float)
        small = rho < self.eps
        if np.any(small):
            if self.limit0 is None:
                raise FloatingPointError(
                    "radial expression has no finite limit at rho = 0"
                )
            safe = np.where(small, self.eps, rho)
            with np.errstate(all="ignore"):
                out = np.asarray(self.fn(safe), dtype=float)
            out = np.broadcast_to(out, rho.shape).copy()
            out[small] = self.limit0
        else:
            with np.errstate(all="ignore"):
                out = np.asarray(self.fn(rho), dtype=float)
            out = np.broadcast_to(out, rho.shape).copy()
        if out.ndim == 0:
            return float(out)
        return out


def _profile_key(profile: RadialProfile) -> tuple:
    return (profile.family, profile.params)


def radial_expr(profile: RadialProfile, tag: str, d: int = 0, m: int = 0) -> sp.Expr:
    """Symbolic radial building blocks, cached per profile."""
    key = (_profile_key(profile), tag, d, m)
    if key in _RADIAL_CACHE:
        return _RADIAL_CACHE[key]
    phi = profile.expr
    if tag == "phi":
        e = sp.diff(phi, RHO, m)
    elif tag == "lap":  # radial part of the plain Laplacian of x -> phi(|x|)
        e = sp.diff(phi, RHO, 2) + (d - 1) / RHO * sp.diff(phi, RHO)
    elif tag == "kdm":  # m-fold radial Laplacian composition K_d^m
        e = phi
        for _ in range(m):
            e = -sp.diff(e, RHO, 2) - (d - 1) / RHO * sp.diff(e, RHO)
            e = sp.simplify(sp.together(e))
        _RADIAL_CACHE[key] = e
        return e
    else:
        raise ValueError(f"unknown radial tag {tag}")
    _RADIAL_CACHE[key] = e
    return e


def radial_fn(profile: RadialProfile, tag: str, d: int = 0, m: int = 0) -> RadialFn:
    key = (_profile_key(profile), tag, d, m, "fn")
    if key not in _RADIAL_CACHE:
        _RADIAL_CACHE[key] = RadialFn(radial_expr(profile, tag, d, m))
    return _RADIAL_CACHE[key]


def derived_fn(profile: RadialProfile, expr: sp.Expr, label: str) -> RadialFn:
    key = (_profile_key(profile), label, "derived")
    if key not in _RADIAL_CACHE:
        _RADIAL_CACHE[key] = RadialFn(expr)
    return _RADIAL_CACHE[key]


# -- integer-order operators -------------------------------------------------


def radial_laplacian(profile: RadialProfile, rho, d: int):
    """K_d[phi](rho) = -phi'' - (d-1)/rho phi', limit -d phi''(0) at 0."""
    return radial_fn(profile, "kdm", d=d, m=1)(rho)


def _check_smoothness(profile: RadialProfile, order: int) -> None:
    if profile.smoothness < order:
        raise ValueError(
            f"profile {profile.family} has only {profile.smoothness} continuous "
            f"derivatives; operator needs {order}"
        )


def polyharmonic(profile: RadialProfile, rho, d: int, m: int):
    """(K_d^m phi)(rho), the m-fold radial Laplacian composition."""
    if m < 1:
        raise ValueError("m must be a positive integer")
    _check_smoothness(profile, 2 * m)
    return radial_fn(profile, "kdm", d=d, m=m)(rho)


@dataclass(frozen=True)
class SecondOrderOp:
    """L[u] = A(x):grad^2 u + B(x).grad u + c(x) u with A symmetric."""

    a: Callable
    b: Callable
    c: Callable


def apply_second_order(op: SecondOrderOp, kernel: Kernel, x) -> float:
    x = np.asarray(x, dtype=float)
    a = np.asarray(op.a(x), dtype=float)
    if not np.allclose(a, a.T):
        raise ValueError("A(x) must be symmetric")
    b = np.asarray(op.b(x), dtype=float)
    c = float(op.c(x))
    sig, gam = kernel.sigma, kernel.gamma
    phi = kernel.profile
    r = x - kernel.y
    dist = np.linalg.norm(r)
    rho = dist / sig
    pref = sig**gam
    if dist == 0.0:
        # radial-average continuous extension at the center
        return pref * (phi.limit_at(0.0, 2) / sig**2 * np.trace(a) + c * phi(0.0))
    e = r / dist
    eae = float(e @ a @ e)
    val = (
        (phi(rho, 2) * eae + phi(rho, 1) / rho * (np.trace(a) - eae)) / sig**2
        + phi(rho, 1) * float(b @ e) / sig
        + c * phi(rho)
    )
    return pref * val


def kernel_gradient_x(kernel: Kernel, x) -> np.ndarray:
    """Spatial gradient sigma^(gamma-1) phi'(rho) e of the atom."""
    x = np.asarray(x, dtype=float)
    r = x - kernel.y
    dist = np.linalg.norm(r)
    if dist == 0.0:
        if kernel.profile.limit_at(0.0, 1) != 0.0:
            raise ValueError("gradient undefined at the center for this profile")
        return np.zeros_like(r)
    rho = dist / kernel.sigma
    return (
        kernel.sigma ** (kernel.gamma - 1) * kernel.profile(rho, 1) * r / dist
    )


def aniso_gradient_hessian(kernel: AnisoKernel, x) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient and Hessian of aniso_eval in x."""
    x = np.asarray(x, dtype=float)
    d = kernel.d
    phi = kernel.profile
    sinv = kernel.sigma_inv
    pref = kernel.det_sigma ** (kernel.gamma / d)
    r = sinv @ (x - kernel.y)
    rho = np.linalg.norm(r)
    if rho < 1e-12:
        h0 = phi.limit_at(0.0, 2) * (sinv.T @ sinv)
        return np.zeros(d), pref * h0
    rhat = r / rho
    p1, p2 = phi(rho, 1), phi(rho, 2)
    grad = pref * p1 * (sinv.T @ rhat)
    outer = np.outer(rhat, rhat)
    core = p2 * outer + p1 / rho * (np.eye(d) - outer)
    hess = pref * (sinv.T @ core @ sinv)
    hess = 0.5 * (hess + hess.T)
    return grad, hess


# -- fractional symbol -------------------------------------------------------


def _symbol_integrand(profile: RadialProfile, beta: float, d: int):
    """ghat(tau) = (2 pi)^(-d/2) tau^(d/2+beta) phihat(tau)."""
    pref = (2 * math.pi) ** (-d / 2)

    def ghat(tau):
        tau = np.asarray(tau, dtype=float)
        return pref * tau ** (d / 2 + beta) * np.asarray(profile.fourier(tau, d))

    return ghat


def _tail_bound(profile: RadialProfile, beta: float, d: int, t: float) -> float:
    """Upper bound on int_t^inf tau^(d/2+beta) phihat (2 pi)^(-d/2) dtau, |J|<=1."""
    a = d / 2 + beta
    if profile.family == "gaussian":
        # phihat = (2 pi)^(d/2) exp(-tau^2/2)
        p = (a + 1) / 2
        return float(2 ** (p - 1 / 2) * special.gamma(p) * special.gammaincc(p, t**2 / 2))
    if profile.family == "matern":
        nu = profile.params[0]
        if not 2 * nu > beta + d:
            raise QuadratureError(
                f"Matern symbol integral needs 2 nu > beta + d (nu={nu}, beta={beta})"
            )
        c = (
            2**d
            * math.pi ** (d / 2)
            * math.gamma(nu + d / 2)
            * (2 * nu) ** nu
            / math.gamma(nu)
        ) * (2 * math.pi) ** (-d / 2)
        e = a - 2 * nu - d
        return float(c * t ** (e + 1) / (-(e + 1)))
    # numeric envelope for the remaining families (slow, rarely used)
    ghat = _symbol_integrand(profile, beta, d)
    ts = np.geomspace(t, 8 * t, 33)
    vals = np.abs(np.array([float(np.asarray(ghat(tv))) for tv in ts]))
    tail = float(np.trapezoid(vals, ts))
    if vals[-1] > 1e-3 * max(vals[0], 1e-300):
        raise QuadratureError("cannot certify tail decay of the symbol integrand")
    return tail + vals[-1] * ts[-1]


def frac_symbol_grid(
    profile: RadialProfile,
    rho: np.ndarray,
    beta: float,
    d: int,
    tol: float = 1e-9,
) -> np.ndarray:
    """K_d^{beta/2}[phi] on an array of radii, shared quadrature nodes."""
    if not 0 < beta <= 4:
        raise ValueError("beta must lie in (0, 4]")
    profile.check_dimension(d)
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("rho must be nonnegative")
    rho_eff = max(float(np.max(rho, initial=0.0)), 1.0)
    tau_max = max(10.0, 40.0 / rho_eff)
    while _tail_bound(profile, beta, d, tau_max) > tol:
        tau_max *= 2.0
        if tau_max > 1e5:
            raise QuadratureError(
                f"symbol tail not below {tol} by tau = {tau_max / 2:.1f}"
            )
    omega = float(np.max(rho, initial=0.0))
    nodes, weights = panel_nodes(tau_max, omega)
    ghat = _symbol_integrand(profile, beta, d)
    gw = np.asarray(ghat(nodes)) * weights
    nu_b = d / 2 - 1
    out = np.empty(rho.size)
    flat = rho.ravel()
    # limit value via the small-argument Bessel expansion
    k0 = float(np.dot(gw, nodes ** (d / 2 - 1))) * 2 ** (1 - d / 2) / math.gamma(d / 2)
    chunk = max(1, int(4e6 // max(nodes.size, 1)))
    for start in range(0, flat.size, chunk):
        rr = flat[start : start + chunk]
        bess = special.jv(nu_b, np.outer(rr, nodes))
        vals = bess @ gw
        with np.errstate(all="ignore"):
            vals = rr ** (1 - d / 2) * vals
        vals = np.where(rr < 1e-10, k0, vals)
        out[start : start + chunk] = vals
    return out.reshape(rho.shape)


def frac_symbol(profile: RadialProfile, rho, beta: float, d: int, tol: float = 1e-9):
    out = frac_symbol_grid(profile, np.atleast_1d(np.asarray(rho, float)), beta, d, tol)
    if np.ndim(rho) == 0:
        return float(out[0])
    return out


def frac_symbol_deriv(
    profile: RadialProfile,
    rho,
    beta: float,
    d: int,
    mode: str = "fd",
    tol: float = 1e-9,
):
    """d/drho of the fractional symbol.

    ``fd`` differences frac_symbol (the default, halving quadrature
    cost); ``direct`` evaluates the differentiated Hankel integral.
    """
    rho_arr = np.atleast_1d(np.asarray(rho, dtype=float))
    if mode == "fd":
        h = 1e-4
        # the symbol is even in rho, so reflect the lower stencil point
        lo = np.abs(rho_arr - h)
        sgn = np.where(rho_arr >= h, 1.0, -1.0)
        klo = frac_symbol_grid(profile, lo, beta, d, tol)
        khi = frac_symbol_grid(profile, rho_arr + h, beta, d, tol)
        out = (khi - sgn * klo) / (2 * h)
        out = np.where(rho_arr < 1e-10, 0.0, out)
    elif mode == "direct":
        profile.check_dimension(d)
        rho_eff = max(float(np.max(rho_arr, initial=0.0)), 1.0)
        tau_max = max(10.0, 40.0 / rho_eff)
        while _tail_bound(profile, beta + 1, d, tau_max) > tol:
            tau_max *= 2.0
            if tau_max > 1e5:
                raise QuadratureError("symbol-derivative tail not certified")
        omega = float(np.max(rho_arr, initial=0.0))
        nodes, weights = panel_nodes(tau_max, omega)
        g1 = np.asarray(_symbol_integrand(profile, beta, d)(nodes)) * weights
        g2 = np.asarray(_symbol_integrand(profile, beta + 1, d)(nodes)) * weights
        nu_b = d / 2 - 1
        out = np.empty(rho_arr.size)
        for i, r in enumerate(rho_arr.ravel()):
            if r < 1e-10:
                out[i] = 0.0
                continue
            bess = special.jv(nu_b, r * nodes)
            dbess = special.jvp(nu_b, r * nodes)
            term1 = (1 - d / 2) * r ** (-d / 2) * float(np.dot(g1, bess))
            term2 = r ** (1 - d / 2) * float(np.dot(g2, dbess))
            out[i] = term1 + term2
        out = out.reshape(rho_arr.shape)
    else:
        raise ValueError("mode must be 'fd' or 'direct'")
    if np.ndim(rho) == 0:
        return float(out.ravel()[0])
    return out


# -- operator tables ---------------------------------------------------------


@dataclass
class OperatorTable:
    """Tabulated fractional symbol K and K' with monotone-cubic lookup."""

    profile: RadialProfile
    beta: float
    d: int
    rho_grid: np.ndarray
    k_values: np.ndarray
    kprime_values: np.ndarray

    def __post_init__(self):
        self.rho_grid = np.asarray(self.rho_grid, dtype=float)
        self.k_values = np.asarray(self.k_values, dtype=float)
        self.kprime_values = np.asarray(self.kprime_values, dtype=float)
        if self.rho_grid[0] != 0.0:
            raise ValueError("rho grid must start at 0")
        if np.any(np.diff(self.rho_grid) <= 0):
            raise ValueError("rho grid must be strictly increasing")
        if not np.all(np.isfinite(self.k_values)):
            raise ValueError("non-finite table values")
        self._k_interp = PchipInterpolator(self.rho_grid, self.k_values)
        self._kp_interp = PchipInterpolator(self.rho_grid, self.kprime_values)

    @property
    def rho_max(self) -> float:
        return float(self.rho_grid[-1])

    def _check_range(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        if np.any(rho > self.rho_max * (1 + 1e-12)):
            raise ValueError(
                f"rho beyond table range {self.rho_max}; extrapolation refused"
            )
        return np.clip(rho, 0.0, self.rho_max)

    def k(self, rho):
        return self._k_interp(self._check_range(rho))

    def kprime(self, rho):
        return self._kp_interp(self._check_range(rho))

    def kprime_over_rho(self, rho):
        """K'(rho)/rho with the symmetric limit K''(0) at the origin."""
        rho = self._check_range(rho)
        eps = max(1e-8, self.rho_grid[1] * 1e-3)
        slope0 = self._kp_interp.derivative()(0.0)
        with np.errstate(all="ignore"):
            out = self._kp_interp(rho) / rho
        return np.where(rho < eps, slope0, out)

    # -- serialization ------------------------------------------------------

    def save(self, path) -> None:
        header = (
            f"{self.profile.family}"
            + (":" + ":".join(str(p) for p in self.profile.params) if self.profile.params else "")
            + f",{self.beta},{self.d},{self.rho_grid.size},{self.rho_max}"
        )
        data = np.column_stack([self.rho_grid, self.k_values, self.kprime_values])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            np.savetxt(fh, data, delimiter=",", fmt="%.17g")

    @classmethod
    def load(cls, path) -> "OperatorTable":
        with open(path) as fh:
            header = fh.readline().strip()
            body = fh.read()
        name, beta, d, n, _rho_max = header.rsplit(",", 4)
        if name == "matern:2.5":
            name = "matern52"
        data = np.loadtxt(io.StringIO(body), delimiter=",")
        if data.shape[0] != int(n):
            raise ValueError("corrupt table file: row count mismatch")
        return cls(
            profile=from_name(name),
            beta=float(beta),
            d=int(d),
            rho_grid=data[:, 0],
            k_values=data[:, 1],
            kprime_values=data[:, 2],
        )


def default_rho_grid(rho_max: float, n_points: int) -> np.ndarray:
    """Grid on [0, rho_max]: geometric near 0, uniform beyond rho_max/8."""
    n_geo = max(8, n_points // 4)
    n_lin = n_points - n_geo - 1
    switch = rho_max / 8
    # keep small-rho resolution even for very wide tables
    start = min(rho_max * 1e-4, 1e-3 * min(1.0, switch))
    geo = np.geomspace(start, switch, n_geo)
    lin = np.linspace(switch, rho_max, n_lin + 1)[1:]
    return np.concatenate([[0.0], geo, lin])


def build_operator_table(
    profile: RadialProfile,
    beta: float,
    d: int,
    rho_max: float,
    n_points: int = 1024,
    kprime_mode: str = "fd",
    tol: float = 1e-9,
) -> OperatorTable:
    if n_points < 64:
        raise ValueError("n_points must be at least 64")
    if n_points > 4096:
        raise ValueError("table capped at 4096 nodes")
    grid = default_rho_grid(rho_max, n_points)
    k = frac_symbol_grid(profile, grid, beta, d, tol)
    if kprime_mode == "fd":
        # central differences on a staggered fine evaluation
        h = 1e-4
        lo = np.abs(grid - h)
        sgn = np.where(grid >= h, 1.0, -1.0)
        kp = (frac_symbol_grid(profile, grid + h, beta, d, tol)
              - sgn * frac_symbol_grid(profile, lo, beta, d, tol)) / (2 * h)
        kp = np.where(grid < 1e-10, 0.0, kp)
    elif kprime_mode == "direct":
        kp = frac_symbol_deriv(profile, grid, beta, d, mode="direct", tol=tol)
    else:
        raise ValueError("kprime_mode must be 'fd' or 'direct'")
    return OperatorTable(profile, beta, d, grid, k, kp)


def frac_laplacian_kernel(kernel: Kernel, x, table: OperatorTable) -> float:
    """sigma^(gamma - beta) K(rho) with table interpolation."""
    if _profile_key(kernel.profile) != _profile_key(table.profile):
        raise ValueError("table built for a different profile")
    if kernel.d != table.d:
        raise ValueError("table dimension mismatch")
    x = np.asarray(x, dtype=float)
    rho = np.linalg.norm(x - kernel.y) / kernel.sigma
    return kernel.sigma ** (kernel.gamma - table.beta) * float(table.k(rho))
