"""Radial profiles phi(rho) and their one-dimensional calculus.

Four families are supported: Gaussian, Matern (half-integer nu = 5/2),
inverse multiquadric and Wendland.  Each profile carries a sympy
expression in rho from which derivatives of any order are generated on
demand, so the rest of the code base never hand-codes a derivative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy as sp
from scipy import special

RHO = sp.Symbol("rho", nonnegative=True)


class QuadratureError(RuntimeError):
    """Raised when a numeric Hankel/Fourier integral cannot be certified."""


@dataclass(frozen=True)
class RadialProfile:
    """A 1-D radial function phi with symbolic derivatives.

    ``smoothness`` is the number of continuous derivatives of the map
    x -> phi(|x|) that downstream operator bindings may rely on
    (``inf`` for the analytic families).
    """

    family: str
    params: tuple = ()
    expr: sp.Expr = sp.S.One
    smoothness: float = math.inf
    support_radius: float = math.inf
    _cache: dict = field(default_factory=dict, hash=False, compare=False, repr=False)

    # -- evaluation ---------------------------------------------------------

    def _deriv_fn(self, order: int) -> Callable:
        key = ("d", order)
        if key not in self._cache:
            e = sp.diff(self.expr, RHO, order) if order else self.expr
            self._cache[key] = sp.lambdify(RHO, e, modules="numpy")
        return self._cache[key]

    def __call__(self, rho, order: int = 0):
        rho = np.asarray(rho, dtype=float)
        if np.any(rho < 0):
            raise ValueError("rho must be nonnegative")
        fn = self._deriv_fn(order)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.asarray(fn(rho), dtype=float)
        out = np.broadcast_to(out, rho.shape).copy()
        # piecewise kinks / rho=0 removable points: patch by one-sided limit
        bad = ~np.isfinite(out)
        if np.any(bad):
            lim = self.limit_at(0.0, order)
            out[bad & (rho == 0)] = lim
            bad = ~np.isfinite(out)
            if np.any(bad):
                raise FloatingPointError(
                    f"profile {self.family} order {order} not finite at some rho"
                )
        if out.ndim == 0:
            return float(out)
        return out

    def limit_at(self, rho0: float, order: int = 0) -> float:
        key = ("lim", rho0, order)
        if key not in self._cache:
            e = sp.diff(self.expr, RHO, order) if order else self.expr
            self._cache[key] = float(sp.limit(e, RHO, rho0, "+"))
        return self._cache[key]

    # -- dimension compatibility -------------------------------------------

    def check_dimension(self, d: int) -> None:
        """Validate family parameters against the spatial dimension."""
        if self.family == "matern":
            nu = self.params[0]
            if not nu > d / 2:
                raise ValueError(f"Matern requires nu > d/2, got nu={nu}, d={d}")
        elif self.family == "imq":
            beta = self.params[0]
            if not beta > d / 2:
                raise ValueError(
                    f"inverse multiquadric requires beta > d/2, got beta={beta}, d={d}"
                )
        elif self.family == "wendland":
            _ell, d_w = self.params
            if d > d_w:
                raise ValueError(
                    f"Wendland profile built for dimension {d_w}, used in d={d}"
                )

    # -- Fourier transform --------------------------------------------------

    def fourier(self, tau, d: int):
        """Radial Fourier transform of x -> phi(|x|) in R^d.

        Convention F[u](xi) = int u(x) exp(-i x.xi) dx, evaluated at
        tau = |xi|.  Closed forms for Gaussian and Matern; numeric Hankel
        integral otherwise.
        """
        self.check_dimension(d)
        tau = np.asarray(tau, dtype=float)
        if self.family == "gaussian":
            out = (2 * math.pi) ** (d / 2) * np.exp(-(tau**2) / 2)
        elif self.family == "matern":
            nu = self.params[0]
            c = (
                2**d
                * math.pi ** (d / 2)
                * math.gamma(nu + d / 2)
                * (2 * nu) ** nu
                / math.gamma(nu)
            )
            out = c * (2 * nu + tau**2) ** (-(nu + d / 2))
        else:
            out = self._fourier_numeric(tau, d)
        if out.ndim == 0:
            return float(out)
        return out

    def _radial_mass(self, d: int) -> float:
        """int_{R^d} phi(|x|) dx, by adaptive radial quadrature."""
        from scipy.integrate import quad

        omega = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
        upper = self.support_radius if math.isfinite(self.support_radius) else np.inf
        val, err = quad(lambda r: r ** (d - 1) * self(r), 0, upper, limit=200)
        if not math.isfinite(val) or err > 1e-8 * max(1.0, abs(val)):
            raise QuadratureError(f"radial mass integral failed for {self.family}")
        return omega * val

    def _fourier_numeric(self, tau: np.ndarray, d: int) -> np.ndarray:
        from .quadrature import bessel_panel_integral

        tau_flat = np.atleast_1d(tau).ravel()
        out = np.empty_like(tau_flat)
        nu_bessel = d / 2 - 1
        for i, t in enumerate(tau_flat):
            if t == 0.0:
                out[i] = self._radial_mass(d)
                continue
            if math.isfinite(self.support_radius):
                upper = self.support_radius
                tail = 0.0
            else:
                # algebraic decay families: extend until the certified
                # tail bound (|J| <= 1) is negligible
                upper, tail = self._fourier_tail_cutoff(t, d)
            val = bessel_panel_integral(
                lambda r: r ** (d / 2) * self(r), nu_bessel, t, upper
            )
            if tail > 1e-8 * max(1.0, abs(val)):
                raise QuadratureError(
                    f"Hankel tail {tail:.2e} above tolerance at tau={t}"
                )
            out[i] = (2 * math.pi) ** (d / 2) * t ** (1 - d / 2) * val
        return out.reshape(np.shape(tau))

    def _fourier_tail_cutoff(self, tau: float, d: int) -> tuple[float, float]:
        if self.family != "imq":
            raise QuadratureError(
                f"no tail model for family {self.family}; cannot certify"
            )
        beta = self.params[0]
        # integrand ~ r^{d/2 - 2 beta} for large r; need d/2 - 2 beta < -1
        expo = d / 2 - 2 * beta
        if expo >= -1:
            raise QuadratureError("IMQ Hankel integral not absolutely integrable")
        upper = 50.0
        while True:
            tail = upper ** (expo + 1) / (-(expo + 1))
            if tail < 1e-10 or upper > 1e7:
                return upper, tail
            upper *= 4.0


# -- constructors -----------------------------------------------------------


def gaussian() -> RadialProfile:
    return RadialProfile("gaussian", (), sp.exp(-(RHO**2) / 2))


def matern(nu: float = 2.5) -> RadialProfile:
    """Matern profile, half-integer nu = 5/2 closed form."""
    if nu != 2.5:
        raise NotImplementedError("only the nu = 5/2 Matern profile is built")
    a = sp.sqrt(5) * RHO
    expr = (1 + a + a**2 / 3) * sp.exp(-a)
    # x -> phi(|x|) is C^4 at the origin (odd derivatives vanish up to 3)
    return RadialProfile("matern", (nu,), expr, smoothness=4)


def imq(beta: float) -> RadialProfile:
    if beta <= 0:
        raise ValueError("IMQ exponent must be positive")
    return RadialProfile("imq", (float(beta),), (1 + RHO**2) ** (-sp.Float(beta)))


def wendland(ell: int, d: int) -> RadialProfile:
    if ell < 0 or d < 1:
        raise ValueError("Wendland needs ell >= 0 and d >= 1")
    m = d // 2 + ell + 1
    poly = sum(
        sp.binomial(ell, k) * sp.binomial(m + ell + k, ell) * RHO**k
        for k in range(ell + 1)
    )
    expr = sp.Piecewise(((1 - RHO) ** m * poly, RHO < 1), (0, True))
    return RadialProfile(
        "wendland", (int(ell), int(d)), expr, smoothness=m - 1, support_radius=1.0
    )


def from_name(name: str) -> RadialProfile:
    """Profile lookup by config string: gaussian, matern52, imq:<b>, wendland:<l>:<d>."""
    parts = name.strip().lower().split(":")
    head = parts[0]
    if head == "gaussian":
        return gaussian()
    if head == "matern52":
        return matern(2.5)
    if head == "imq":
        if len(parts) != 2:
            raise ValueError("imq profile needs an exponent, e.g. 'imq:2.0'")
        return imq(float(parts[1]))
    if head == "wendland":
        if len(parts) == 2:
            return wendland(int(parts[1]), d=3)
        if len(parts) == 3:
            return wendland(int(parts[1]), int(parts[2]))
        raise ValueError("wendland profile needs 'wendland:<l>' or 'wendland:<l>:<d>'")
    raise ValueError(f"unknown profile name {name!r}")


# -- spec-facing free functions --------------------------------------------


def profile_eval(profile: RadialProfile, rho):
    return profile(rho)


def profile_deriv(profile: RadialProfile, rho, order: int):
    if order not in (1, 2):
        raise ValueError("derivative order must be 1 or 2")
    return profile(rho, order)


def profile_fourier(profile: RadialProfile, tau, d: int):
    return profile.fourier(tau, d)
