"""Scaled RBF atoms: isotropic and anisotropic kernels with parameter grads."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .profiles import RadialProfile, gaussian


@dataclass(frozen=True)
class Kernel:
    """An isotropic atom sigma^gamma * phi(|x - y| / sigma)."""

    y: np.ndarray
    sigma: float
    gamma: float
    profile: RadialProfile
    sigma_min: float = 1e-8
    sigma_max: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        if not (self.sigma_min > 0):
            raise ValueError("sigma_min must be positive")
        if not (self.sigma_min <= self.sigma <= self.sigma_max):
            raise ValueError(
                f"sigma={self.sigma} outside [{self.sigma_min}, {self.sigma_max}]"
            )
        self.profile.check_dimension(self.d)

    @property
    def d(self) -> int:
        return self.y.shape[-1]


def kernel_eval(kernel: Kernel, x) -> float:
    x = np.asarray(x, dtype=float)
    rho = np.linalg.norm(x - kernel.y) / kernel.sigma
    return kernel.sigma**kernel.gamma * kernel.profile(rho)


def kernel_param_grads(kernel: Kernel, x) -> tuple[np.ndarray, float]:
    """(d/dy, d/dsigma) of kernel_eval at x."""
    x = np.asarray(x, dtype=float)
    r = x - kernel.y
    dist = np.linalg.norm(r)
    sig, gam = kernel.sigma, kernel.gamma
    rho = dist / sig
    phi = kernel.profile
    if dist == 0.0:
        dphi0 = phi.limit_at(0.0, 1)
        if dphi0 != 0.0:
            raise ValueError(
                f"profile {phi.family} is not differentiable at the center"
            )
        dy = np.zeros_like(r)
    else:
        # d/dy rho = -r / (sigma |r|)
        dy = -(sig ** (gam - 1)) * phi(rho, 1) * r / dist
    dsigma = sig ** (gam - 1) * (gam * phi(rho) - rho * phi(rho, 1))
    return dy, float(dsigma)


# -- anisotropic atoms ------------------------------------------------------


def givens_rotation(angles, d: int) -> np.ndarray:
    """Compose the d(d-1)/2 Givens rotations in fixed (i<j) index order."""
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if angles.size != d * (d - 1) // 2:
        raise ValueError("wrong number of rotation angles")
    q = np.eye(d)
    idx = 0
    for i in range(d):
        for j in range(i + 1, d):
            th = angles[idx]
            g = np.eye(d)
            c, s = math.cos(th), math.sin(th)
            g[i, i] = c
            g[j, j] = c
            g[i, j] = -s
            g[j, i] = s
            q = q @ g
            idx += 1
    return q


def givens_rotation_grads(angles, d: int) -> list[np.ndarray]:
    """dQ/dtheta_k for the composed rotation."""
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    mats = []
    dmats = []
    for (i, j), th in zip(pairs, angles):
        g = np.eye(d)
        dg = np.zeros((d, d))
        c, s = math.cos(th), math.sin(th)
        g[i, i] = c
        g[j, j] = c
        g[i, j] = -s
        g[j, i] = s
        dg[i, i] = -s
        dg[j, j] = -s
        dg[i, j] = -c
        dg[j, i] = c
        mats.append(g)
        dmats.append(dg)
    grads = []
    for k in range(len(pairs)):
        acc = np.eye(d)
        for m, g in enumerate(mats):
            acc = acc @ (dmats[m] if m == k else g)
        grads.append(acc)
    return grads


@dataclass(frozen=True)
class AnisoKernel:
    """An anisotropic atom det(Sigma)^(gamma/d) * phi(|Sigma^{-1}(x - y)|).

    Sigma = Q R with Q a composed Givens rotation and R = diag(radii).
    """

    y: np.ndarray
    rotation_params: np.ndarray
    radii: np.ndarray
    gamma: float
    profile: RadialProfile
    sigma_max: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        object.__setattr__(
            self, "rotation_params",
            np.atleast_1d(np.asarray(self.rotation_params, dtype=float)),
        )
        object.__setattr__(
            self, "radii", np.atleast_1d(np.asarray(self.radii, dtype=float))
        )
        d = self.d
        if self.radii.size != d:
            raise ValueError("need one radius per dimension")
        if np.any(self.radii <= 0) or np.any(self.radii > self.sigma_max):
            raise ValueError("radii must lie in (0, sigma_max]")
        if self.rotation_params.size != d * (d - 1) // 2:
            raise ValueError("need d(d-1)/2 rotation angles")
        self.profile.check_dimension(d)

    @property
    def d(self) -> int:
        return self.y.shape[-1]

    @property
    def q(self) -> np.ndarray:
        return givens_rotation(self.rotation_params, self.d)

    @property
    def sigma_matrix(self) -> np.ndarray:
        return self.q @ np.diag(self.radii)

    @property
    def sigma_inv(self) -> np.ndarray:
        return np.diag(1.0 / self.radii) @ self.q.T

    @property
    def det_sigma(self) -> float:
        return float(np.prod(self.radii))


def aniso_eval(kernel: AnisoKernel, x) -> float:
    x = np.asarray(x, dtype=float)
    r = kernel.sigma_inv @ (x - kernel.y)
    rho = np.linalg.norm(r)
    return kernel.det_sigma ** (kernel.gamma / kernel.d) * kernel.profile(rho)


def aniso_param_grads(kernel: AnisoKernel, x):
    """Gradients of aniso_eval w.r.t. (y, rotation_params, radii)."""
    x = np.asarray(x, dtype=float)
    d = kernel.d
    phi = kernel.profile
    pref = kernel.det_sigma ** (kernel.gamma / d)
    sinv = kernel.sigma_inv
    diff = x - kernel.y
    r = sinv @ diff
    rho = np.linalg.norm(r)
    val = phi(rho)
    if rho == 0.0:
        rhat = np.zeros(d)
        dphi = 0.0
    else:
        rhat = r / rho
        dphi = phi(rho, 1)
    # d rho = rhat . d r,  d r = d(sinv) diff - sinv d y
    dy = -pref * dphi * (sinv.T @ rhat)
    qgrads = givens_rotation_grads(kernel.rotation_params, d)
    rinv = np.diag(1.0 / kernel.radii)
    dtheta = np.empty(len(qgrads))
    for k, dq in enumerate(qgrads):
        dsinv = rinv @ dq.T
        dtheta[k] = pref * dphi * float(rhat @ (dsinv @ diff))
    dradii = np.empty(d)
    for i in range(d):
        e = np.zeros((d, d))
        e[i, i] = -1.0 / kernel.radii[i] ** 2
        dsinv = e @ kernel.q.T
        # det term: d/dr_i det^(g/d) = (g/d) det^(g/d) / r_i
        dradii[i] = (kernel.gamma / d) * pref * val / kernel.radii[i] + pref * dphi * float(
            rhat @ (dsinv @ diff)
        )
    return dy, dtheta, dradii
