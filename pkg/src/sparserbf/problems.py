"""PDE benchmark definitions: residual composition, collocation, metrics.

A problem couples a domain, a list of linear operators applied to the
network ansatz, and nonlinear composition functions E (interior) and B
(boundary) with their partial derivatives.  The weighted residual vector
stacks sqrt(w_k) E(x_k, op values) over interior points followed by
sqrt(lam w_k) B(x_k, op values) over boundary points, so that half its
squared norm is the empirical loss.

Homogeneous Dirichlet conditions can instead be enforced exactly through
a mask factor vanishing on the boundary; the ansatz then is
u(x) = m(x) * sum_n c_n atom_n(x) and operator values are transformed by
the product rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import sympy as sp

from .kernels import givens_rotation
from .operators import (
    RHO,
    OperatorTable,
    RadialFn,
    derived_fn,
    radial_expr,
    _check_smoothness,
)
from .profiles import RadialProfile, gaussian


# -- linear operators --------------------------------------------------------


@dataclass(frozen=True)
class LinearOpSpec:
    """One linear operator applied to the ansatz at collocation points.

    kinds: identity, gradient, laplacian (the positive operator -Lap),
    polyharmonic ((-Lap)^m), fraclap ((-Lap)^(beta/2), table-backed),
    aniso_quadratic_gradient (gradient features; the SPD metric ``matrix``
    is consumed by the composition function).
    """

    kind: str
    m: int = 1
    beta: float = 0.0
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in (
            "identity", "gradient", "laplacian", "polyharmonic",
            "fraclap", "aniso_quadratic_gradient",
        ):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kind == "polyharmonic" and self.m < 1:
            raise ValueError("polyharmonic order must be >= 1")
        if self.kind == "fraclap":
            b = self.beta
            if not (0 < b < 2 or 2 < b < 4):
                raise ValueError("fractional order must lie in (0,2) or (2,4)")
        if self.kind == "aniso_quadratic_gradient":
            mat = np.asarray(self.matrix, dtype=float)
            if mat.ndim != 2 or not np.allclose(mat, mat.T):
                raise ValueError("metric must be symmetric")
            if np.any(np.linalg.eigvalsh(mat) <= 0):
                raise ValueError("metric must be positive definite")
            object.__setattr__(self, "matrix", mat)

    @property
    def order(self) -> float:
        return {
            "identity": 0.0,
            "gradient": 1.0,
            "aniso_quadratic_gradient": 1.0,
            "laplacian": 2.0,
            "polyharmonic": 2.0 * self.m,
            "fraclap": self.beta,
        }[self.kind]

    @property
    def vector_valued(self) -> bool:
        return self.kind in ("gradient", "aniso_quadratic_gradient")

    def table_key(self, profile: RadialProfile, d: int) -> str:
        params = ":".join(str(p) for p in profile.params)
        fam = profile.family + (":" + params if params else "")
        return f"{fam}|beta={self.beta}|d={d}"


# -- domains and problems ----------------------------------------------------


@dataclass(frozen=True)
class Domain:
    kind: str  # box | disk
    d: int
    half_width: float = 1.0  # box half width, or disk radius

    def diameter(self) -> float:
        if self.kind == "box":
            return 2 * self.half_width * math.sqrt(self.d)
        return 2 * self.half_width

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "box":
            return np.all(np.abs(x) < self.half_width, axis=1)
        return np.sum(x**2, axis=1) < self.half_width**2


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    domain: Domain
    interior_ops: tuple
    boundary_ops: tuple
    e_fn: Callable          # (X, [op values]) -> (K,)
    de_fn: Callable         # (X, [op values]) -> [partials, matching shapes]
    b_fn: Optional[Callable] = None   # (X, [op values]) -> (K, nb)
    db_fn: Optional[Callable] = None  # (X, [op values]) -> [(K, nb) or (K, nb, d)]
    n_boundary_residuals: int = 1
    exact: Optional[Callable] = None  # (K, d) -> (K,)
    mask: Optional[Callable] = None   # (K, d) -> (m, grad m, lap m)
    lam: float = 100.0
    params: dict = field(default_factory=dict)

    @property
    def operator_order(self) -> float:
        ops = list(self.interior_ops) + list(self.boundary_ops)
        return max(op.order for op in ops)

    def default_gamma(self) -> float:
        return self.operator_order + 1.0


MASKABLE_KINDS = ("identity", "gradient", "laplacian", "aniso_quadratic_gradient")


def box_mask(x: np.ndarray):
    """m(x) = prod_i (1 - x_i^2) with gradient and Laplacian."""
    x = np.atleast_2d(x)
    fac = 1.0 - x**2
    m = np.prod(fac, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        part = np.where(fac != 0.0, m[:, None] / fac, 0.0)
    # recompute exactly where a factor vanishes
    zero = fac == 0.0
    if np.any(zero):
        for k, i in zip(*np.nonzero(zero)):
            others = np.delete(fac[k], i)
            part[k, i] = np.prod(others)
    grad = -2.0 * x * part
    lap = -2.0 * np.sum(part, axis=1)
    return m, grad, lap


def disk_mask(x: np.ndarray):
    """m(x) = 1 - |x|^2."""
    x = np.atleast_2d(x)
    m = 1.0 - np.sum(x**2, axis=1)
    return m, -2.0 * x, np.full(x.shape[0], -2.0 * x.shape[1])


# -- network -----------------------------------------------------------------


@dataclass
class Network:
    """Padded-capacity RBF network with a boolean active mask.

    Isotropic atoms carry (center, sigma); anisotropic atoms carry
    (center, rotation angles, per-axis radii).  Inactive slots always
    hold c = 0.
    """

    profile: RadialProfile
    gamma: float
    d: int
    capacity: int = 128
    aniso: bool = False
    sigma_min: float = 1e-8
    sigma_max: float = math.inf
    active: np.ndarray = None
    coeffs: np.ndarray = None
    centers: np.ndarray = None
    sigmas: np.ndarray = None
    angles: np.ndarray = None
    radii: np.ndarray = None

    def __post_init__(self):
        p, d = self.capacity, self.d
        if self.active is None:
            self.active = np.zeros(p, dtype=bool)
        if self.coeffs is None:
            self.coeffs = np.zeros(p)
        if self.centers is None:
            self.centers = np.zeros((p, d))
        if self.aniso:
            na = d * (d - 1) // 2
            if self.angles is None:
                self.angles = np.zeros((p, na))
            if self.radii is None:
                self.radii = np.ones((p, d))
        else:
            if self.sigmas is None:
                self.sigmas = np.ones(p)
        self.profile.check_dimension(d)

    @property
    def inner_dim(self) -> int:
        d = self.d
        return d + d * (d - 1) // 2 + d if self.aniso else d + 1

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.active))

    @property
    def active_indices(self) -> np.ndarray:
        return np.nonzero(self.active)[0]

    def copy(self) -> "Network":
        out = replace(self)
        for name in ("active", "coeffs", "centers", "sigmas", "angles", "radii"):
            arr = getattr(self, name)
            if arr is not None:
                setattr(out, name, arr.copy())
        return out

    def grow(self) -> None:
        """Double the padded capacity, keeping existing slots."""
        old = self.capacity
        self.capacity = 2 * old
        pad = lambda a, shape: np.concatenate([a, np.zeros(shape, dtype=a.dtype)])
        self.active = pad(self.active, old)
        self.coeffs = pad(self.coeffs, old)
        self.centers = pad(self.centers, (old, self.d))
        if self.aniso:
            self.angles = pad(self.angles, (old, self.angles.shape[1]))
            self.radii = np.concatenate([self.radii, np.ones((old, self.d))])
        else:
            self.sigmas = np.concatenate([self.sigmas, np.ones(old)])

    def insert(self, center, sigma=None, coeff=0.0, angles=None, radii=None) -> int:
        free = np.nonzero(~self.active)[0]
        if free.size == 0:
            self.grow()
            free = np.nonzero(~self.active)[0]
        n = int(free[0])
        self.active[n] = True
        self.coeffs[n] = coeff
        self.centers[n] = np.asarray(center, dtype=float)
        if self.aniso:
            self.angles[n] = np.asarray(angles, dtype=float)
            self.radii[n] = np.asarray(radii, dtype=float)
        else:
            if not (self.sigma_min <= sigma <= self.sigma_max):
                raise ValueError("sigma outside bounds")
            self.sigmas[n] = float(sigma)
        return n

    def deactivate(self, idx) -> None:
        self.active[idx] = False
        self.coeffs[idx] = 0.0

    # packed inner-parameter vectors for the active atoms, atom-major
    def pack_inner(self) -> np.ndarray:
        idx = self.active_indices
        if self.aniso:
            parts = [self.centers[idx], self.angles[idx], self.radii[idx]]
        else:
            parts = [self.centers[idx], self.sigmas[idx, None]]
        return np.concatenate(parts, axis=1).ravel()

    def unpack_inner(self, vec: np.ndarray) -> None:
        idx = self.active_indices
        mat = np.asarray(vec, dtype=float).reshape(idx.size, self.inner_dim)
        d = self.d
        self.centers[idx] = mat[:, :d]
        if self.aniso:
            na = d * (d - 1) // 2
            self.angles[idx] = mat[:, d:d + na]
            self.radii[idx] = mat[:, d + na:]
        else:
            self.sigmas[idx] = mat[:, d]


# -- per-atom feature assembly ----------------------------------------------


def _scalar_fns(profile: RadialProfile, op: LinearOpSpec, d: int, tables):
    """(q, q', q'/rho, power shift) for a scalar radial operator."""
    if op.kind == "fraclap":
        key = op.table_key(profile, d)
        if tables is None or key not in tables:
            raise KeyError(f"missing operator table {key!r}")
        t: OperatorTable = tables[key]
        if t.profile.family != profile.family or t.d != d or t.beta != op.beta:
            raise ValueError("operator table does not match the problem")
        return t.k, t.kprime, t.kprime_over_rho, -op.beta
    if op.kind == "identity":
        expr, shift = profile.expr, 0.0
    elif op.kind == "laplacian":
        _check_smoothness(profile, 2)
        expr, shift = radial_expr(profile, "kdm", d=d, m=1), -2.0
    elif op.kind == "polyharmonic":
        _check_smoothness(profile, 2 * op.m)
        expr, shift = radial_expr(profile, "kdm", d=d, m=op.m), -2.0 * op.m
    else:
        raise ValueError(f"{op.kind} is not a scalar radial operator")
    label = f"{op.kind}:{d}:{op.m}"
    q = derived_fn(profile, expr, label)
    qp = derived_fn(profile, sp.diff(expr, RHO), label + ":p")
    qpr = derived_fn(profile, sp.diff(expr, RHO) / RHO, label + ":pr")
    return q, qp, qpr, shift


def _grad_fns(profile: RadialProfile):
    phi = profile.expr
    psi1 = derived_fn(profile, sp.diff(phi, RHO) / RHO, "psi1")
    psi2 = derived_fn(
        profile, (sp.diff(phi, RHO, 2) - sp.diff(phi, RHO) / RHO) / RHO**2, "psi2"
    )
    d2 = derived_fn(profile, sp.diff(phi, RHO, 2), "d2")
    return psi1, psi2, d2


def _iso_op_values(net, n, X, op, tables, want_grads):
    """Values (and inner grads) of one operator for one isotropic atom.

    Returns (vals, grads): vals (K,) or (K, d); grads (K, p) or (K, d, p)
    with p = d + 1 columns ordered (center, sigma).
    """
    d = net.d
    prof = net.profile
    sig = net.sigmas[n]
    gam = net.gamma
    r = X - net.centers[n]
    dist = np.linalg.norm(r, axis=1)
    rho = dist / sig
    if op.vector_valued:
        psi1, psi2, d2f = _grad_fns(prof)
        p1 = psi1(rho)
        vals = sig ** (gam - 2) * p1[:, None] * r
        if not want_grads:
            return vals, None
        p2 = psi2(rho)
        dd = d2f(rho)
        grads = np.empty((X.shape[0], d, d + 1))
        # d/dy_i of component j
        outer = -sig ** (gam - 4) * p2[:, None, None] * r[:, None, :] * r[:, :, None]
        grads[:, :, :d] = outer
        diag = sig ** (gam - 2) * p1
        for j in range(d):
            grads[:, j, j] -= diag
        grads[:, :, d] = (sig ** (gam - 3) * ((gam - 1) * p1 - dd))[:, None] * r
        return vals, grads
    q, qp, qpr, shift = _scalar_fns(prof, op, d, tables)
    p = gam + shift
    qv = np.asarray(q(rho), dtype=float)
    vals = sig**p * qv
    if not want_grads:
        return vals, None
    qpv = np.asarray(qp(rho), dtype=float)
    qprv = np.asarray(qpr(rho), dtype=float)
    grads = np.empty((X.shape[0], d + 1))
    grads[:, :d] = -sig ** (p - 2) * qprv[:, None] * r
    grads[:, d] = sig ** (p - 1) * (p * qv - rho * qpv)
    return vals, grads


def _aniso_jet(prof, gamma, center, angles, radii, X, need):
    """(value, gradient, -laplacian) features of one anisotropic atom."""
    d = center.size
    q = givens_rotation(angles, d)
    sinv = np.diag(1.0 / radii) @ q.T
    pref = float(np.prod(radii)) ** (gamma / d)
    z = (X - center) @ sinv.T
    rho = np.linalg.norm(z, axis=1)
    out = {}
    if "value" in need:
        out["value"] = pref * prof(rho)
    if "gradient" in need or "neglap" in need:
        psi1, psi2, _ = _grad_fns(prof)
        p1 = psi1(rho)
        if "gradient" in need:
            out["gradient"] = pref * (p1[:, None] * z) @ sinv
        if "neglap" in need:
            p2 = psi2(rho)
            zs = z @ sinv  # rows sigma^{-T} z
            fro = float(np.sum(sinv**2))
            out["neglap"] = -pref * (p2 * np.sum(zs**2, axis=1) + p1 * fro)
    return out


def _aniso_op_values(net, n, X, op, tables, want_grads, fd_step=1e-6):
    if op.kind == "fraclap" or op.kind == "polyharmonic":
        raise NotImplementedError(f"{op.kind} not supported for anisotropic atoms")
    need = {"identity": "value", "laplacian": "neglap"}.get(op.kind, "gradient")

    def feat(center, angles, radii):
        jet = _aniso_jet(net.profile, net.gamma, center, angles, radii, X, {need})
        return jet[need]

    c0, a0, r0 = net.centers[n], net.angles[n], net.radii[n]
    vals = feat(c0, a0, r0)
    if not want_grads:
        return vals, None
    # smooth features: central differences are accurate to ~1e-9 here
    p = net.inner_dim
    grads = np.empty(vals.shape + (p,))
    theta = np.concatenate([c0, a0, r0])
    d = net.d
    na = a0.size
    for i in range(p):
        tp, tm = theta.copy(), theta.copy()
        h = fd_step * max(1.0, abs(theta[i]))
        tp[i] += h
        tm[i] -= h
        fp = feat(tp[:d], tp[d:d + na], tp[d + na:])
        fm = feat(tm[:d], tm[d:d + na], tm[d + na:])
        grads[..., i] = (fp - fm) / (2 * h)
    return vals, grads


def _atom_op_values(net, n, X, op, tables, want_grads):
    if net.aniso:
        return _aniso_op_values(net, n, X, op, tables, want_grads)
    return _iso_op_values(net, n, X, op, tables, want_grads)


def _masked_transform(op, raw, mask_jet):
    """Map raw (value, gradient, neglap) features through u = m * v."""
    m, gm, lm = mask_jet
    v, g = raw["value"], raw.get("gradient")
    if op.kind == "identity":
        return m * v
    if op.vector_valued:
        return m[:, None] * g + v[:, None] * gm
    # -Lap(m v) = m (-Lap v) - 2 grad m . grad v - v Lap m
    return m * raw["neglap"] - 2 * np.sum(gm * g, axis=1) - v * lm


def _atom_features(problem, net, n, X, ops, tables, mask_jet, want_grads):
    """Per-op feature arrays (and inner grads) for one atom at points X."""
    if mask_jet is None:
        return [_atom_op_values(net, n, X, op, tables, want_grads) for op in ops]
    for op in ops:
        if op.kind not in MASKABLE_KINDS:
            raise ValueError(f"operator {op.kind} cannot be masked")
    need = {"value"}
    if any(op.vector_valued for op in ops):
        need.add("gradient")
    if any(op.kind == "laplacian" for op in ops):
        need.update(("gradient", "neglap"))
    raw, rawg = {}, {}
    kind_of = {"value": LinearOpSpec("identity"),
               "gradient": LinearOpSpec("gradient"),
               "neglap": LinearOpSpec("laplacian")}
    for name in need:
        v, g = _atom_op_values(net, n, X, kind_of[name], tables, want_grads)
        raw[name], rawg[name] = v, g
    out = []
    for op in ops:
        vals = _masked_transform(op, raw, mask_jet)
        if not want_grads:
            out.append((vals, None))
            continue
        m, gm, lm = mask_jet
        if op.kind == "identity":
            grads = m[:, None] * rawg["value"]
        elif op.vector_valued:
            grads = m[:, None, None] * rawg["gradient"] \
                + gm[:, :, None] * rawg["value"][:, None, :]
        else:
            grads = m[:, None] * rawg["neglap"] \
                - 2 * np.einsum("ki,kip->kp", gm, rawg["gradient"]) \
                - lm[:, None] * rawg["value"]
        out.append((vals, grads))
    return out


# -- collocation -------------------------------------------------------------


@dataclass(frozen=True)
class CollocationSet:
    interior: np.ndarray
    interior_weights: np.ndarray
    boundary: np.ndarray
    boundary_weights: np.ndarray

    def __post_init__(self):
        if np.any(self.interior_weights <= 0) or np.any(self.boundary_weights < 0):
            raise ValueError("collocation weights must be positive")


def sample_collocation(problem: ProblemSpec, resolution: int, rng=None) -> CollocationSet:
    """Deterministic collocation grids.

    Box: ``resolution`` lattice points per axis; strictly interior points
    are interior collocation, lattice points touching a face are boundary
    collocation.  Disk: the radial lattice (2l/K)(cos(2k pi/K),
    sin(2k pi/K)), l,k = 0..K with K = resolution, classified interior
    iff 2l/K < 1; the rest enforce the exterior condition.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    dom = problem.domain
    if dom.kind == "box":
        hw = dom.half_width
        axis = np.linspace(-hw, hw, resolution)
        grids = np.meshgrid(*([axis] * dom.d), indexing="ij")
        pts = np.column_stack([g.ravel() for g in grids])
        on_face = np.any(np.abs(pts) >= hw - 1e-12, axis=1)
        interior = pts[~on_face]
        boundary = pts[on_face]
        vol = (2 * hw) ** dom.d
        area = 2 * dom.d * (2 * hw) ** (dom.d - 1)
        wi = np.full(interior.shape[0], vol / max(1, interior.shape[0]))
        if problem.mask is not None or not problem.boundary_ops:
            boundary = np.zeros((0, dom.d))
            wb = np.zeros(0)
        else:
            wb = np.full(boundary.shape[0], area / max(1, boundary.shape[0]))
        # exclude collocation points too close to a solution singularity
        excl = problem.params.get("exclude_center")
        if excl is not None:
            c, rad = excl
            keep = np.linalg.norm(interior - np.asarray(c), axis=1) > rad
            interior, wi = interior[keep], wi[keep]
        return CollocationSet(interior, wi, boundary, wb)
    # disk radial lattice
    K = resolution
    l = np.arange(K + 1)
    k = np.arange(K + 1)
    rr = 2.0 * l / K
    th = 2.0 * math.pi * k / K
    R, T = np.meshgrid(rr, th, indexing="ij")
    pts = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()])
    radius = np.repeat(rr, K + 1)
    inside = radius < 1.0
    interior = pts[inside] * dom.half_width
    exterior = pts[~inside] * dom.half_width
    area = math.pi * dom.half_width**2
    ring = math.pi * dom.half_width**2 * (4.0 - 1.0)
    wi = np.full(interior.shape[0], area / interior.shape[0])
    wb = np.full(exterior.shape[0], ring / exterior.shape[0])
    return CollocationSet(interior, wi, exterior, wb)


# -- evaluation, residual, Jacobian -----------------------------------------


def network_eval(net: Network, X, mask: Optional[Callable] = None) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.zeros(X.shape[0])
    idop = LinearOpSpec("identity")
    for n in net.active_indices:
        vals, _ = _atom_op_values(net, n, X, idop, None, False)
        out += net.coeffs[n] * vals
    if mask is not None:
        out *= mask(X)[0]
    return out


def _op_sums(problem, net, X, ops, tables, mask_jet):
    """Network-level operator values: sum_n c_n L[atom_n](x)."""
    K = X.shape[0]
    sums = [
        np.zeros((K, net.d)) if op.vector_valued else np.zeros(K) for op in ops
    ]
    for n in net.active_indices:
        feats = _atom_features(problem, net, n, X, ops, tables, mask_jet, False)
        for s, (vals, _) in zip(sums, feats):
            s += net.coeffs[n] * vals
    return sums


def _block_residual(problem, net, pts, wts, ops, comp, dcomp, tables, scale,
                    mask_jet, want_jac, n_out):
    """Residual rows (and Jacobian blocks) for one collocation block."""
    K = pts.shape[0]
    idx = net.active_indices
    N = idx.size
    sqw = np.sqrt(scale * wts)
    sums = _op_sums(problem, net, pts, ops, tables, mask_jet)
    e = np.atleast_1d(np.asarray(comp(pts, sums), dtype=float))
    if n_out == 1:
        e = e.reshape(K)
        r = sqw * e
    else:
        e = e.reshape(K, n_out)
        r = (sqw[:, None] * e).reshape(-1)
    if not want_jac:
        return r, None, None
    partials = dcomp(pts, sums)
    jc = np.zeros((r.size, N))
    ji = np.zeros((r.size, N * net.inner_dim))
    p = net.inner_dim
    for a, n in enumerate(idx):
        feats = _atom_features(problem, net, n, pts, ops, tables, mask_jet, True)
        col_c = np.zeros((K, n_out))
        col_i = np.zeros((K, n_out, p))
        for op, dE, (vals, grads) in zip(ops, partials, feats):
            dE = np.asarray(dE, dtype=float)
            if op.vector_valued:
                dE = dE.reshape(K, n_out, net.d)
                col_c += np.einsum("koj,kj->ko", dE, vals)
                col_i += net.coeffs[n] * np.einsum("koj,kjp->kop", dE, grads)
            else:
                dE = dE.reshape(K, n_out)
                col_c += dE * vals[:, None]
                col_i += net.coeffs[n] * dE[:, :, None] * grads[:, None, :]
        jc[:, a] = (sqw[:, None] * col_c).reshape(-1)
        ji[:, a * p:(a + 1) * p] = (sqw[:, None, None] * col_i).reshape(-1, p)
    return r, jc, ji


def _mask_jet(problem, pts):
    if problem.mask is None or pts.shape[0] == 0:
        return None
    return problem.mask(pts)


def _assemble(problem, net, colloc, tables, want_jac):
    ri, jci, jii = _block_residual(
        problem, net, colloc.interior, colloc.interior_weights,
        problem.interior_ops, problem.e_fn, problem.de_fn, tables, 1.0,
        _mask_jet(problem, colloc.interior), want_jac, 1,
    )
    parts = [(ri, jci, jii)]
    if colloc.boundary.shape[0] > 0 and problem.boundary_ops:
        rb, jcb, jib = _block_residual(
            problem, net, colloc.boundary, colloc.boundary_weights,
            problem.boundary_ops, problem.b_fn, problem.db_fn, tables,
            problem.lam, _mask_jet(problem, colloc.boundary), want_jac,
            problem.n_boundary_residuals,
        )
        parts.append((rb, jcb, jib))
    r = np.concatenate([p[0] for p in parts])
    if not want_jac:
        return r, None, None
    jc = np.vstack([p[1] for p in parts])
    ji = np.vstack([p[2] for p in parts])
    return r, jc, ji


def residual_vector(problem, net, colloc, tables=None) -> np.ndarray:
    r, _, _ = _assemble(problem, net, colloc, tables, False)
    return r


def residual_jacobian(problem, net, colloc, tables=None, wrt: str = "all"):
    """(residual, Jacobian): columns are active coefficients, then inner
    parameters atom-major, matching the active-index compaction order."""
    if wrt not in ("outer", "all"):
        raise ValueError("wrt must be 'outer' or 'all'")
    r, jc, ji = _assemble(problem, net, colloc, tables, True)
    if wrt == "outer":
        return r, jc
    return r, np.hstack([jc, ji])


def loss_value(problem, net, colloc, tables=None) -> float:
    r = residual_vector(problem, net, colloc, tables)
    return 0.5 * float(r @ r)


def validate_problem(problem: ProblemSpec, rng=None, tol: float = 1e-6) -> None:
    """Finite-difference consistency of (e_fn, de_fn) and (b_fn, db_fn)."""
    rng = np.random.default_rng(rng)
    dom = problem.domain
    for comp, dcomp, ops, n_out in (
        (problem.e_fn, problem.de_fn, problem.interior_ops, 1),
        (problem.b_fn, problem.db_fn, problem.boundary_ops,
         problem.n_boundary_residuals),
    ):
        if comp is None or not ops:
            continue
        for _ in range(10):
            x = rng.uniform(-dom.half_width, dom.half_width, (3, dom.d))
            vals = [
                rng.standard_normal((3, dom.d)) if op.vector_valued
                else rng.standard_normal(3) for op in ops
            ]
            base = np.asarray(comp(x, vals), dtype=float).reshape(3, n_out)
            parts = dcomp(x, vals)
            for i, op in enumerate(ops):
                flatdim = dom.d if op.vector_valued else 1
                for j in range(flatdim):
                    h = 1e-6
                    vp = [v.copy() for v in vals]
                    vm = [v.copy() for v in vals]
                    if op.vector_valued:
                        vp[i][:, j] += h
                        vm[i][:, j] -= h
                    else:
                        vp[i] += h
                        vm[i] -= h
                    fd = (np.asarray(comp(x, vp), dtype=float)
                          - np.asarray(comp(x, vm), dtype=float)).reshape(3, n_out)
                    fd /= 2 * h
                    got = np.asarray(parts[i], dtype=float)
                    got = got.reshape(3, n_out, dom.d)[:, :, j] if op.vector_valued \
                        else got.reshape(3, n_out)
                    if not np.allclose(got, fd, atol=tol * (1 + np.abs(fd).max())):
                        raise AssertionError(
                            f"{problem.name}: composition partial {i} mismatch"
                        )


# -- error metrics -----------------------------------------------------------


def test_grid(problem: ProblemSpec, n: int = 300) -> np.ndarray:
    dom = problem.domain
    if dom.kind == "box":
        axis = np.linspace(-dom.half_width, dom.half_width, n)
        grids = np.meshgrid(*([axis] * dom.d), indexing="ij")
        return np.column_stack([g.ravel() for g in grids])
    axis = np.linspace(-dom.half_width, dom.half_width, n)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return pts[np.sum(pts**2, axis=1) <= dom.half_width**2]


def _errors(net, problem, grid):
    grid = np.atleast_2d(grid)
    u_true = np.asarray(problem.exact(grid), dtype=float)
    u_net = network_eval(net, grid, problem.mask)
    return u_net - u_true, u_true


def rel_l2_error(net, problem, grid) -> float:
    """Relative discrete l2 error against the exact solution, in percent."""
    diff, u_true = _errors(net, problem, grid)
    denom = np.linalg.norm(u_true)
    if denom == 0:
        raise ValueError("exact solution vanishes on the grid; metric undefined")
    return 100.0 * float(np.linalg.norm(diff) / denom)


def rel_linf_error(net, problem, grid) -> float:
    diff, u_true = _errors(net, problem, grid)
    denom = np.max(np.abs(u_true))
    if denom == 0:
        raise ValueError("exact solution vanishes on the grid; metric undefined")
    return 100.0 * float(np.max(np.abs(diff)) / denom)


# -- benchmark constructors --------------------------------------------------


def _gauss_bumps(centers, sigmas, amps):
    centers = np.asarray(centers, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    amps = np.asarray(amps, dtype=float)

    def u(x):
        x = np.atleast_2d(x)
        out = np.zeros(x.shape[0])
        for c, s, a in zip(centers, sigmas, amps):
            out += a * np.exp(-np.sum((x - c) ** 2, axis=1) / (2 * s**2))
        return out

    def neg_lap(x):
        x = np.atleast_2d(x)
        d = x.shape[1]
        out = np.zeros(x.shape[0])
        for c, s, a in zip(centers, sigmas, amps):
            rho2 = np.sum((x - c) ** 2, axis=1) / s**2
            out += a * (d - rho2) / s**2 * np.exp(-rho2 / 2)
        return out

    return u, neg_lap


def semilinear_poisson_2d(centers=((-0.5, -0.5), (0.5, 0.5)),
                          sigmas=(0.2, 0.15), amps=(1.0, 0.8),
                          lam=100.0) -> ProblemSpec:
    """-Lap u + u^3 = f on [-1,1]^2 with a two-bump manufactured solution."""
    u, neg_lap = _gauss_bumps(centers, sigmas, amps)
    f = lambda x: neg_lap(x) + u(x) ** 3
    return ProblemSpec(
        name="semilinear_poisson_2d",
        domain=Domain("box", 2, 1.0),
        interior_ops=(LinearOpSpec("laplacian"), LinearOpSpec("identity")),
        boundary_ops=(LinearOpSpec("identity"),),
        e_fn=lambda x, v: v[0] + v[1] ** 3 - f(x),
        de_fn=lambda x, v: [np.ones_like(v[0]), 3 * v[1] ** 2],
        b_fn=lambda x, v: v[0] - u(x),
        db_fn=lambda x, v: [np.ones_like(v[0])],
        exact=u,
        lam=lam,
        params={"centers": centers, "sigmas": sigmas, "amps": amps},
    )


def _sine_sum(d):
    u = lambda x: np.sum(np.sin(math.pi * np.atleast_2d(x)), axis=1)
    return u


def bilaplacian(d: int = 4, variant="sine", q: float = 4.3,
                lam: float = 100.0, cubic: bool = True) -> ProblemSpec:
    """(-Lap)^2 u + u^3 = f with hinged boundary data u = g, Lap u = h."""
    if variant == "sine":
        u = _sine_sum(d)
        lap_u = lambda x: -math.pi**2 * u(x)
        bilap_u = lambda x: math.pi**4 * u(x)
        params = {"variant": "sine"}
    elif variant == "bump":
        c = np.full(d, 0.5)

        def power_lap(x, k):
            # Lap^k |x-c|^q for radial powers: q(q+d-2) r^(q-2) etc.
            r = np.linalg.norm(np.atleast_2d(x) - c, axis=1)
            coef, expo = 1.0, q
            for _ in range(k):
                coef *= expo * (expo + d - 2)
                expo -= 2
            return coef * r**expo / 2**q

        u = lambda x: power_lap(x, 0)
        lap_u = lambda x: power_lap(x, 1)
        bilap_u = lambda x: power_lap(x, 2)
        params = {"variant": "bump", "q": q, "exclude_center": (tuple(c), 1e-3)}
    else:
        raise ValueError(f"unknown variant {variant!r}")
    cub = 1.0 if cubic else 0.0
    f = lambda x: bilap_u(x) + cub * u(x) ** 3
    return ProblemSpec(
        name=f"bilaplacian_{d}d",
        domain=Domain("box", d, 1.0),
        interior_ops=(LinearOpSpec("polyharmonic", m=2), LinearOpSpec("identity")),
        boundary_ops=(LinearOpSpec("identity"), LinearOpSpec("laplacian")),
        e_fn=lambda x, v: v[0] + cub * v[1] ** 3 - f(x),
        de_fn=lambda x, v: [np.ones_like(v[0]), 3 * cub * v[1] ** 2],
        # second row: (-Lap u) - (-h) with h = Lap u_exact
        b_fn=lambda x, v: np.column_stack([v[0] - u(x), v[1] + lap_u(x)]),
        db_fn=lambda x, v: [
            np.column_stack([np.ones_like(v[0]), np.zeros_like(v[0])]),
            np.column_stack([np.zeros_like(v[0]), np.ones_like(v[0])]),
        ],
        n_boundary_residuals=2,
        exact=u,
        lam=lam,
        params=params,
    )


def polyharmonic_linear(beta: int, d: int = 4, lam: float = 100.0) -> ProblemSpec:
    """(-Lap)^(beta/2) u = f, beta in {0, 2, 4}, sine-sum exact solution."""
    if beta not in (0, 2, 4):
        raise ValueError("beta must be 0, 2 or 4")
    u = _sine_sum(d)
    if beta == 0:
        interior = (LinearOpSpec("identity"),)
        f = u
        boundary = (LinearOpSpec("identity"),)
        b_fn = lambda x, v: v[0] - u(x)
        db_fn = lambda x, v: [np.ones_like(v[0])]
        nb = 1
    elif beta == 2:
        interior = (LinearOpSpec("laplacian"),)
        f = lambda x: math.pi**2 * u(x)
        boundary = (LinearOpSpec("identity"),)
        b_fn = lambda x, v: v[0] - u(x)
        db_fn = lambda x, v: [np.ones_like(v[0])]
        nb = 1
    else:
        interior = (LinearOpSpec("polyharmonic", m=2),)
        f = lambda x: math.pi**4 * u(x)
        boundary = (LinearOpSpec("identity"), LinearOpSpec("laplacian"))
        b_fn = lambda x, v: np.column_stack(
            [v[0] - u(x), v[1] - math.pi**2 * u(x)]
        )
        db_fn = lambda x, v: [
            np.column_stack([np.ones_like(v[0]), np.zeros_like(v[0])]),
            np.column_stack([np.zeros_like(v[0]), np.ones_like(v[0])]),
        ]
        nb = 2
    return ProblemSpec(
        name=f"polyharmonic_linear_b{beta}",
        domain=Domain("box", d, 1.0),
        interior_ops=interior,
        boundary_ops=boundary,
        e_fn=lambda x, v: v[0] - f(x),
        de_fn=lambda x, v: [np.ones_like(v[0])],
        b_fn=b_fn,
        db_fn=db_fn,
        n_boundary_residuals=nb,
        exact=u,
        lam=lam,
        params={"beta": beta},
    )


def fractional_poisson(beta: float, lam: float = 100.0) -> ProblemSpec:
    """(-Lap)^(beta/2) u = 1 on the unit disk, u = 0 outside."""
    if not (0 < beta < 2):
        raise ValueError("fractional order must lie in (0, 2)")
    cb = 2.0 ** (-beta) / math.gamma(1 + beta / 2) ** 2

    def u(x):
        r2 = np.sum(np.atleast_2d(x) ** 2, axis=1)
        return cb * np.maximum(0.0, 1.0 - r2) ** (beta / 2)

    return ProblemSpec(
        name=f"fractional_poisson_b{beta}",
        domain=Domain("disk", 2, 1.0),
        interior_ops=(LinearOpSpec("fraclap", beta=beta),),
        boundary_ops=(LinearOpSpec("identity"),),
        e_fn=lambda x, v: v[0] - 1.0,
        de_fn=lambda x, v: [np.ones_like(v[0])],
        b_fn=lambda x, v: v[0],
        db_fn=lambda x, v: [np.ones_like(v[0])],
        exact=u,
        lam=lam,
        params={"beta": beta},
    )


EIKONAL_L = np.array([[2.6, 0.0], [-4.0, 1.8]])


def eikonal_aniso_2d(eps: float = 0.05, L=EIKONAL_L) -> ProblemSpec:
    """-eps Lap u + grad(u)^T M grad(u) = 1, M = L L^T, mask-enforced BC."""
    L = np.asarray(L, dtype=float)
    M = L @ L.T
    return ProblemSpec(
        name="eikonal_aniso_2d",
        domain=Domain("box", 2, 1.0),
        interior_ops=(
            LinearOpSpec("laplacian"),
            LinearOpSpec("aniso_quadratic_gradient", matrix=M),
        ),
        boundary_ops=(),
        # -eps Lap u = eps * (-Lap u)
        e_fn=lambda x, v: eps * v[0] + np.einsum("ki,ij,kj->k", v[1], M, v[1]) - 1.0,
        de_fn=lambda x, v: [np.full(v[0].shape, eps), 2.0 * v[1] @ M],
        mask=box_mask,
        exact=None,
        params={"eps": eps, "L": L.tolist()},
    )


def eikonal_1d(eps: float) -> ProblemSpec:
    """-eps u'' + (u')^2 = 1 on [-1,1]; viscosity solution 1 - |x|."""

    def exact(x):
        return 1.0 - np.abs(np.atleast_2d(x)[:, 0])

    return ProblemSpec(
        name="eikonal_1d",
        domain=Domain("box", 1, 1.0),
        interior_ops=(LinearOpSpec("laplacian"), LinearOpSpec("gradient")),
        boundary_ops=(),
        e_fn=lambda x, v: eps * v[0] + v[1][:, 0] ** 2 - 1.0,
        de_fn=lambda x, v: [np.full(v[0].shape, eps), 2.0 * v[1]],
        mask=box_mask,
        exact=exact,
        params={"eps": eps},
    )


_REGISTRY = {
    "semilinear_poisson_2d": semilinear_poisson_2d,
    "bilaplacian": bilaplacian,
    "polyharmonic_linear": polyharmonic_linear,
    "fractional_poisson": fractional_poisson,
    "eikonal_aniso_2d": eikonal_aniso_2d,
    "eikonal_1d": eikonal_1d,
}


def make_problem(name: str, **params) -> ProblemSpec:
    if name not in _REGISTRY:
        raise KeyError(f"unknown benchmark {name!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[name](**params)


# -- viscosity reference for the 2D Eikonal benchmark ------------------------


def viscosity_reference_2d(L, n: int = 401, tol: float = 1e-9,
                           max_sweeps: int = 50000):
    """Lax-Friedrichs value iteration for sqrt(grad u . M grad u) = 1,
    u = 0 on the boundary of [-1,1]^2, M = L L^T.  Returns (axis, U)."""
    L = np.asarray(L, dtype=float)
    M = L @ L.T
    if np.any(np.linalg.eigvalsh(M) <= 0):
        raise ValueError("metric must be positive definite")
    ax = np.linspace(-1.0, 1.0, n)
    h = ax[1] - ax[0]
    # artificial viscosities bound |dH/dp_i| for H = sqrt(p.Mp)
    a1, a2 = math.sqrt(M[0, 0]), math.sqrt(M[1, 1])
    U = np.full((n, n), 10.0)
    U[0, :] = U[-1, :] = U[:, 0] = U[:, -1] = 0.0
    inv = 1.0 / (a1 / h + a2 / h)
    for sweep in range(max_sweeps):
        up, dn = U[2:, 1:-1], U[:-2, 1:-1]
        rt, lf = U[1:-1, 2:], U[1:-1, :-2]
        px = (up - dn) / (2 * h)
        py = (rt - lf) / (2 * h)
        ham = np.sqrt(
            M[0, 0] * px * px + 2 * M[0, 1] * px * py + M[1, 1] * py * py
        )
        new = inv * (1.0 - ham + a1 * (up + dn) / (2 * h)
                     + a2 * (rt + lf) / (2 * h))
        new = np.minimum(new, U[1:-1, 1:-1])  # monotone value iteration
        delta = float(np.max(U[1:-1, 1:-1] - new))
        U[1:-1, 1:-1] = new
        if delta < tol:
            return ax, U
    raise RuntimeError("viscosity reference did not converge")
