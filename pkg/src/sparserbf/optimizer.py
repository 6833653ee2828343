"""Three-phase sparse training: greedy insertion, semi-smooth proximal
Gauss-Newton, pruning; plus the first-order, outer-only, random-insert,
no-prefactor and fixed-width variants.

The regularized objective is 0.5 ||r(c, w)||^2 + alpha ||c||_1 with r the
weighted residual vector.  Phase I scores candidate atoms by the dual
variable g(w) = d/dc of the smooth part at c = 0 and inserts the worst
violators of |g| <= alpha.  Phase II takes one damped Gauss-Newton step
with the l1 term handled by an active-set branch rule; steps that cross
zero are truncated and the step is accepted only if the objective does
not increase.  Phase III removes atoms whose coefficient is exactly zero.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg as sla

from .profiles import RadialProfile, gaussian
from .problems import (
    CollocationSet,
    Network,
    ProblemSpec,
    _assemble,
    _atom_features,
    _mask_jet,
    _op_sums,
    network_eval,
    rel_l2_error,
    rel_linf_error,
    residual_jacobian,
    residual_vector,
    sample_collocation,
    test_grid,
)

VARIANTS = ("full", "outer_only", "first_order", "random_insert",
            "no_prefactor", "fixed_width")


@dataclass
class TrainConfig:
    alpha: float = 1e-3
    iterations: int = 300
    resolution: int = 31
    candidates_per_iter: int = 200
    max_inserts_per_iter: int = 5
    delta_ins: float = 0.1
    dedup_radius: float = 0.02
    variant: str = "full"
    lr: float = 1e-3
    fixed_n: int = 100
    fixed_reg: str = "l1"
    profile: RadialProfile = field(default_factory=gaussian)
    aniso: bool = False
    gamma: Optional[float] = None       # default operator order + 1
    sigma_min: Optional[float] = None   # default half collocation spacing
    sigma_max: Optional[float] = None   # default domain diameter
    domain_dilation: float = 0.1
    mu0: float = 1e-3
    mu_up: float = 4.0
    mu_down: float = 0.7
    max_retries: int = 8
    kick: bool = False
    kick_tau: float = 0.1
    capacity: int = 128
    test_resolution: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.alpha <= 0 and self.fixed_reg == "l1":
            raise ValueError("l1 weight must be positive")
        if self.variant == "fixed_width" and self.fixed_n < 1:
            raise ValueError("fixed-width network needs at least one atom")
        if self.fixed_reg not in ("l1", "l2"):
            raise ValueError("fixed_reg must be 'l1' or 'l2'")


@dataclass
class TrainState:
    net: Network
    damping: float
    history: list = field(default_factory=list)


@dataclass
class TrainReport:
    net: Network
    config: TrainConfig
    history: list
    n_kernels: int
    n_params: int
    runtime: float
    err_l2: Optional[float] = None
    err_linf: Optional[float] = None
    final_loss: float = math.nan
    max_condition: float = math.nan

    def to_dict(self) -> dict:
        cfg = {k: v for k, v in vars(self.config).items()
               if isinstance(v, (int, float, str, bool, type(None)))}
        cfg["profile"] = self.config.profile.family
        return {
            "config": cfg,
            "n_kernels": self.n_kernels,
            "n_params": self.n_params,
            "runtime_s": self.runtime,
            "err_rel_l2_pct": self.err_l2,
            "err_rel_linf_pct": self.err_linf,
            "final_loss": self.final_loss,
            "max_condition": self.max_condition,
            "history": self.history,
        }


# -- geometry helpers --------------------------------------------------------


def _collocation_spacing(problem: ProblemSpec, resolution: int) -> float:
    dom = problem.domain
    if dom.kind == "box":
        return 2 * dom.half_width / (resolution - 1)
    return 2 * dom.half_width / resolution


def _resolve_bounds(problem: ProblemSpec, config: TrainConfig):
    smin = config.sigma_min
    if smin is None:
        smin = 0.5 * _collocation_spacing(problem, config.resolution)
    smax = config.sigma_max
    if smax is None:
        smax = problem.domain.diameter()
    gamma = config.gamma
    if gamma is None:
        gamma = 0.0 if config.variant == "no_prefactor" \
            else problem.default_gamma()
    return smin, smax, gamma


def _sample_centers(problem: ProblemSpec, config: TrainConfig, rng, m: int):
    dom = problem.domain
    r = dom.half_width * (1 + config.domain_dilation)
    if dom.kind == "box":
        return rng.uniform(-r, r, (m, dom.d))
    rad = r * np.sqrt(rng.uniform(0, 1, m))
    th = rng.uniform(0, 2 * math.pi, m)
    return np.column_stack([rad * np.cos(th), rad * np.sin(th)])


def _project_inner(net: Network, problem: ProblemSpec, config: TrainConfig):
    dom = problem.domain
    r = dom.half_width * (1 + config.domain_dilation)
    idx = net.active_indices
    if dom.kind == "box":
        net.centers[idx] = np.clip(net.centers[idx], -r, r)
    else:
        nrm = np.linalg.norm(net.centers[idx], axis=1)
        over = nrm > r
        if np.any(over):
            net.centers[idx[over]] *= (r / nrm[over])[:, None]
    if net.aniso:
        net.radii[idx] = np.clip(net.radii[idx], net.sigma_min, net.sigma_max)
    else:
        net.sigmas[idx] = np.clip(net.sigmas[idx], net.sigma_min, net.sigma_max)


def _empty_network(problem: ProblemSpec, config: TrainConfig) -> Network:
    smin, smax, gamma = _resolve_bounds(problem, config)
    return Network(
        profile=config.profile, gamma=gamma, d=problem.domain.d,
        capacity=config.capacity, aniso=config.aniso,
        sigma_min=smin, sigma_max=smax,
    )


# -- dual scoring ------------------------------------------------------------


def _candidate_columns(problem, net, colloc, centers, sigmas, tables,
                       angles=None, radii=None):
    """Residual-derivative columns d r / d c for unit-coefficient
    candidate atoms, and the current residual, in one pass."""
    scratch = Network(
        profile=net.profile, gamma=net.gamma, d=net.d,
        capacity=max(1, centers.shape[0]), aniso=net.aniso,
        sigma_min=net.sigma_min if net.aniso
        else min(net.sigma_min, float(np.min(sigmas))),
        sigma_max=net.sigma_max if net.aniso
        else max(net.sigma_max, float(np.max(sigmas))),
    )
    if net.aniso:
        for c, a, rr in zip(centers, angles, radii):
            scratch.insert(c, angles=a, radii=rr)
    else:
        for c, s in zip(centers, sigmas):
            scratch.insert(c, sigma=s)
    blocks = [(colloc.interior, colloc.interior_weights, problem.interior_ops,
               problem.e_fn, problem.de_fn, 1.0, 1)]
    if colloc.boundary.shape[0] > 0 and problem.boundary_ops:
        blocks.append((colloc.boundary, colloc.boundary_weights,
                       problem.boundary_ops, problem.b_fn, problem.db_fn,
                       problem.lam, problem.n_boundary_residuals))
    cols, resid = [], []
    for pts, wts, ops, comp, dcomp, scale, n_out in blocks:
        K = pts.shape[0]
        sqw = np.sqrt(scale * wts)
        jet = _mask_jet(problem, pts)
        sums = _op_sums(problem, net, pts, ops, tables, jet)
        e = np.asarray(comp(pts, sums), dtype=float).reshape(K, n_out)
        resid.append((sqw[:, None] * e).reshape(-1))
        partials = [np.asarray(p, dtype=float) for p in dcomp(pts, sums)]
        block_cols = np.zeros((K * n_out, scratch.n_active))
        for a in range(scratch.n_active):
            feats = _atom_features(problem, scratch, a, pts, ops, tables,
                                   jet, False)
            col = np.zeros((K, n_out))
            for op, dE, (vals, _) in zip(ops, partials, feats):
                if op.vector_valued:
                    col += np.einsum(
                        "koj,kj->ko", dE.reshape(K, n_out, net.d), vals
                    )
                else:
                    col += dE.reshape(K, n_out) * vals[:, None]
            block_cols[:, a] = (sqw[:, None] * col).reshape(-1)
        cols.append(block_cols)
    return np.concatenate(resid), np.vstack(cols)


def dual_score(problem, net, colloc, center, sigma, tables=None) -> float:
    """g(w) = d/dc of the smooth loss for a unit candidate atom at c=0."""
    r, cols = _candidate_columns(
        problem, net, colloc, np.atleast_2d(center), np.atleast_1d(sigma),
        tables,
    )
    return float(r @ cols[:, 0])


# -- phase I: greedy insertion ----------------------------------------------


def _dedup_key(net: Network, problem: ProblemSpec, centers, sigmas):
    diam = problem.domain.diameter()
    return np.column_stack([centers / diam, np.log(sigmas)[:, None]])


def phase1_insert(state: TrainState, problem, colloc, config, rng,
                  tables=None) -> dict:
    net = state.net
    m = config.candidates_per_iter
    centers = _sample_centers(problem, config, rng, m)
    sigmas = np.exp(rng.uniform(
        math.log(net.sigma_min), math.log(net.sigma_max), m))
    angles = radii = None
    if net.aniso:
        na = net.d * (net.d - 1) // 2
        angles = rng.uniform(0.0, math.pi, (m, na))
        radii = np.exp(rng.uniform(
            math.log(net.sigma_min), math.log(net.sigma_max), (m, net.d)))
    if config.variant == "random_insert":
        # no boosting: one random candidate, probability loss/loss0,
        # positive sign by the nonnegative-solution convention
        r = residual_vector(problem, net, colloc, tables)
        loss = 0.5 * float(r @ r)
        loss0 = state.history[0]["loss"] if state.history else loss
        if rng.uniform() < min(1.0, loss / max(loss0, 1e-300)):
            net.insert(centers[0], sigma=sigmas[0], coeff=config.kick_tau)
            return {"inserted": 1, "max_dual": math.nan}
        return {"inserted": 0, "max_dual": math.nan}
    r, cols = _candidate_columns(problem, net, colloc, centers, sigmas,
                                 tables, angles=angles, radii=radii)
    scores = cols.T @ r
    order = np.argsort(-np.abs(scores))
    if net.aniso:
        existing = np.zeros((0, net.d + 1))  # dedup by center/mean radius
        sig_key = np.exp(np.mean(np.log(radii), axis=1))
        old_sig = np.exp(np.mean(np.log(net.radii[net.active_indices]), axis=1)) \
            if net.n_active else np.zeros(0)
        if net.n_active:
            existing = _dedup_key(net, problem,
                                  net.centers[net.active_indices], old_sig)
    else:
        sig_key = sigmas
        existing = _dedup_key(net, problem,
                              net.centers[net.active_indices],
                              net.sigmas[net.active_indices]) \
            if net.n_active else np.zeros((0, net.d + 1))
    inserted = 0
    threshold = config.alpha * (1 + config.delta_ins)
    for i in order:
        if inserted >= config.max_inserts_per_iter:
            break
        if abs(scores[i]) <= threshold:
            break
        key = _dedup_key(net, problem, centers[i:i + 1], sig_key[i:i + 1])
        if existing.shape[0] and \
                np.min(np.linalg.norm(existing - key, axis=1)) < config.dedup_radius:
            continue
        coeff = 0.0
        if config.kick:
            coeff = -config.kick_tau * np.sign(scores[i]) \
                * min(abs(scores[i]) - config.alpha, 1.0)
        if net.aniso:
            net.insert(centers[i], angles=angles[i], radii=radii[i],
                       coeff=coeff)
        else:
            net.insert(centers[i], sigma=sigmas[i], coeff=coeff)
        existing = np.vstack([existing, key])
        inserted += 1
    return {"inserted": inserted,
            "max_dual": float(np.max(np.abs(scores))) if m else 0.0}


# -- phase II: semi-smooth proximal Gauss-Newton -----------------------------


def condition_estimate(a: np.ndarray, iters: int = 200, rng=None) -> float:
    """Power-iteration estimate of lambda_max / lambda_min for SPD a."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if n == 0:
        return 1.0
    rng = np.random.default_rng(0 if rng is None else rng)
    v = rng.standard_normal(n)
    for _ in range(iters):
        v = a @ v
        v /= np.linalg.norm(v)
    lmax = float(v @ (a @ v))
    try:
        cho = sla.cho_factor(a)
    except np.linalg.LinAlgError:
        return math.inf
    w = rng.standard_normal(n)
    for _ in range(iters):
        w = sla.cho_solve(cho, w)
        w /= np.linalg.norm(w)
    lmin = float(w @ (a @ w))
    if lmin <= 0:
        return math.inf
    return lmax / lmin


def _objective(problem, net, colloc, alpha, tables) -> float:
    r = residual_vector(problem, net, colloc, tables)
    return 0.5 * float(r @ r) + alpha * float(
        np.sum(np.abs(net.coeffs[net.active_indices])))


def phase2_gn_step(state: TrainState, problem, colloc, config,
                   tables=None, wrt: str = "all",
                   l2_ridge: float = 0.0) -> dict:
    """One damped proximal Gauss-Newton step on the active atoms."""
    net = state.net
    if net.n_active == 0:
        return {"accepted": False, "condition": math.nan, "reason": "empty"}
    alpha = 0.0 if l2_ridge > 0 else config.alpha
    r, J = residual_jacobian(problem, net, colloc, tables, wrt=wrt)
    idx = net.active_indices
    N = idx.size
    p = net.inner_dim if wrt == "all" else 0
    c = net.coeffs[idx]
    g = J.T @ r
    g_c = g[:N]
    # active-set branch: zero coefficients stay fixed unless |g| > alpha
    free_c = (c != 0.0) | (np.abs(g_c) > alpha)
    sign = np.where(c != 0.0, np.sign(c), -np.sign(g_c))
    keep = np.concatenate([
        free_c,
        np.repeat(free_c, p) if p else np.zeros(0, dtype=bool),
    ])
    if not np.any(keep):
        return {"accepted": False, "condition": math.nan, "reason": "all-fixed"}
    Jf = J[:, keep]
    gf = g[keep] + np.concatenate(
        [alpha * sign[free_c], np.zeros(int(np.sum(free_c)) * p)])
    H = Jf.T @ Jf
    if l2_ridge > 0:
        nfree = int(np.sum(free_c))
        ridge = np.concatenate(
            [np.full(nfree, l2_ridge), np.zeros(nfree * p)])
        H[np.diag_indices_from(H)] += ridge
        gf = gf + ridge * np.concatenate(
            [c[free_c], np.zeros(nfree * p)])
    diag = np.diag(H)
    # floor the Jacobi scale so near-zero columns stay properly damped
    dscale = np.sqrt(np.maximum(diag, 1e-8 * max(diag.max(), 1e-300)))
    Hs = H / dscale[:, None] / dscale[None, :]
    obj0 = _objective(problem, net, colloc, alpha, tables) \
        + 0.5 * l2_ridge * float(c @ c)
    mu = min(state.damping, 1e6)
    cond = math.nan
    for attempt in range(config.max_retries + 1):
        A = Hs + mu * np.eye(Hs.shape[0])
        try:
            step = -sla.cho_solve(sla.cho_factor(A), gf / dscale) / dscale
        except np.linalg.LinAlgError:
            mu *= config.mu_up
            continue
        if math.isnan(cond):
            cond = condition_estimate(A)
        trial = net.copy()
        nfree = int(np.sum(free_c))
        dc = np.zeros(N)
        dc[free_c] = step[:nfree]
        c_new = c + dc
        # semismooth projection: steps crossing zero are truncated at zero
        crossed = free_c & (np.sign(c_new) != sign) & (c_new != 0.0)
        c_new[crossed] = 0.0
        trial.coeffs[idx] = c_new
        if p:
            inner = trial.pack_inner().reshape(N, p)
            inner[free_c] += step[nfree:].reshape(nfree, p)
            trial.unpack_inner(inner.ravel())
            _project_inner(trial, problem, config)
        obj1 = _objective(problem, trial, colloc, alpha, tables) \
            + 0.5 * l2_ridge * float(c_new @ c_new)
        if obj1 <= obj0:
            state.net = trial
            state.damping = max(mu * config.mu_down, 1e-12)
            return {"accepted": True, "condition": cond, "objective": obj1}
        mu *= config.mu_up
    state.damping = mu
    return {"accepted": False, "condition": cond, "objective": obj0,
            "reason": "no-decrease"}


def phase2_first_order(state: TrainState, problem, colloc, config,
                       tables=None) -> dict:
    net = state.net
    if net.n_active == 0:
        return {"accepted": False, "condition": math.nan}
    r, J = residual_jacobian(problem, net, colloc, tables, wrt="all")
    idx = net.active_indices
    N = idx.size
    g = J.T @ r
    obj0 = 0.5 * float(r @ r) + config.alpha * float(
        np.sum(np.abs(net.coeffs[idx])))
    lr = config.lr
    for _ in range(config.max_retries + 1):
        trial = net.copy()
        c = trial.coeffs[idx] - lr * g[:N]
        # soft threshold
        trial.coeffs[idx] = np.sign(c) * np.maximum(
            np.abs(c) - lr * config.alpha, 0.0)
        trial.unpack_inner(trial.pack_inner() - lr * g[N:])
        _project_inner(trial, problem, config)
        obj1 = _objective(problem, trial, colloc, config.alpha, tables)
        if obj1 <= obj0:
            state.net = trial
            return {"accepted": True, "condition": math.nan, "lr": lr}
        lr *= 0.25  # backtrack on increase
    return {"accepted": False, "condition": math.nan, "lr": lr}


def phase3_prune(state: TrainState) -> int:
    net = state.net
    idx = net.active_indices
    zero = idx[net.coeffs[idx] == 0.0]
    net.deactivate(zero)
    return int(zero.size)


# -- training loops ----------------------------------------------------------


def _final_metrics(problem, net, config):
    if problem.exact is None:
        return None, None
    grid = test_grid(problem, config.test_resolution)
    try:
        return (rel_l2_error(net, problem, grid),
                rel_linf_error(net, problem, grid))
    except ValueError:
        return None, None


def _finish(problem, state, config, t0) -> TrainReport:
    net = state.net
    err2, errinf = _final_metrics(problem, net, config)
    conds = [h["condition"] for h in state.history
             if not math.isnan(h.get("condition", math.nan))]
    return TrainReport(
        net=net, config=config, history=state.history,
        n_kernels=net.n_active,
        n_params=net.n_active * (net.inner_dim + 1),
        runtime=time.perf_counter() - t0,
        err_l2=err2, err_linf=errinf,
        final_loss=state.history[-1]["loss"] if state.history else math.nan,
        max_condition=max(conds) if conds else math.nan,
    )


def _record(state, problem, colloc, config, tables, extra):
    net = state.net
    r = residual_vector(problem, net, colloc, tables)
    h = {
        "loss": 0.5 * float(r @ r),
        "l1": float(np.sum(np.abs(net.coeffs[net.active_indices]))),
        "n_active": net.n_active,
    }
    h.update(extra)
    state.history.append(h)


def train(problem: ProblemSpec, config: TrainConfig, rng=None,
          tables=None, warm_start: Optional[Network] = None,
          colloc: Optional[CollocationSet] = None) -> TrainReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed if rng is None else rng)
    if config.variant == "fixed_width":
        return fixed_width_train(problem, config.fixed_n, config.fixed_reg,
                                 config, rng, tables=tables, colloc=colloc)
    if colloc is None:
        colloc = sample_collocation(problem, config.resolution, rng)
    net = warm_start.copy() if warm_start is not None \
        else _empty_network(problem, config)
    state = TrainState(net=net, damping=config.mu0)
    for it in range(config.iterations):
        t_it = time.perf_counter()
        ins = phase1_insert(state, problem, colloc, config, rng, tables)
        if config.variant == "first_order":
            step = phase2_first_order(state, problem, colloc, config, tables)
        elif config.variant == "outer_only":
            step = phase2_gn_step(state, problem, colloc, config, tables,
                                  wrt="outer")
        else:
            step = phase2_gn_step(state, problem, colloc, config, tables,
                                  wrt="all")
        pruned = phase3_prune(state)
        _record(state, problem, colloc, config, tables, {
            "inserted": ins["inserted"], "max_dual": ins["max_dual"],
            "accepted": step["accepted"], "condition": step.get("condition"),
            "pruned": pruned, "iter_s": time.perf_counter() - t_it,
        })
    return _finish(problem, state, config, t0)


def fixed_width_train(problem: ProblemSpec, n: int, reg: str,
                      config: TrainConfig, rng=None, tables=None,
                      colloc: Optional[CollocationSet] = None) -> TrainReport:
    """Gauss-Newton training of a width-n network with random init."""
    t0 = time.perf_counter()
    if n < 1:
        raise ValueError("network width must be positive")
    rng = np.random.default_rng(config.seed if rng is None else rng)
    if colloc is None:
        colloc = sample_collocation(problem, config.resolution, rng)
    net = _empty_network(problem, config)
    while net.capacity < n:
        net.grow()
    centers = _sample_centers(problem, config, rng, n)
    sigmas = np.exp(rng.uniform(
        math.log(net.sigma_min), math.log(net.sigma_max), n))
    coeffs = rng.standard_normal(n)
    for cc, ss, aa in zip(centers, sigmas, coeffs):
        net.insert(cc, sigma=ss, coeff=aa)
    state = TrainState(net=net, damping=config.mu0)
    ridge = config.alpha if reg == "l2" else 0.0
    for it in range(config.iterations):
        t_it = time.perf_counter()
        step = phase2_gn_step(state, problem, colloc, config, tables,
                              wrt="all", l2_ridge=ridge)
        _record(state, problem, colloc, config, tables, {
            "inserted": 0, "max_dual": math.nan,
            "accepted": step["accepted"], "condition": step.get("condition"),
            "pruned": 0, "iter_s": time.perf_counter() - t_it,
        })
    report = _finish(problem, state, config, t0)
    return report


def stationarity_residual(problem, net, colloc, config, tables=None,
                          rng=None, n_probe: int = 50) -> float:
    """Max violation of the l1 optimality conditions.

    Active atoms must satisfy |g_n + alpha sign(c_n)| small; zero-probe
    candidates must satisfy |g| <= alpha (+ slack handled by caller).
    """
    r, J = residual_jacobian(problem, net, colloc, tables, wrt="outer")
    g = J.T @ r
    c = net.coeffs[net.active_indices]
    viol = float(np.max(np.abs(g + config.alpha * np.sign(c)))) if c.size else 0.0
    rng = np.random.default_rng(0 if rng is None else rng)
    centers = _sample_centers(problem, config, rng, n_probe)
    smin, smax, _ = _resolve_bounds(problem, config)
    sigmas = np.exp(rng.uniform(math.log(smin), math.log(smax), n_probe))
    rr, cols = _candidate_columns(problem, net, colloc, centers, sigmas, tables)
    probe = float(np.max(np.maximum(np.abs(cols.T @ rr) - config.alpha, 0.0)))
    return max(viol, probe)
