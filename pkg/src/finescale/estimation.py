"""Maximum-likelihood estimation via EM, with guarded SQUAREM acceleration.

The latent basis coefficients are treated as missing data. The E-step
posterior moments have closed forms through the fast solver; the M-step is
closed-form for the low-rank model and profiles the trend out of a
two-parameter numerical search for the fused model (a generalized M-step:
any improvement keeps the ascent property). SQUAREM extrapolations that
would increase the twice-negative log-likelihood fall back to the plain EM
step, so the monitored objective is non-increasing by construction.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from .errors import (
    FitFailureError,
    InvalidArgumentError,
    NotConvergedWarning,
    NotPositiveDefiniteError,
    NumericFailureError,
    SingularDesignError,
)
from .linalg import chol_psd
from .model import FGP, FRK, FastSolver, ModelParams, ModelWorkspace, neg2_loglik

_LOG_VAR_MIN, _LOG_VAR_MAX = np.log(1e-15), np.log(1e15)
_GAMMA_OPT_PAD = 1e-4  # fraction of interval width kept away from the SPD boundary


@dataclass(frozen=True)
class EStepMoments:
    """Posterior mean and covariance of the basis coefficients given the data."""

    mu_eta: np.ndarray
    sigma_eta: np.ndarray


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    rel_tol: float = 1e-6
    loglik_rel_tol: float = 1e-8
    loglik_monitor_tol: float = 1e-8
    squarem: bool = True
    inner_max_iter: int = 6
    inner_max_fun: int = 20
    seed: int = 0  # reserved; the EM path is deterministic and draws nothing

    def __post_init__(self):
        if self.max_iter < 1 or self.rel_tol <= 0 or self.loglik_rel_tol <= 0:
            raise InvalidArgumentError("EmConfig tolerances must be positive")


@dataclass(frozen=True)
class FittedModel:
    """Estimated parameters plus everything needed for prediction/simulation."""

    params: ModelParams
    moments: EStepMoments
    loglik_trace: np.ndarray  # -2 log L at init and after each accepted iteration
    converged: bool
    n_iter: int
    n_em_maps: int
    monotone_violations: int
    squarem_fallbacks: int
    solver: FastSolver = field(repr=False)
    x_design: np.ndarray = field(repr=False)
    wall_time: float = 0.0

    @property
    def kind(self):
        return self.params.kind

    def report(self):
        """JSON-ready fit summary."""
        p = self.params
        out = {
            "kind": p.kind,
            "beta": [float(b) for b in p.beta],
            "k_lower_triangle": [
                float(v) for v in p.k_mat[np.tril_indices(p.r)]
            ],
            "r": int(p.r),
            "sigma2_eps": float(p.sigma2_eps),
            "n_iterations": int(self.n_iter),
            "n_em_maps": int(self.n_em_maps),
            "neg2_loglik_trace": [float(v) for v in self.loglik_trace],
            "converged": bool(self.converged),
            "monotone_violations": int(self.monotone_violations),
            "squarem_fallbacks": int(self.squarem_fallbacks),
            "wall_time_s": float(self.wall_time),
        }
        if p.kind == FRK:
            out["sigma2_xi"] = float(p.sigma2_xi)
        else:
            out["tau2"] = float(p.tau2)
            out["gamma"] = float(p.gamma)
        return out


def _variance_floor(y_tilde):
    s2 = float(np.var(np.asarray(y_tilde, dtype=float)))
    return 1e-10 * s2 if s2 > 0 else 1e-12


def initialize_params(y_tilde, agg, x_design, kind, r, sigma2_eps, gamma_interval=None):
    """Starting values: OLS trend, near-equal variance split between K and the remainder."""
    y_tilde = np.asarray(y_tilde, dtype=float)
    ax = agg.matrix @ np.asarray(x_design, dtype=float)
    beta0, _, rank, _ = np.linalg.lstsq(ax, y_tilde, rcond=None)
    if rank < ax.shape[1]:
        raise SingularDesignError("aggregated design matrix is rank deficient")
    s2 = float(np.var(y_tilde))
    if s2 <= 0:
        s2 = _variance_floor(y_tilde) * 1e10  # constant data: fall back to the floor scale
    k0 = 0.9 * s2 * np.eye(r)
    if kind == FRK:
        return ModelParams(
            kind=FRK, beta=beta0, k_mat=k0, sigma2_eps=sigma2_eps, sigma2_xi=0.1 * s2
        )
    if gamma_interval is None:
        raise InvalidArgumentError("fgp initialization requires the admissible gamma interval")
    glo, ghi = gamma_interval
    return ModelParams(
        kind=FGP,
        beta=beta0,
        k_mat=k0,
        sigma2_eps=sigma2_eps,
        tau2=0.1 * s2,
        gamma=0.5 * (glo + ghi),
    )


def e_step(solver, y_tilde, x_design=None):
    """Posterior moments of the basis coefficients under the solver's parameters."""
    y_tilde = np.asarray(y_tilde, dtype=float)
    ws = solver.ws
    if x_design is not None:
        ax_beta = ws.agg.matrix @ (np.asarray(x_design, dtype=float) @ solver.params.beta)
    else:
        raise InvalidArgumentError("x_design is required")
    resid = y_tilde - ax_beta
    t = ws.as_mat.T @ solver.apply_d(resid)
    mu = cho_solve((solver.chol_g, True), t)
    sigma = cho_solve((solver.chol_g, True), np.eye(ws.r))
    sigma = 0.5 * (sigma + sigma.T)
    return EStepMoments(mu_eta=mu, sigma_eta=sigma)


def m_step_frk(solver, moments, y_tilde, x_design, var_floor=None):
    """Exact joint maximizer of the expected complete-data objective (frk)."""
    ws = solver.ws
    y_tilde = np.asarray(y_tilde, dtype=float)
    x = np.asarray(x_design, dtype=float)
    ax = ws.agg.matrix @ x
    w = 1.0 / ws.diag_aat  # (A A^T)^{-1} diagonal
    mu, sig = moments.mu_eta, moments.sigma_eta
    resid0 = y_tilde - ws.as_mat @ mu
    awx = ax * w[:, None]
    gram = ax.T @ awx
    try:
        beta = np.linalg.solve(gram, awx.T @ resid0)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError(str(exc)) from exc
    k_new = sig + np.outer(mu, mu)
    k_new = 0.5 * (k_new + k_new.T)
    e = resid0 - ax @ beta
    pw = ws.as_mat.T @ (ws.as_mat * w[:, None])
    total = (float(e @ (w * e)) + float(np.sum(pw * sig))) / ws.m
    if var_floor is None:
        var_floor = _variance_floor(y_tilde)
    sigma2_xi = max(total - solver.params.sigma2_eps, var_floor)
    return ModelParams(
        kind=FRK,
        beta=beta,
        k_mat=k_new,
        sigma2_eps=solver.params.sigma2_eps,
        sigma2_xi=sigma2_xi,
    )


class _FgpObjective:
    """Profiled expected complete-data objective in (log tau2, gamma).

    Evaluations share one banded solve across the trend, residual and basis
    right-hand sides; infeasible points (factorization failures) return a
    large finite penalty so the box search can back off.
    """

    def __init__(self, solver, moments, y_tilde, x_design):
        ws = solver.ws
        self.ws = ws
        self.sigma2_eps = solver.params.sigma2_eps
        self.mu = moments.mu_eta
        self.sigma = moments.sigma_eta
        self.ax = ws.agg.matrix @ np.asarray(x_design, dtype=float)
        self.resid0 = np.asarray(y_tilde, dtype=float) - ws.as_mat @ self.mu
        self.logdet_eaat = float(np.sum(np.log(self.sigma2_eps * ws.diag_aat)))
        self._p = self.ax.shape[1]

    def __call__(self, z):
        from .model import car_precision
        from .linalg import BandedCholesky

        log_tau2, gamma = float(z[0]), float(z[1])
        ws = self.ws
        try:
            car = car_precision(ws.proximity, gamma, np.exp(log_tau2), perm=ws.perm)
            chol_qt = BandedCholesky(car.q_mat + ws.at_e_a, perm=ws.perm)
        except (NotPositiveDefiniteError, FloatingPointError):
            return 1e15, None
        e = ws.e_diag
        block = np.column_stack([self.ax, self.resid0[:, None], ws.as_mat])
        ev = e[:, None] * block
        d_block = ev - e[:, None] * (ws.agg.matrix @ chol_qt.solve(ws.agg.matrix.T @ ev))
        p = self._p
        dax, dresid, das = d_block[:, :p], d_block[:, p], d_block[:, p + 1 :]
        try:
            beta = np.linalg.solve(self.ax.T @ dax, self.ax.T @ dresid)
        except np.linalg.LinAlgError:
            return 1e15, None
        err = self.resid0 - self.ax @ beta
        derr = dresid - dax @ beta
        quad = float(err @ derr)
        tr_term = float(np.sum((ws.as_mat.T @ das) * self.sigma))
        logdet_dinv = chol_qt.logdet - car.chol.logdet + self.logdet_eaat
        return logdet_dinv + quad + tr_term, beta


def m_step_fgp(solver, moments, y_tilde, x_design, inner_max_iter=6, inner_max_fun=20):
    """Generalized M-step for the fused model.

    K has the same closed form as the low-rank model; (tau2, gamma) are
    improved by a bounded quasi-Newton search on the profiled objective,
    warm-started at the current values. If the search cannot improve the
    objective the current pair is kept (with the trend refreshed), which
    preserves the EM ascent property.
    """
    ws = solver.ws
    mu, sig = moments.mu_eta, moments.sigma_eta
    k_new = sig + np.outer(mu, mu)
    k_new = 0.5 * (k_new + k_new.T)
    obj = _FgpObjective(solver, moments, y_tilde, x_design)
    glo, ghi = ws.gamma_interval
    pad = _GAMMA_OPT_PAD * (ghi - glo)
    z0 = np.array([np.log(solver.params.tau2), float(solver.params.gamma)])
    z0[1] = np.clip(z0[1], glo + pad, ghi - pad)
    f0, beta0 = obj(z0)
    if beta0 is None:
        raise NumericFailureError("current CAR parameters are infeasible")
    res = minimize(
        lambda z: obj(z)[0],
        z0,
        method="L-BFGS-B",
        bounds=[(_LOG_VAR_MIN, _LOG_VAR_MAX), (glo + pad, ghi - pad)],
        options={"maxiter": inner_max_iter, "maxfun": inner_max_fun},
    )
    accepted = bool(np.isfinite(res.fun) and res.fun < f0)
    if accepted:
        f_new, beta_new = obj(res.x)
        if beta_new is None or f_new > f0:
            accepted = False
    if accepted:
        log_tau2, gamma = res.x
        beta = beta_new
    else:
        log_tau2, gamma = z0
        beta = beta0
    params = ModelParams(
        kind=FGP,
        beta=beta,
        k_mat=k_new,
        sigma2_eps=solver.params.sigma2_eps,
        tau2=float(np.exp(log_tau2)),
        gamma=float(gamma),
    )
    return params, accepted


def squarem_step(theta_prev, theta_1, theta_2, lower=None, upper=None, margin=1e-6):
    """Squared-extrapolation proposal from three successive parameter vectors.

    theta' = theta_prev - 2 a r + a^2 v with r = theta_1 - theta_prev,
    v = (theta_2 - theta_1) - r and a = -||r|| / ||v||; returns theta_2
    unchanged when v vanishes. The proposal is projected into [lower, upper]
    with an interior margin so constrained coordinates stay strictly feasible.
    """
    theta_prev = np.asarray(theta_prev, dtype=float)
    theta_1 = np.asarray(theta_1, dtype=float)
    theta_2 = np.asarray(theta_2, dtype=float)
    r = theta_1 - theta_prev
    v = (theta_2 - theta_1) - r
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return theta_2.copy()
    alpha = -float(np.linalg.norm(r)) / nv
    prop = theta_prev - 2.0 * alpha * r + alpha**2 * v
    if lower is not None and upper is not None:
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        width = upper - lower
        pad = np.where(np.isfinite(width), margin * width, margin)
        prop = np.clip(prop, lower + pad, upper - pad)
    return prop


# -- parameter vector packing for SQUAREM ------------------------------------


def _pack(params):
    """Flatten to mostly-unconstrained coordinates (log variances, log-Cholesky K)."""
    chol, _ = chol_psd(params.k_mat)
    r = params.r
    idx = np.tril_indices(r)
    kvec = chol[idx].copy()
    diag_pos = np.nonzero(idx[0] == idx[1])[0]
    kvec[diag_pos] = np.log(np.maximum(kvec[diag_pos], 1e-300))
    if params.kind == FRK:
        tail = [np.log(max(params.sigma2_xi, 1e-300))]
    else:
        tail = [np.log(params.tau2), params.gamma]
    return np.concatenate([params.beta, kvec, np.asarray(tail)])


def _unpack(vec, template, gamma_interval=None):
    p = template.beta.size
    r = template.r
    beta = vec[:p]
    nk = r * (r + 1) // 2
    kvec = vec[p : p + nk].copy()
    idx = np.tril_indices(r)
    diag_pos = np.nonzero(idx[0] == idx[1])[0]
    kvec[diag_pos] = np.exp(np.clip(kvec[diag_pos], -300, 300))
    chol = np.zeros((r, r))
    chol[idx] = kvec
    k_mat = chol @ chol.T
    k_mat = 0.5 * (k_mat + k_mat.T)
    if template.kind == FRK:
        return ModelParams(
            kind=FRK,
            beta=beta,
            k_mat=k_mat,
            sigma2_eps=template.sigma2_eps,
            sigma2_xi=float(np.exp(np.clip(vec[p + nk], -700, 700))),
        )
    glo, ghi = gamma_interval
    pad = 1e-6 * (ghi - glo)
    return ModelParams(
        kind=FGP,
        beta=beta,
        k_mat=k_mat,
        sigma2_eps=template.sigma2_eps,
        tau2=float(np.exp(np.clip(vec[p + nk], -700, 700))),
        gamma=float(np.clip(vec[p + nk + 1], glo + pad, ghi - pad)),
    )


def _pack_bounds(params, gamma_interval):
    p = params.beta.size
    nk = params.r * (params.r + 1) // 2
    n_tail = 1 if params.kind == FRK else 2
    lower = np.full(p + nk + n_tail, -np.inf)
    upper = np.full(p + nk + n_tail, np.inf)
    if params.kind == FGP:
        lower[-1], upper[-1] = gamma_interval
    return lower, upper


def fit_em(kind, y_tilde, agg, x_design, basis_matrix, sigma2_eps, proximity=None, config=None):
    """Fit either model by EM, monitoring the marginal objective every iteration.

    Returns a FittedModel whose loglik trace is non-increasing within
    config.loglik_monitor_tol; SQUAREM proposals are only accepted when they
    do not degrade the objective relative to the plain double EM step.
    """
    t_start = time.perf_counter()
    if config is None:
        config = EmConfig()
    y_tilde = np.asarray(y_tilde, dtype=float)
    x_design = np.asarray(x_design, dtype=float)
    if kind == FGP and proximity is None:
        raise InvalidArgumentError("fgp requires a proximity matrix")
    ws = ModelWorkspace(agg, basis_matrix, sigma2_eps, proximity if kind == FGP else None)
    var_floor = _variance_floor(y_tilde)
    params = initialize_params(
        y_tilde, agg, x_design, kind, ws.r, sigma2_eps, gamma_interval=ws.gamma_interval
    )
    solver = FastSolver(params, ws)
    ll = neg2_loglik(solver, y_tilde, x_design)
    trace = [ll]
    n_maps = 0
    n_iter = 0
    violations = 0
    fallbacks = 0
    converged = False

    def em_map(cur_params, cur_solver):
        nonlocal n_maps
        n_maps += 1
        moments = e_step(cur_solver, y_tilde, x_design)
        if kind == FRK:
            new_params = m_step_frk(cur_solver, moments, y_tilde, x_design, var_floor=var_floor)
        else:
            new_params, _ = m_step_fgp(
                cur_solver,
                moments,
                y_tilde,
                x_design,
                inner_max_iter=config.inner_max_iter,
                inner_max_fun=config.inner_max_fun,
            )
        return new_params

    lower, upper = _pack_bounds(params, ws.gamma_interval)

    while n_maps < config.max_iter:
        n_iter += 1
        prev_params, prev_ll = params, ll
        if config.squarem and config.max_iter - n_maps >= 3:
            p1 = em_map(params, solver)
            s1 = FastSolver(p1, ws)
            p2 = em_map(p1, s1)
            s2 = FastSolver(p2, ws)
            ll2 = neg2_loglik(s2, y_tilde, x_design)
            accepted = (p2, s2, ll2)
            try:
                vec_sq = squarem_step(
                    _pack(params), _pack(p1), _pack(p2), lower=lower, upper=upper
                )
                p_sq = _unpack(vec_sq, params, ws.gamma_interval)
                s_sq = FastSolver(p_sq, ws)
                p3 = em_map(p_sq, s_sq)
                s3 = FastSolver(p3, ws)
                ll3 = neg2_loglik(s3, y_tilde, x_design)
                if np.isfinite(ll3) and ll3 <= ll2 + config.loglik_monitor_tol:
                    accepted = (p3, s3, ll3)
                else:
                    fallbacks += 1
            except (NotPositiveDefiniteError, NumericFailureError):
                fallbacks += 1
            params, solver, ll = accepted
        else:
            params = em_map(params, solver)
            solver = FastSolver(params, ws)
            ll = neg2_loglik(solver, y_tilde, x_design)
        trace.append(ll)
        if ll > prev_ll + config.loglik_monitor_tol:
            violations += 1
        d_par = np.linalg.norm(_pack(params) - _pack(prev_params))
        rel_par = d_par / (1.0 + np.linalg.norm(_pack(prev_params)))
        rel_ll = abs(ll - prev_ll) / max(1.0, abs(prev_ll))
        if rel_par < config.rel_tol and rel_ll < config.loglik_rel_tol:
            converged = True
            break

    if not converged:
        warnings.warn(
            f"EM stopped at max_iter={config.max_iter} EM maps without converging",
            NotConvergedWarning,
        )
    moments = e_step(solver, y_tilde, x_design)
    return FittedModel(
        params=params,
        moments=moments,
        loglik_trace=np.asarray(trace),
        converged=converged,
        n_iter=n_iter,
        n_em_maps=n_maps,
        monotone_violations=violations,
        squarem_fallbacks=fallbacks,
        solver=solver,
        x_design=x_design,
        wall_time=time.perf_counter() - t_start,
    )


def compute_bic(fitted, y_tilde=None, x_design=None):
    """BIC = -2 log L + q ln M with q = p + r(r+1)/2 + (1 frk | 2 fgp).

    The parameter count includes every free element of K; the -2 log L term
    is Eq.-style marginal (up to the constant dropped throughout).
    """
    p = fitted.params.beta.size
    r = fitted.params.r
    q = p + r * (r + 1) // 2 + (1 if fitted.params.kind == FRK else 2)
    if y_tilde is not None:
        x = fitted.x_design if x_design is None else x_design
        ll = neg2_loglik(fitted.solver, y_tilde, x)
    else:
        ll = float(fitted.loglik_trace[-1])
    return ll + q * np.log(fitted.solver.ws.m)
