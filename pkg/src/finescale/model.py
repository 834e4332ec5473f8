"""Covariance structures and fast likelihood kernels for the two fine-scale models.

Both models share a low-rank component S K S^T driven by r basis functions.
They differ in the fine-scale remainder: independent noise (variance
sigma2_xi) for the low-rank-only model ("frk"), or a conditional
autoregression with sparse precision Q = (I - gamma * H) / tau^2 for the
fused model ("fgp"). Aggregated covariances A Sigma A^T are never formed:
solves use the Sherman-Morrison-Woodbury identity around the diagonal (or
sparse-precision) core, and log-determinants use Sylvester's identity, so
costs stay linear in the number of fine cells.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve, solve_triangular
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import (
    InvalidArgumentError,
    InvalidPartitionError,
    NotPositiveDefiniteError,
    NumericFailureError,
)
from .linalg import BandedCholesky, chol_psd, rcm_ordering

logger = logging.getLogger(__name__)

FRK = "frk"
FGP = "fgp"


@dataclass(frozen=True)
class ModelParams:
    """Parameter set for either model kind; sigma2_eps is fixed, not estimated."""

    kind: str
    beta: np.ndarray
    k_mat: np.ndarray
    sigma2_eps: float
    sigma2_xi: float | None = None
    tau2: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in (FRK, FGP):
            raise InvalidArgumentError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        k = np.asarray(self.k_mat, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise InvalidArgumentError("K must be square")
        object.__setattr__(self, "k_mat", k)
        if self.sigma2_eps < 0:
            raise InvalidArgumentError("sigma2_eps must be >= 0")
        if self.kind == FRK:
            if self.sigma2_xi is None or self.sigma2_xi < 0:
                raise InvalidArgumentError("frk requires sigma2_xi >= 0")
        else:
            if self.tau2 is None or self.tau2 <= 0:
                raise InvalidArgumentError("fgp requires tau2 > 0")
            if self.gamma is None:
                raise InvalidArgumentError("fgp requires gamma")

    @property
    def r(self):
        return self.k_mat.shape[0]


@dataclass(frozen=True)
class CarPrecision:
    """Sparse CAR precision Q = (I - gamma * H) / tau^2 with its factorization."""

    gamma: float
    tau2: float
    q_mat: sp.csr_matrix
    chol: BandedCholesky = field(repr=False)


def car_precision(proximity, gamma, tau2, perm=None):
    """Build and factor the CAR precision; fails if gamma is inadmissible."""
    if tau2 <= 0:
        raise InvalidArgumentError("tau2 must be positive")
    h = proximity.matrix
    n = h.shape[0]
    q = (sp.identity(n, format="csr") - gamma * h) / tau2
    chol = BandedCholesky(q, perm=perm)  # raises NotPositiveDefiniteError
    return CarPrecision(gamma=float(gamma), tau2=float(tau2), q_mat=sp.csr_matrix(q), chol=chol)


def admissible_gamma_interval(proximity, tol=1e-8):
    """Open interval (1/lambda_min, 1/lambda_max) of SPD-preserving gamma values.

    Extreme eigenvalues come from Lanczos iteration with a fixed start
    vector (plain power iteration stalls on lattices, whose extreme
    eigenvalues are clustered); falls back to best estimates on
    non-convergence.
    """
    h = sp.csr_matrix(proximity.matrix)
    n = h.shape[0]
    if n < 2 or h.nnz == 0:
        raise InvalidArgumentError("proximity matrix must have at least one edge")
    v0 = np.ones(n) / np.sqrt(n)

    def _extreme(which):
        try:
            vals = eigsh(h, k=1, which=which, v0=v0, tol=tol, return_eigenvectors=False)
        except ArpackNoConvergence as exc:  # pragma: no cover
            vals = exc.eigenvalues
            if vals is None or len(vals) == 0:
                raise NumericFailureError("eigenvalue estimation failed") from exc
        return float(vals[0])

    lam_max = _extreme("LA")
    lam_min = _extreme("SA")
    if lam_min >= 0 or lam_max <= 0:
        raise NumericFailureError("proximity spectrum must straddle zero")
    return 1.0 / lam_min, 1.0 / lam_max


class ModelWorkspace:
    """Geometry-dependent constants shared by every parameter value.

    Holds the aggregated basis matrix A S, the diagonal of A A^T, the fixed
    sparse term A^T (sigma2_eps A A^T)^{-1} A for the fused model, and the
    fill-reducing ordering reused by every sparse factorization with this
    pattern.
    """

    def __init__(self, agg, basis_matrix, sigma2_eps, proximity=None):
        a = agg.matrix.tocsc()
        if np.any(a.getnnz(axis=0) > 1):
            raise InvalidPartitionError(
                "aggregation matrix must assign each fine cell to at most one coarse cell"
            )
        self.agg = agg
        self.s_mat = sp.csr_matrix(basis_matrix)
        self.n, self.r = self.s_mat.shape
        self.m = agg.m
        self.sigma2_eps = float(sigma2_eps)
        self.diag_aat = agg.diag_aat  # 1 / n_i
        if np.any(~np.isfinite(self.diag_aat)) or np.any(self.diag_aat <= 0):
            raise InvalidPartitionError("empty coarse cell in aggregation matrix")
        self.as_mat = np.asarray((agg.matrix @ self.s_mat).todense())
        self.proximity = proximity
        self.perm = None
        self.at_e_a = None
        self.gamma_interval = None
        if proximity is not None:
            if proximity.n != self.n:
                raise InvalidArgumentError("proximity size does not match grid size")
            if sigma2_eps <= 0:
                raise InvalidArgumentError("fgp requires sigma2_eps > 0")
            e_diag = 1.0 / (self.sigma2_eps * self.diag_aat)  # (sigma2_eps A A^T)^{-1}
            self.e_diag = e_diag
            self.at_e_a = sp.csr_matrix(
                (agg.matrix.T @ sp.diags(e_diag) @ agg.matrix)
            )
            pattern = (
                sp.identity(self.n, format="csr") + proximity.matrix + self.at_e_a
            ).tocsr()
            self.perm = rcm_ordering(pattern)
            self.gamma_interval = admissible_gamma_interval(proximity)


class FastSolver:
    """Factored representation of A Sigma A^T for one parameter value.

    Immutable once built; concurrent solves with distinct right-hand sides
    are safe. Parameter changes require building a new solver.
    """

    def __init__(self, params, workspace):
        if params.r != workspace.r:
            raise InvalidArgumentError("basis count mismatch between params and workspace")
        if params.kind == FGP and workspace.proximity is None:
            raise InvalidArgumentError("fgp solver needs a workspace with a proximity matrix")
        self.params = params
        self.ws = workspace
        ws = workspace

        chol_k, jittered = chol_psd(params.k_mat)
        if jittered:
            logger.warning("K required a diagonal jitter to factorize")
        self.chol_k = chol_k
        eye_r = np.eye(params.r)
        self.k_inv = cho_solve((chol_k, True), eye_r)
        self.logdet_k = 2.0 * float(np.sum(np.log(np.diag(chol_k))))

        if params.kind == FRK:
            total = params.sigma2_xi + params.sigma2_eps
            if total <= 0:
                raise InvalidArgumentError("sigma2_xi + sigma2_eps must be positive")
            self.d_diagonal = 1.0 / (total * ws.diag_aat)
            self.logdet_d_inv = float(np.sum(np.log(total * ws.diag_aat)))
            self.car = None
        else:
            self.d_diagonal = None
            self.car = car_precision(ws.proximity, params.gamma, params.tau2, perm=ws.perm)
            q_tilde = self.car.q_mat + ws.at_e_a
            try:
                self.chol_q_tilde = BandedCholesky(q_tilde, perm=ws.perm)
            except NotPositiveDefiniteError as exc:
                raise NumericFailureError(f"Q + A^T E A factorization failed: {exc}") from exc
            self.logdet_d_inv = (
                self.chol_q_tilde.logdet
                - self.car.chol.logdet
                + float(np.sum(np.log(params.sigma2_eps * ws.diag_aat)))
            )

        self.ds_mat = self.apply_d(ws.as_mat)  # D (A S), dense M x r
        self.p_mat = ws.as_mat.T @ self.ds_mat
        g = self.k_inv + self.p_mat
        g = 0.5 * (g + g.T)
        chol_g, jittered = chol_psd(g)
        if jittered:
            logger.warning("K^{-1} + (AS)^T D (AS) required a diagonal jitter")
        self.chol_g = chol_g
        self.logdet_g = 2.0 * float(np.sum(np.log(np.diag(chol_g))))

    # -- core operators ----------------------------------------------------

    def apply_d(self, v):
        """Apply D = [A Sigma_delta A^T + sigma2_eps A A^T]^{-1} to v (vector or matrix)."""
        v = np.asarray(v, dtype=float)
        if self.params.kind == FRK:
            return v * (self.d_diagonal if v.ndim == 1 else self.d_diagonal[:, None])
        ws = self.ws
        e = ws.e_diag if v.ndim == 1 else ws.e_diag[:, None]
        ev = e * v
        w = self.chol_q_tilde.solve(ws.agg.matrix.T @ ev)
        return ev - e * (ws.agg.matrix @ w)

    def solve_coarse(self, rhs):
        """Solve (A Sigma A^T) x = rhs via the low-rank Woodbury identity."""
        rhs = np.asarray(rhs, dtype=float)
        dr = self.apply_d(rhs)
        t = self.ws.as_mat.T @ dr
        u = cho_solve((self.chol_g, True), t)
        return dr - self.ds_mat @ u

    @property
    def logdet_coarse(self):
        """log det(A Sigma A^T) via Sylvester's identity."""
        return self.logdet_g + self.logdet_k + self.logdet_d_inv

    def apply_sigma_fine(self, v):
        """Apply the fine-level covariance Sigma to v without forming it."""
        v = np.asarray(v, dtype=float)
        ws = self.ws
        low = ws.s_mat @ (self.params.k_mat @ (ws.s_mat.T @ v))
        if self.params.kind == FRK:
            delta = self.params.sigma2_xi * v
        else:
            delta = self.car.chol.solve(v)
        return low + delta + self.params.sigma2_eps * v

    def apply_sigma_at(self, w):
        """Apply Sigma A^T to a coarse vector (or matrix of columns)."""
        return self.apply_sigma_fine(self.ws.agg.matrix.T @ np.asarray(w, dtype=float))

    def sigma_diagonal(self):
        """Marginal fine-level variances diag(Sigma)."""
        sl = self.ws.s_mat @ self.chol_k  # sparse @ dense -> dense
        low = np.asarray(np.square(sl)).sum(axis=1)
        if self.params.kind == FRK:
            delta = self.params.sigma2_xi
        else:
            delta = self.car.chol.inverse_diagonal()
        return low + delta + self.params.sigma2_eps

    def solve_g_half(self, t):
        """Solve L_G y = t where G = K^{-1} + (AS)^T D (AS) = L_G L_G^T."""
        return solve_triangular(self.chol_g, t, lower=True)


# -- module-level operation wrappers ----------------------------------------


def build_solver(params, agg, basis_matrix, proximity=None):
    """Convenience constructor: workspace + solver in one call."""
    ws = ModelWorkspace(
        agg, basis_matrix, params.sigma2_eps, proximity if params.kind == FGP else None
    )
    return FastSolver(params, ws)


def fine_cov_apply(solver, v):
    """Sigma @ v for the fine-level covariance implied by the solver's params."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != solver.ws.n:
        raise InvalidArgumentError("vector length does not match fine grid size")
    return solver.apply_sigma_fine(v)


def solve_coarse_cov(solver, rhs):
    """(A Sigma A^T)^{-1} rhs."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != solver.ws.m:
        raise InvalidArgumentError("vector length does not match coarse grid size")
    return solver.solve_coarse(rhs)


def logdet_coarse_cov(solver):
    """ln |A Sigma A^T|."""
    return solver.logdet_coarse


def neg2_loglik(solver, y_tilde, x_design, beta=None):
    """Twice-negative marginal log-likelihood of the coarse data (up to a constant)."""
    y_tilde = np.asarray(y_tilde, dtype=float)
    if y_tilde.shape[0] != solver.ws.m:
        raise InvalidArgumentError("y_tilde length does not match coarse grid size")
    if beta is None:
        beta = solver.params.beta
    ax_beta = solver.ws.agg.matrix @ (np.asarray(x_design, dtype=float) @ beta)
    resid = y_tilde - ax_beta
    return solver.logdet_coarse + float(resid @ solver.solve_coarse(resid))
