"""Dense, slow, obviously-correct reference implementations.

Everything here materializes full covariance matrices and uses textbook
formulas; it exists to validate the factored fast paths in tests and in the
small-instance verification report. A hard guard keeps these routines off
any production-size problem.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericFailureError, TooLargeError
from .model import FRK

DENSE_GUARD_N = 400


@dataclass(frozen=True)
class DenseModel:
    """Explicit fine and coarse covariance matrices for one parameter value."""

    sigma: np.ndarray
    coarse_sigma: np.ndarray
    a_dense: np.ndarray


def dense_assemble(params, agg, basis_matrix, proximity=None):
    """Full N x N covariance S K S^T + Sigma_delta + sigma2_eps I, plus A Sigma A^T."""
    n = basis_matrix.shape[0]
    if n > DENSE_GUARD_N:
        raise TooLargeError(f"dense reference limited to N <= {DENSE_GUARD_N}")
    s = np.asarray(basis_matrix.todense()) if hasattr(basis_matrix, "todense") else np.asarray(basis_matrix)
    sigma = s @ params.k_mat @ s.T
    if params.kind == FRK:
        sigma = sigma + params.sigma2_xi * np.eye(n)
    else:
        q = ((np.eye(n) - params.gamma * proximity.matrix.toarray()) / params.tau2)
        sigma = sigma + np.linalg.inv(q)
    sigma = sigma + params.sigma2_eps * np.eye(n)
    sigma = 0.5 * (sigma + sigma.T)
    a_dense = np.asarray(agg.matrix.todense())
    coarse = a_dense @ sigma @ a_dense.T
    return DenseModel(sigma=sigma, coarse_sigma=0.5 * (coarse + coarse.T), a_dense=a_dense)


def dense_condition(dense_model, y_tilde, mu):
    """Textbook Gaussian conditioning of the fine field on A Y = y_tilde."""
    a = dense_model.a_dense
    sigma = dense_model.sigma
    y_tilde = np.asarray(y_tilde, dtype=float)
    mu = np.asarray(mu, dtype=float)
    try:
        cross = np.linalg.solve(dense_model.coarse_sigma, a @ sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericFailureError(f"coarse covariance is singular: {exc}") from exc
    mean = mu + cross.T @ (y_tilde - a @ mu)
    cov = sigma - (a @ sigma).T @ cross
    return mean, 0.5 * (cov + cov.T)


def dense_d_matrix(params, agg, proximity=None):
    """Explicit D = [A Sigma_delta A^T + sigma2_eps A A^T]^{-1}."""
    a = np.asarray(agg.matrix.todense())
    m, n = a.shape
    if n > DENSE_GUARD_N:
        raise TooLargeError(f"dense reference limited to N <= {DENSE_GUARD_N}")
    if params.kind == FRK:
        core = (params.sigma2_xi + params.sigma2_eps) * (a @ a.T)
    else:
        q = (np.eye(n) - params.gamma * proximity.matrix.toarray()) / params.tau2
        core = a @ np.linalg.inv(q) @ a.T + params.sigma2_eps * (a @ a.T)
    return np.linalg.inv(core)


def dense_q_function(params, moments, y_tilde, agg, x_design, basis_matrix, proximity=None):
    """-2 Q(theta; moments): expected twice-negative complete-data objective.

    Derived directly as E[ -2 ln L_c ] under the posterior moments:
    ln|K| + ln|D^{-1}| + ||y - AX b - AS mu||_D^2
    + tr[((AS)^T D (AS) + K^{-1}) Sigma_eta] + mu^T K^{-1} mu  ... with the
    mu-quadratic in D absorbed into the residual term.
    """
    a = np.asarray(agg.matrix.todense())
    s = np.asarray(basis_matrix.todense()) if hasattr(basis_matrix, "todense") else np.asarray(basis_matrix)
    if s.shape[0] > DENSE_GUARD_N:
        raise TooLargeError(f"dense reference limited to N <= {DENSE_GUARD_N}")
    d = dense_d_matrix(params, agg, proximity=proximity)
    sign, logdet_d = np.linalg.slogdet(d)
    if sign <= 0:
        raise NumericFailureError("reference D matrix is not positive definite")
    sign_k, logdet_k = np.linalg.slogdet(params.k_mat)
    if sign_k <= 0:
        raise NumericFailureError("reference K matrix is not positive definite")
    k_inv = np.linalg.inv(params.k_mat)
    a_s = a @ s
    a_x = a @ np.asarray(x_design, dtype=float)
    mu, sig = moments.mu_eta, moments.sigma_eta
    e = np.asarray(y_tilde, dtype=float) - a_x @ params.beta - a_s @ mu
    p_d = a_s.T @ d @ a_s
    value = (
        logdet_k
        - logdet_d
        + float(e @ d @ e)
        + float(np.sum((p_d + k_inv) * sig))
        + float(mu @ k_inv @ mu)
    )
    return value


def dense_neg2_loglik(dense_model, y_tilde, ax_beta):
    """Eq.-style marginal objective evaluated with explicit matrices."""
    resid = np.asarray(y_tilde, dtype=float) - np.asarray(ax_beta, dtype=float)
    sign, logdet = np.linalg.slogdet(dense_model.coarse_sigma)
    if sign <= 0:
        raise NumericFailureError("dense coarse covariance is not positive definite")
    return logdet + float(resid @ np.linalg.solve(dense_model.coarse_sigma, resid))
