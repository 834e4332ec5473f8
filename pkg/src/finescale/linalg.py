"""Sparse SPD linear algebra built on banded LAPACK kernels.

The Markov-random-field precision matrices used in this package come from
neighborhood graphs on lattices or near-planar grids. After a reverse
Cuthill-McKee reordering they are banded with small bandwidth, so instead of
a general sparse Cholesky (unavailable in scipy) we factor them with
LAPACK's banded routines: O(n * bw^2) factorization, O(n * bw) solves, and
an O(n * bw^2) Takahashi-style recursion for marginal variances.

All factorizations are deterministic; an ordering computed once for a
sparsity pattern can be reused across matrices sharing that pattern.
"""

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded, solve_banded
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import NotPositiveDefiniteError


def rcm_ordering(pattern):
    """Reverse Cuthill-McKee ordering for a symmetric sparsity pattern."""
    return np.asarray(reverse_cuthill_mckee(sp.csr_matrix(pattern), symmetric_mode=True))


def _lower_band(mat_perm, n):
    """Extract LAPACK lower-band storage ab[i, j] = M[i + j, j] from a permuted matrix."""
    coo = sp.coo_matrix(mat_perm)
    mask = coo.row >= coo.col
    rows = coo.row[mask]
    cols = coo.col[mask]
    vals = coo.data[mask]
    bw = int(np.max(rows - cols)) if rows.size else 0
    ab = np.zeros((bw + 1, n))
    # duplicate entries accumulate, matching sparse semantics
    np.add.at(ab, (rows - cols, cols), vals)
    return ab, bw


class BandedCholesky:
    """Cholesky factorization of a sparse SPD matrix via band reduction.

    Parameters
    ----------
    mat : scipy sparse matrix, symmetric positive definite
    perm : optional precomputed fill-reducing permutation (see rcm_ordering)
    """

    def __init__(self, mat, perm=None):
        mat = sp.csr_matrix(mat)
        n = mat.shape[0]
        if mat.shape[0] != mat.shape[1]:
            raise ValueError("matrix must be square")
        if perm is None:
            perm = rcm_ordering(mat)
        self.n = n
        self.perm = perm
        self._mat = mat
        mp = mat[perm][:, perm]
        ab, bw = _lower_band(mp, n)
        self.bandwidth = bw
        try:
            self._factor = cholesky_banded(ab, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"banded Cholesky failed: {exc}") from exc
        if np.any(self._factor[0] <= 0):
            raise NotPositiveDefiniteError("banded Cholesky produced a non-positive pivot")
        self._upper_t = None

    @property
    def logdet(self):
        """log determinant of the factored matrix."""
        return 2.0 * float(np.sum(np.log(self._factor[0])))

    def solve(self, b):
        """Solve M x = b for b of shape (n,) or (n, k)."""
        b = np.asarray(b, dtype=float)
        bp = b[self.perm]
        xp = cho_solve_banded((self._factor, True), bp)
        x = np.empty_like(xp)
        x[self.perm] = xp
        return x

    def _transpose_band(self):
        # upper-band storage of L^T for solve_banded((0, bw), ...)
        if self._upper_t is None:
            bw, n = self.bandwidth, self.n
            ut = np.zeros((bw + 1, n))
            for k in range(bw + 1):
                if n - k > 0:
                    ut[bw - k, k:n] = self._factor[k, : n - k]
            self._upper_t = ut
        return self._upper_t

    def sample_whitened(self, z):
        """Map iid standard normals z to a draw with covariance M^{-1}.

        Solves L^T x = z in permuted space (M_perm = L L^T) and undoes the
        permutation; deterministic in z.
        """
        z = np.asarray(z, dtype=float)
        xp = solve_banded((0, self.bandwidth), self._transpose_band(), z)
        x = np.empty_like(xp)
        x[self.perm] = xp
        return x

    def inverse_diagonal(self):
        """diag(M^{-1}) via the band-closed Takahashi recursion.

        Runs backward over columns keeping a rolling (bw+1)^2 window of
        inverse entries; O(n * bw^2) time, O(bw^2) extra space.
        """
        cb = self._factor
        bw, n = self.bandwidth, self.n
        diag_p = np.empty(n)
        # T[p, q] = Sigma[j + p, j + q] for the current column j
        T = np.zeros((bw + 1, bw + 1))
        e0 = np.zeros(bw + 1)
        e0[0] = 1.0
        for j in range(n - 1, -1, -1):
            ljj = cb[0, j]
            m = min(bw, n - 1 - j)
            lcol = np.zeros(bw)
            if m > 0:
                lcol[:m] = cb[1 : m + 1, j]
            col = (e0 / ljj - T[1:, :].T @ lcol) / ljj
            diag_p[j] = col[0]
            # shift window down-right and install the new row/column
            T[1:, 1:] = T[:bw, :bw]
            T[0, :] = col
            T[:, 0] = col
        diag = np.empty(n)
        diag[self.perm] = diag_p
        return diag


def extreme_eigenvalues(mat, tol=1e-8, max_iter=20000):
    """Smallest and largest eigenvalues of a sparse symmetric matrix.

    Shifted power iteration with a deterministic start vector; the shift
    (Gershgorin bound) guarantees the dominant eigenvalue of the shifted
    operator is the one sought even for symmetric spectra.
    """
    mat = sp.csr_matrix(mat)
    n = mat.shape[0]
    if n == 1:
        v = float(mat[0, 0])
        return v, v
    shift = float(np.max(np.abs(mat).sum(axis=1))) + 1.0

    def _top(op_sign):
        # op = shift * I + op_sign * mat; returns extreme eigenvalue of mat
        v = np.ones(n) + np.linspace(0.0, 0.5, n)
        v /= np.linalg.norm(v)
        prev = np.inf
        for _ in range(max_iter):
            w = shift * v + op_sign * (mat @ v)
            nw = np.linalg.norm(w)
            v = w / nw
            ray = float(v @ (shift * v + op_sign * (mat @ v)))
            if abs(ray - prev) <= tol * max(1.0, abs(ray)):
                break
            prev = ray
        return op_sign * (ray - shift)

    return _top(-1.0), _top(1.0)


def car_gamma_bounds(proximity):
    """Admissible open interval for the CAR dependence parameter.

    For precision (I - gamma * H) / tau^2 positive definiteness requires
    gamma in (1/lambda_min, 1/lambda_max) where lambda are extreme
    eigenvalues of H (H has at least one edge so lambda_min < 0 < lambda_max).
    """
    lam_min, lam_max = extreme_eigenvalues(proximity)
    if lam_min >= 0 or lam_max <= 0:
        raise ValueError("proximity matrix must have negative and positive eigenvalues")
    return 1.0 / lam_min, 1.0 / lam_max


def chol_psd(mat, jitter_rel=1e-12):
    """Dense lower Cholesky with a single jittered retry.

    Raises NotPositiveDefiniteError if the matrix fails even with jitter
    jitter_rel * mean(diag) added to the diagonal.
    """
    mat = np.asarray(mat, dtype=float)
    try:
        return np.linalg.cholesky(mat), False
    except np.linalg.LinAlgError:
        bump = jitter_rel * max(float(np.mean(np.diag(mat))), 1e-300)
        try:
            return np.linalg.cholesky(mat + bump * np.eye(mat.shape[0])), True
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"dense Cholesky failed: {exc}") from exc
