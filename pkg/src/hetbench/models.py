"""Penalized GLM fitting: IRLS logistic regression, ridge and lasso.

All objectives are scaled per observation.  The intercept (when the basis
has one) is never penalized.

    logistic:  mean[z*eta - log(1 + exp(eta))] - l2/2 * ||b||^2   (maximized)
    ridge:     1/(2n) ||y - X b||^2 + l2/2 * ||b||^2
    lasso:     1/(2n) ||y - X b||^2 + l1 * ||b||_1   (columns standardized)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit, log_expit

from .design import DesignBasis

LOGISTIC_TOL = 1e-8
RIDGE_TOL = 1e-10
LASSO_TOL = 1e-10
KKT_TOL = 1e-8


class ConvergenceError(RuntimeError):
    pass


class SingularDesignError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class FittedModel:
    kind: str
    basis: DesignBasis
    coefficients: np.ndarray
    regularization: float
    iterations: int
    grad_norm: float

    def linear_predictor(self, data) -> np.ndarray:
        return self.basis.matrix(data) @ self.coefficients

    def predict(self, data) -> np.ndarray:
        eta = self.linear_predictor(data)
        return expit(eta) if self.kind == "logistic" else eta

    @property
    def named_coefficients(self) -> dict[str, float]:
        return dict(zip(self.basis.names, self.coefficients.tolist()))


def _penalty_mask(basis: DesignBasis) -> np.ndarray:
    mask = np.ones(basis.width)
    if basis.intercept:
        mask[0] = 0.0
    return mask


# ---------------------------------------------------------------------------
# logistic regression


def logistic_objective(beta, X, z, l2=0.0, mask=None) -> float:
    beta = np.asarray(beta, float)
    mask = np.ones_like(beta) if mask is None else mask
    eta = X @ beta
    # z*eta - log(1+e^eta) == z*log_expit(eta) + (1-z)*log_expit(-eta)
    ll = np.mean(z * log_expit(eta) + (1 - z) * log_expit(-eta))
    return float(ll - 0.5 * l2 * np.sum(mask * beta ** 2))


def logistic_gradient(beta, X, z, l2=0.0, mask=None) -> np.ndarray:
    beta = np.asarray(beta, float)
    mask = np.ones_like(beta) if mask is None else mask
    return X.T @ (z - expit(X @ beta)) / len(z) - l2 * mask * beta


def fit_logistic(data, basis: DesignBasis, l2: float = 0.0, target: str = "z",
                 tol: float = LOGISTIC_TOL, max_iter: int = 100) -> FittedModel:
    """Newton / IRLS with step halving on the penalized mean log-likelihood."""
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    z = np.asarray(data[target], dtype=float)
    if not (np.any(z == 1) and np.any(z == 0)):
        raise ValueError("both classes must be present in the response")
    X = basis.matrix(data)
    mask = _penalty_mask(basis)
    beta = np.zeros(X.shape[1])
    obj = logistic_objective(beta, X, z, l2, mask)
    grad = logistic_gradient(beta, X, z, l2, mask)
    n = len(z)
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        w = p * (1 - p)
        hess = (X.T * w) @ X / n + l2 * np.diag(mask)
        try:
            step = scipy.linalg.solve(hess, grad, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            cand_obj = logistic_objective(cand, X, z, l2, mask)
            if cand_obj >= obj - 1e-15 or t < 1e-10:
                break
            t *= 0.5
        beta, obj = cand, cand_obj
        grad = logistic_gradient(beta, X, z, l2, mask)
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if gnorm <= tol:
            beta, gnorm = _newton_polish(beta, X, z, l2, mask, gnorm)
            return FittedModel("logistic", basis, beta, float(l2), it, gnorm)
        if l2 == 0 and np.max(np.abs(X @ beta)) > 35:
            break
    raise ConvergenceError(
        "logistic fit did not converge; the classes look (quasi-)separable, "
        "use a ridge penalty l2 > 0")


def _newton_polish(beta, X, z, l2, mask, gnorm):
    # one extra full step: quadratic convergence takes the error well below tol
    p = expit(X @ beta)
    hess = (X.T * (p * (1 - p))) @ X / len(z) + l2 * np.diag(mask)
    try:
        cand = beta + scipy.linalg.solve(hess, logistic_gradient(beta, X, z, l2, mask),
                                         assume_a="pos")
    except (np.linalg.LinAlgError, ValueError):
        return beta, gnorm
    g = float(np.max(np.abs(logistic_gradient(cand, X, z, l2, mask)))) if cand.size else 0.0
    return (cand, g) if g <= gnorm else (beta, gnorm)


# ---------------------------------------------------------------------------
# ridge


def _equilibration(A) -> np.ndarray:
    d = np.sqrt(np.abs(np.diag(A)))
    return np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1.0)


def _normal_solve(gram, rhs, l2, mask):
    A = gram + l2 * np.diag(mask)
    # symmetric diagonal scaling keeps spline columns of very different size well posed
    s = _equilibration(A)
    As = A * np.outer(s, s)
    b = s * scipy.linalg.solve(As, s * rhs, assume_a="sym")
    # one round of iterative refinement tightens the residual for stiff designs
    b = b + s * scipy.linalg.solve(As, s * (rhs - A @ b), assume_a="sym")
    return A, b


def fit_ridge(data, basis: DesignBasis, target: str = "y", l2: float = 0.0,
              weights=None) -> FittedModel:
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    X = basis.matrix(data)
    y = np.asarray(data[target], dtype=float)
    if len(y) < 1:
        raise ValueError("need at least one row")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    sw = w.sum()
    gram = (X.T * w) @ X / sw
    rhs = X.T @ (w * y) / sw
    mask = _penalty_mask(basis)
    if l2 == 0:
        s = _equilibration(gram)
        eig = np.linalg.eigvalsh(gram * np.outer(s, s))
        if eig.size and eig[0] <= 1e-12 * max(eig[-1], 1e-300):
            raise SingularDesignError("normal equations are singular; use a ridge penalty l2 > 0")
    A, beta = _normal_solve(gram, rhs, l2, mask)
    grad = rhs - A @ beta
    return FittedModel("ridge", basis, beta, float(l2), 1,
                       float(np.max(np.abs(grad))) if grad.size else 0.0)


# ---------------------------------------------------------------------------
# lasso


def soft_threshold(x: float, t: float) -> float:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def kkt_residual(gram, rhs, beta, l1, penalized) -> np.ndarray:
    """Distance of the minimal subgradient from zero, per coordinate."""
    grad = gram @ beta - rhs
    lam = l1 * penalized
    out = np.where(beta != 0, np.abs(grad + lam * np.sign(beta)),
                   np.maximum(np.abs(grad) - lam, 0.0))
    return out


def lasso_cd(gram, rhs, l1: float, penalized=None, beta0=None, tol: float = LASSO_TOL,
             kkt_tol: float = KKT_TOL, max_sweeps: int = 100_000) -> tuple[np.ndarray, int]:
    """Cyclic coordinate descent for ``1/2 b'Gb - c'b + l1 * sum(pen_j |b_j|)``.

    ``gram`` and ``rhs`` are the (weighted, scaled) cross products.  Finishes
    with an exact solve on the active set with the signs frozen, accepted only
    if it keeps the signs and satisfies the KKT conditions.
    """
    p = len(rhs)
    penalized = np.ones(p) if penalized is None else np.asarray(penalized, float)
    beta = np.zeros(p) if beta0 is None else np.array(beta0, float)
    diag = np.diag(gram).copy()
    live = diag > 0
    beta[~live] = 0.0
    resid = rhs - gram @ beta
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        max_delta = 0.0
        for j in np.flatnonzero(live):
            old = beta[j]
            partial = resid[j] + diag[j] * old
            new = soft_threshold(partial, l1 * penalized[j]) / diag[j]
            if new != old:
                delta = new - old
                resid -= gram[:, j] * delta
                beta[j] = new
                max_delta = max(max_delta, abs(delta))
        if max_delta <= tol:
            if kkt_residual(gram, rhs, beta, l1, penalized)[live].max(initial=0.0) <= kkt_tol:
                break
            polished = _polish(gram, rhs, beta, l1, penalized)
            if polished is not None:
                beta = polished
                break

    polished = _polish(gram, rhs, beta, l1, penalized)
    if polished is not None:
        beta = polished
    return beta, sweeps


def _polish(gram, rhs, beta, l1, penalized):
    active = np.flatnonzero(beta != 0)
    if active.size == 0:
        return None
    sign = np.sign(beta[active])
    try:
        sub = scipy.linalg.solve(gram[np.ix_(active, active)],
                                 rhs[active] - l1 * penalized[active] * sign, assume_a="sym")
    except (np.linalg.LinAlgError, ValueError):
        return None
    if np.any(np.sign(sub) != sign):
        return None
    cand = np.zeros_like(beta)
    cand[active] = sub
    old = kkt_residual(gram, rhs, beta, l1, penalized).max()
    new = kkt_residual(gram, rhs, cand, l1, penalized).max()
    return cand if new <= old else None


@dataclass(frozen=True)
class Standardized:
    X: np.ndarray
    y: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    y_center: float


def standardize_design(X: np.ndarray, y: np.ndarray, intercept: bool) -> Standardized:
    """Center (if there is an intercept column) and scale the non-intercept columns."""
    Z = X[:, 1:] if intercept else X
    center = Z.mean(axis=0) if intercept else np.zeros(Z.shape[1])
    scale = Z.std(axis=0) if intercept else np.sqrt(np.mean(Z ** 2, axis=0))
    scale = np.where(scale > 0, scale, 0.0)
    safe = np.where(scale > 0, scale, 1.0)
    Zs = (Z - center) / safe * (scale > 0)
    y_center = float(y.mean()) if intercept else 0.0
    return Standardized(Zs, y - y_center, center, scale, y_center)


def fit_lasso(data, basis: DesignBasis, target: str = "y", l1: float = 0.0,
              tol: float = LASSO_TOL) -> FittedModel:
    if l1 < 0:
        raise ValueError("l1 must be >= 0")
    X = basis.matrix(data)
    y = np.asarray(data[target], dtype=float)
    if len(y) == 0:
        raise ValueError("cannot fit a lasso on empty data")
    st = standardize_design(X, y, basis.intercept)
    n = len(y)
    gram = st.X.T @ st.X / n
    rhs = st.X.T @ st.y / n
    b_std, sweeps = lasso_cd(gram, rhs, l1, tol=tol)
    kkt = kkt_residual(gram, rhs, b_std, l1, np.ones(len(rhs)))
    live = st.scale > 0
    b = np.where(live, b_std / np.where(live, st.scale, 1.0), 0.0)
    if basis.intercept:
        coef = np.concatenate([[st.y_center - st.center @ b], b])
    else:
        coef = b
    return FittedModel("lasso", basis, coef, float(l1), sweeps,
                       float(kkt[live].max(initial=0.0)))


def lasso_null_penalty(data, basis: DesignBasis, target: str = "y") -> float:
    """Smallest l1 at which every non-intercept coefficient is zero."""
    X = basis.matrix(data)
    y = np.asarray(data[target], dtype=float)
    st = standardize_design(X, y, basis.intercept)
    return float(np.max(np.abs(st.X.T @ st.y)) / len(y)) if st.X.shape[1] else 0.0
