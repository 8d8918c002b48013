"""ADMM solvers for the convex traffic/anomaly estimators.

Three variants share one splitting (auxiliary copies O of X and B of A so the
routing matrix never couples a prox step): the equality-constrained noiseless
program, its penalized least-squares counterpart, and the outlier-robust
extension with sparse link/flow outlier blocks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import DivergenceError, Observations, project_sampling, routing_entries


@dataclass
class AdmmConfig:
    """Solver knobs; `lam` weighs the l1 term of the constrained program,
    (lambda_star, lambda_1) the penalized ones, (lambda_y, lambda_z) outliers.

    Tolerances default to 1e-6 * (1 + ||Y||_F) when left unset.
    """

    lam: float | None = None
    lambda_star: float = 1.0
    lambda_1: float = 0.1
    lambda_y: float = 1.0
    lambda_z: float = 1.0
    c: float = 1.0
    max_iters: int = 2000
    tol_primal: float | None = None
    tol_dual: float | None = None

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("penalty coefficient must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        for name in ("lam", "tol_primal", "tol_dual"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive when set")
        for name in ("lambda_star", "lambda_1", "lambda_y", "lambda_z"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def resolved_tols(self, Y: np.ndarray) -> tuple[float, float]:
        base = 1e-6 * (1.0 + np.linalg.norm(Y))
        return (
            self.tol_primal if self.tol_primal is not None else base,
            self.tol_dual if self.tol_dual is not None else base,
        )


@dataclass
class AdmmState:
    """Primal/dual iterates of the splitting, exposed for inspection."""

    X: np.ndarray
    A: np.ndarray
    B: np.ndarray
    O: np.ndarray
    M_y: np.ndarray
    M_z: np.ndarray
    M_a: np.ndarray
    M_x: np.ndarray
    iteration: int = 0
    residuals: dict = field(default_factory=dict)


@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    residuals: dict
    objective: float | None = None
    wall_time: float = 0.0
    state: "AdmmState | None" = None

    @property
    def final_residuals(self) -> dict:
        return {k: v[-1] for k, v in self.residuals.items() if v}


def soft_threshold(M, tau: float):
    """Entrywise sgn(m) * max(|m| - tau, 0); the l1 prox."""
    if tau < 0:
        raise ValueError("threshold must be nonnegative")
    M = np.asarray(M, dtype=np.float64)
    return np.sign(M) * np.maximum(np.abs(M) - tau, 0.0)


def svt(M: np.ndarray, tau: float) -> np.ndarray:
    """Singular value thresholding, the nuclear-norm prox."""
    if tau < 0:
        raise ValueError("threshold must be nonnegative")
    M = np.asarray(M, dtype=np.float64)
    if not np.isfinite(M).all():
        raise ValueError("cannot take the SVD of a non-finite matrix")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    keep = s > 0
    if not keep.any():
        return np.zeros_like(M)
    return (U[:, keep] * s[keep]) @ Vt[keep]


class ColumnSolves:
    """Cached per-column solve handles for (scale*I + Pi_t + R' Piy_t R)^{-1}.

    Columns sharing a mask pattern share one factorization.  `apply` treats
    each column independently, so results do not depend on column ordering.
    """

    def __init__(self, R: np.ndarray, mask: np.ndarray, diag_scale: float = 1.0,
                 link_mask: np.ndarray | None = None):
        R = np.asarray(R, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        F = R.shape[1]
        T = mask.shape[1]
        if mask.shape[0] != F:
            raise ValueError("mask rows must match routing columns")
        if link_mask is not None:
            link_mask = np.asarray(link_mask, dtype=bool)
            if link_mask.shape != (R.shape[0], T):
                raise ValueError("link mask must be links-by-periods")
        self._R = R
        self._mask = mask
        self._link_mask = link_mask
        self._scale = float(diag_scale)
        base_gram = R.T @ R if link_mask is None else None
        inverses: list[np.ndarray] = []
        seen: dict = {}
        index = np.empty(T, dtype=int)
        eye = np.eye(F)
        for t in range(T):
            key = mask[:, t].tobytes()
            if link_mask is not None:
                key = (key, link_mask[:, t].tobytes())
            if key not in seen:
                if base_gram is None:
                    Rm = R[link_mask[:, t]]
                    G = self._scale * eye + Rm.T @ Rm
                else:
                    G = self._scale * eye + base_gram
                obs = np.flatnonzero(mask[:, t])
                G[obs, obs] += 1.0
                inverses.append(cho_solve(cho_factor(G), eye))
                seen[key] = len(inverses) - 1
            index[t] = seen[key]
        self._inverses = inverses
        self._index = index

    @property
    def n_patterns(self) -> int:
        return len(self._inverses)

    def system_matrix(self, t: int) -> np.ndarray:
        """The matrix whose inverse column t is solved against (for checks)."""
        R, mask = self._R, self._mask
        if self._link_mask is None:
            G = self._scale * np.eye(R.shape[1]) + R.T @ R
        else:
            Rm = R[self._link_mask[:, t]]
            G = self._scale * np.eye(R.shape[1]) + Rm.T @ Rm
        obs = np.flatnonzero(mask[:, t])
        G[obs, obs] += 1.0
        return G

    def apply_column(self, t: int, v: np.ndarray) -> np.ndarray:
        return self._inverses[self._index[t]] @ v

    def apply(self, V: np.ndarray) -> np.ndarray:
        out = np.empty_like(V)
        for t in range(V.shape[1]):
            out[:, t] = self._inverses[self._index[t]] @ V[:, t]
        return out


def precompute_column_inverses(routing, mask, diag_scale: float = 1.0,
                               link_mask: np.ndarray | None = None) -> ColumnSolves:
    """Build the per-column solve handles used by all ADMM variants."""
    R = routing_entries(routing)
    mask = mask.mask if hasattr(mask, "mask") else np.asarray(mask, dtype=bool)
    return ColumnSolves(R, mask, diag_scale=diag_scale, link_mask=link_mask)


def _check_finite(M: np.ndarray, k: int):
    if not np.isfinite(M).all():
        raise DivergenceError(f"non-finite iterate at iteration {k}", iteration=k)


def default_lambda(F: int, T: int) -> float:
    return 1.0 / np.sqrt(max(F, T))


def admm_solve_p2(obs: Observations, routing, cfg: AdmmConfig | None = None):
    """Equality-constrained nuclear + l1 recovery from noiseless counts.

    Returns (X_hat, A_hat, report).  Terminates when all four constraint
    residuals drop below tol_primal and the iterate change below tol_dual.
    """
    cfg = cfg or AdmmConfig()
    R = routing_entries(routing)
    Y, Z, mask = obs.link_counts, obs.flow_counts, obs.mask.mask
    F, T = Z.shape
    lam = cfg.lam if cfg.lam is not None else default_lambda(F, T)
    c = cfg.c
    tol_primal, tol_dual = cfg.resolved_tols(Y)
    handles = ColumnSolves(R, mask, diag_scale=1.0)

    X = np.zeros((F, T))
    A = np.zeros((F, T))
    B = np.zeros((F, T))
    O = np.zeros((F, T))
    M_y = np.zeros_like(Y)
    M_z = np.zeros((F, T))
    M_a = np.zeros((F, T))
    M_x = np.zeros((F, T))
    RtY = R.T @ Y
    ry_mat = Y.copy()
    rz_mat = Z.copy()

    hist: dict = {k: [] for k in ("r_y", "r_z", "r_ba", "r_ox", "delta")}
    start = time.perf_counter()
    converged = False
    k = 0
    for k in range(cfg.max_iters):
        M_y += c * ry_mat
        M_z += c * rz_mat
        M_a += c * (B - A)
        M_x += c * (O - X)
        X_old, A_old = X, A

        A = soft_threshold(B + M_a / c, lam / c)
        dual_term = (R.T @ M_y + M_z - M_x) / c
        O = handles.apply(X + Z + RtY - (np.where(mask, B, 0.0) + R.T @ (R @ B)) + dual_term)
        X = svt(O + M_x / c, 1.0 / c)
        dual_term = (R.T @ M_y + M_z - M_a) / c
        B = handles.apply(A + Z + RtY - (np.where(mask, O, 0.0) + R.T @ (R @ O)) + dual_term)
        _check_finite(O, k)
        _check_finite(X, k)

        OB = O + B
        ry_mat = Y - R @ OB
        rz_mat = np.where(mask, Z - OB, 0.0)
        hist["r_y"].append(float(np.linalg.norm(ry_mat)))
        hist["r_z"].append(float(np.linalg.norm(rz_mat)))
        hist["r_ba"].append(float(np.linalg.norm(B - A)))
        hist["r_ox"].append(float(np.linalg.norm(O - X)))
        delta = max(np.linalg.norm(X - X_old), np.linalg.norm(A - A_old))
        hist["delta"].append(float(delta))
        if (
            max(hist["r_y"][-1], hist["r_z"][-1], hist["r_ba"][-1], hist["r_ox"][-1])
            < tol_primal
            and delta < tol_dual
        ):
            converged = True
            break
    report = ConvergenceReport(
        converged=converged,
        iterations=k + 1,
        residuals=hist,
        wall_time=time.perf_counter() - start,
        state=AdmmState(X=X, A=A, B=B, O=O, M_y=M_y, M_z=M_z, M_a=M_a, M_x=M_x,
                        iteration=k + 1, residuals=hist),
    )
    return X, A, report


def p1_objective(X, A, obs: Observations, routing, lambda_star: float, lambda_1: float) -> float:
    R = routing_entries(routing)
    fit_y = 0.5 * np.linalg.norm(obs.link_counts - R @ (X + A)) ** 2
    fit_z = 0.5 * np.linalg.norm(project_sampling(obs.mask, obs.flow_counts - X - A)) ** 2
    return float(
        fit_y
        + fit_z
        + lambda_star * np.linalg.svd(X, compute_uv=False).sum()
        + lambda_1 * np.abs(A).sum()
    )


def admm_solve_p1(obs: Observations, routing, cfg: AdmmConfig | None = None):
    """Penalized estimator: quadratic data fit plus nuclear and l1 penalties."""
    cfg = cfg or AdmmConfig()
    R = routing_entries(routing)
    Y, Z, mask = obs.link_counts, obs.flow_counts, obs.mask.mask
    F, T = Z.shape
    c = cfg.c
    tol_primal, tol_dual = cfg.resolved_tols(Y)
    handles = ColumnSolves(R, mask, diag_scale=c)

    X = np.zeros((F, T))
    A = np.zeros((F, T))
    B = np.zeros((F, T))
    O = np.zeros((F, T))
    M_a = np.zeros((F, T))
    M_x = np.zeros((F, T))
    RtY = R.T @ Y

    hist: dict = {k: [] for k in ("r_ba", "r_ox", "delta")}
    start = time.perf_counter()
    converged = False
    k = 0
    for k in range(cfg.max_iters):
        M_a += c * (B - A)
        M_x += c * (O - X)
        X_old, A_old = X, A

        A = soft_threshold(B + M_a / c, cfg.lambda_1 / c)
        O = handles.apply(c * X - M_x + RtY + Z - (np.where(mask, B, 0.0) + R.T @ (R @ B)))
        X = svt(O + M_x / c, cfg.lambda_star / c)
        B = handles.apply(c * A - M_a + RtY + Z - (np.where(mask, O, 0.0) + R.T @ (R @ O)))
        _check_finite(O, k)
        _check_finite(X, k)

        hist["r_ba"].append(float(np.linalg.norm(B - A)))
        hist["r_ox"].append(float(np.linalg.norm(O - X)))
        delta = max(np.linalg.norm(X - X_old), np.linalg.norm(A - A_old))
        hist["delta"].append(float(delta))
        if max(hist["r_ba"][-1], hist["r_ox"][-1]) < tol_primal and delta < tol_dual:
            converged = True
            break
    report = ConvergenceReport(
        converged=converged,
        iterations=k + 1,
        residuals=hist,
        objective=p1_objective(X, A, obs, routing, cfg.lambda_star, cfg.lambda_1),
        wall_time=time.perf_counter() - start,
    )
    return X, A, report


def p6_objective(X, A, O_y, O_z, obs: Observations, routing, link_mask, cfg: AdmmConfig) -> float:
    R = routing_entries(routing)
    res_y = np.where(link_mask, obs.link_counts - R @ (X + A) - O_y, 0.0)
    res_z = project_sampling(obs.mask, obs.flow_counts - X - A - O_z)
    return float(
        0.5 * np.linalg.norm(res_y) ** 2
        + 0.5 * np.linalg.norm(res_z) ** 2
        + cfg.lambda_star * np.linalg.svd(X, compute_uv=False).sum()
        + cfg.lambda_1 * np.abs(A).sum()
        + cfg.lambda_y * np.abs(O_y).sum()
        + cfg.lambda_z * np.abs(O_z).sum()
    )


def admm_solve_p6(obs: Observations, routing, cfg: AdmmConfig | None = None,
                  link_mask: np.ndarray | None = None):
    """Outlier-robust variant: masked link counts plus sparse outlier blocks.

    Returns (X_hat, A_hat, O_y_hat, O_z_hat, report).
    """
    cfg = cfg or AdmmConfig()
    R = routing_entries(routing)
    Y, Z, mask = obs.link_counts, obs.flow_counts, obs.mask.mask
    F, T = Z.shape
    if link_mask is None:
        link_mask = np.ones(Y.shape, dtype=bool)
    else:
        link_mask = np.asarray(link_mask, dtype=bool)
        if link_mask.shape != Y.shape:
            raise ValueError("link mask must match link counts")
    c = cfg.c
    tol_primal, tol_dual = cfg.resolved_tols(Y)
    handles = ColumnSolves(R, mask, diag_scale=c, link_mask=link_mask)

    X = np.zeros((F, T))
    A = np.zeros((F, T))
    B = np.zeros((F, T))
    O = np.zeros((F, T))
    O_y = np.zeros_like(Y)
    O_z = np.zeros((F, T))
    M_a = np.zeros((F, T))
    M_x = np.zeros((F, T))

    hist: dict = {k: [] for k in ("r_ba", "r_ox", "delta")}
    start = time.perf_counter()
    converged = False
    k = 0
    for k in range(cfg.max_iters):
        M_a += c * (B - A)
        M_x += c * (O - X)
        X_old, A_old = X, A
        Oy_old, Oz_old = O_y, O_z

        data_y = R.T @ np.where(link_mask, Y - O_y, 0.0)
        data_z = Z - O_z  # both supported on the flow mask
        A = soft_threshold(B + M_a / c, cfg.lambda_1 / c)
        gram_b = R.T @ np.where(link_mask, R @ B, 0.0)
        O = handles.apply(c * X - M_x + data_y + data_z - (np.where(mask, B, 0.0) + gram_b))
        X = svt(O + M_x / c, cfg.lambda_star / c)
        gram_o = R.T @ np.where(link_mask, R @ O, 0.0)
        B = handles.apply(c * A - M_a + data_y + data_z - (np.where(mask, O, 0.0) + gram_o))
        OB = O + B
        O_y = soft_threshold(np.where(link_mask, Y - R @ OB, 0.0), cfg.lambda_y)
        O_z = soft_threshold(np.where(mask, Z - OB, 0.0), cfg.lambda_z)
        _check_finite(O, k)
        _check_finite(X, k)

        hist["r_ba"].append(float(np.linalg.norm(B - A)))
        hist["r_ox"].append(float(np.linalg.norm(O - X)))
        delta = max(
            np.linalg.norm(X - X_old),
            np.linalg.norm(A - A_old),
            np.linalg.norm(O_y - Oy_old),
            np.linalg.norm(O_z - Oz_old),
        )
        hist["delta"].append(float(delta))
        if max(hist["r_ba"][-1], hist["r_ox"][-1]) < tol_primal and delta < tol_dual:
            converged = True
            break
    report = ConvergenceReport(
        converged=converged,
        iterations=k + 1,
        residuals=hist,
        objective=p6_objective(X, A, O_y, O_z, obs, routing, link_mask, cfg),
        wall_time=time.perf_counter() - start,
    )
    return X, A, O_y, O_z, report
