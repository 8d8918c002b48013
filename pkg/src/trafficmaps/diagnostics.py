"""Recovery-theory diagnostics at desk scale.

Dense orthonormal bases of the relevant matrix subspaces (routing nullspace,
sampling nullspace, their intersection, anomaly support, low-rank tangent
space) feed incoherence measures, the closed-form feasible-lambda range, and
a numerical dual-certificate construction that certifies unique optimality of
the constrained estimator on a given instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize

from .model import SamplingMask, SubspaceBundle, project_phi, routing_entries

SIZE_GUARD_CELLS = 20000


class SizeGuardError(RuntimeError):
    """Instance exceeds the dense-basis size guard."""


class NotLocallyIdentifiableError(RuntimeError):
    """The support/tangent/nullspace subspaces fail to form a direct sum."""


class TrivialNullspaceError(RuntimeError):
    """The routing matrix is injective, so no nullspace ambiguity exists."""


def _check_size(F: int, T: int):
    if F * T > SIZE_GUARD_CELLS:
        raise SizeGuardError(
            f"instance has {F * T} cells, above the dense-basis guard of {SIZE_GUARD_CELLS}"
        )


def _vec(M: np.ndarray) -> np.ndarray:
    return np.asarray(M, dtype=np.float64).ravel()


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal basis of a subspace of F-by-T matrices, vectorized columns."""

    vectors: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        V = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        F, T = self.shape
        if V.ndim != 2 or V.shape[0] != F * T:
            raise ValueError("basis rows must match the vectorized ambient space")
        if V.shape[1]:
            gram = V.T @ V
            if np.abs(gram - np.eye(V.shape[1])).max() > 1e-10:
                raise ValueError("basis columns are not orthonormal")
        V.setflags(write=False)
        object.__setattr__(self, "vectors", V)
        object.__setattr__(self, "shape", (int(F), int(T)))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def project(self, M: np.ndarray) -> np.ndarray:
        if self.dim == 0:
            return np.zeros(self.shape)
        coeff = self.vectors.T @ _vec(M)
        return (self.vectors @ coeff).reshape(self.shape)


def nullspace_R_basis(routing, periods: int) -> SubspaceBasis:
    """Basis of {H : R H = 0}: kernel vectors of R placed in each column slot."""
    R = routing_entries(routing)
    F = R.shape[1]
    _check_size(F, periods)
    K = null_space(R)
    d = K.shape[1]
    V = np.zeros((F * periods, d * periods))
    for i in range(d):
        for t in range(periods):
            V[t::periods, i * periods + t] = K[:, i]
    return SubspaceBasis(V, (F, periods))


def nullspace_Pi_basis(mask: SamplingMask) -> SubspaceBasis:
    """Canonical matrices supported on the unobserved entries."""
    F, T = mask.shape
    _check_size(F, T)
    hidden = np.flatnonzero(~mask.mask.ravel())
    V = np.zeros((F * T, hidden.size))
    V[hidden, np.arange(hidden.size)] = 1.0
    return SubspaceBasis(V, (F, T))


def intersect_nullspaces(routing, mask: SamplingMask) -> SubspaceBasis:
    """Basis of N_R intersected with N_Pi, assembled column by column."""
    R = routing_entries(routing)
    F, T = mask.shape
    if R.shape[1] != F:
        raise ValueError("mask rows must match routing columns")
    _check_size(F, T)
    cols = []
    for t in range(T):
        hidden = np.flatnonzero(~mask.mask[:, t])
        if hidden.size == 0:
            continue
        K = null_space(R[:, hidden])
        for i in range(K.shape[1]):
            v = np.zeros(F * T)
            v[hidden * T + t] = K[:, i]
            cols.append(v)
    V = np.column_stack(cols) if cols else np.zeros((F * T, 0))
    return SubspaceBasis(V, (F, T))


def omega_basis(support, shape: tuple[int, int]) -> SubspaceBasis:
    """Canonical matrices supported on the given (flow, time) index set."""
    F, T = shape
    _check_size(F, T)
    idx = sorted(f * T + t for f, t in support)
    V = np.zeros((F * T, len(idx)))
    V[idx, np.arange(len(idx))] = 1.0
    return SubspaceBasis(V, (F, T))


def phi_basis(bundle: SubspaceBundle) -> SubspaceBasis:
    """Orthonormal basis of the tangent space {U0 W1' + W2 V0'}.

    Built exactly as {U0[:, i] e_t'} plus {(I - P_U) columns times V0[:, i]'},
    giving r(F + T - r) orthonormal vectors without any orthogonalization pass.
    """
    F, T = bundle.shape
    _check_size(F, T)
    r = bundle.rank
    if r == 0:
        return SubspaceBasis(np.zeros((F * T, 0)), (F, T))
    U0, V0 = bundle.U0, bundle.V0
    G = null_space(U0.T)  # orthonormal basis of the orthogonal complement
    cols = np.empty((F * T, r * T + G.shape[1] * r))
    k = 0
    for i in range(r):
        for t in range(T):
            M = np.zeros((F, T))
            M[:, t] = U0[:, i]
            cols[:, k] = M.ravel()
            k += 1
    for j in range(G.shape[1]):
        for i in range(r):
            cols[:, k] = np.outer(G[:, j], V0[:, i]).ravel()
            k += 1
    return SubspaceBasis(cols, (F, T))


def _as_projector(sub, shape):
    if isinstance(sub, SubspaceBasis):
        return sub.project, sub.shape, sub.dim
    if callable(sub):
        if shape is None:
            raise ValueError("shape is required with callable projectors")
        return sub, tuple(shape), None
    raise TypeError("subspace must be a SubspaceBasis or a projector callable")


def mu(sub_a, sub_b, shape=None, tol: float = 1e-8, max_iters: int = 20000) -> float:
    """Incoherence of two matrix subspaces: sigma_max of P_A composed with P_B.

    Power iteration on X -> P_B(P_A(P_B(X))); accepts orthonormal bases or
    projector callables (pass `shape` with callables).  Returns a value in
    [0, 1]; zero subspaces give 0.
    """
    proj_a, shape_a, dim_a = _as_projector(sub_a, shape)
    proj_b, shape_b, dim_b = _as_projector(sub_b, shape)
    if shape_a != shape_b:
        raise ValueError("subspaces live in different ambient spaces")
    if dim_a == 0 or dim_b == 0:
        return 0.0
    rng = np.random.default_rng(12345)
    X = rng.standard_normal(shape_a)
    X = proj_b(X)
    n = np.linalg.norm(X)
    if n == 0:
        return 0.0
    X /= n
    lam = 0.0
    for _ in range(max_iters):
        Y = proj_b(proj_a(X))
        lam_new = float(np.sum(X * Y))
        nY = np.linalg.norm(Y)
        if nY == 0:
            return 0.0
        X = Y / nY
        if abs(lam_new - lam) <= 0.5 * tol * tol * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        lam = lam_new
    return float(min(np.sqrt(max(lam, 0.0)), 1.0))


def gammas(bundle: SubspaceBundle):
    """(gamma(U0), gamma(V0), gamma(U0, V0), eta): singular-vector spikiness."""
    U0, V0 = bundle.U0, bundle.V0
    if bundle.rank == 0:
        return 0.0, 0.0, 0.0, 0.0
    g_u = float(np.sqrt((U0**2).sum(axis=1).max()))
    g_v = float(np.sqrt((V0**2).sum(axis=1).max()))
    g_uv = float(np.abs(U0 @ V0.T).max())
    return g_u, g_v, g_uv, g_u + g_v


def _infty_to_spectral_ratio(basis: SubspaceBasis, coeff: np.ndarray) -> float:
    c = np.asarray(coeff, dtype=np.float64)
    n = np.linalg.norm(c)
    if n == 0:
        return 0.0
    X = (basis.vectors @ (c / n)).reshape(basis.shape)
    top = np.linalg.svd(X, compute_uv=False)[0]
    if top == 0:
        return 0.0
    return float(np.abs(X).max() / top)


def tau(routing, mask: SamplingMask, mode: str = "auto", seed: int = 0,
        basis: SubspaceBasis | None = None) -> float:
    """Largest entry magnitude over unit-spectral-norm nullspace-intersection elements.

    `exact` mode (intersection dimension <= 3) densely samples the coefficient
    sphere and polishes the best point; `lower_bound` mode reports the best of
    random probes and is explicitly only a lower bound.
    """
    if basis is None:
        basis = intersect_nullspaces(routing, mask)
    d = basis.dim
    if d == 0:
        return 0.0
    if mode == "auto":
        mode = "exact" if d <= 3 else "lower_bound"
    if mode == "exact" and d > 3:
        raise SizeGuardError(f"exact mode supports dimension <= 3, got {d}")
    if mode not in ("exact", "lower_bound"):
        raise ValueError(f"unknown mode {mode!r}")

    if mode == "exact":
        if d == 1:
            candidates = np.array([[1.0]])
        elif d == 2:
            ang = np.linspace(0.0, np.pi, 1441)
            candidates = np.column_stack([np.cos(ang), np.sin(ang)])
        else:
            n = 4000
            i = np.arange(n)
            phi_ang = np.arccos(1 - 2 * (i + 0.5) / n)
            golden = np.pi * (1 + np.sqrt(5.0)) * i
            candidates = np.column_stack(
                [np.sin(phi_ang) * np.cos(golden), np.sin(phi_ang) * np.sin(golden), np.cos(phi_ang)]
            )
    else:
        rng = np.random.default_rng(seed)
        candidates = rng.standard_normal((256, d))

    values = [_infty_to_spectral_ratio(basis, c) for c in candidates]
    order = np.argsort(values)[::-1]
    best = float(values[order[0]])
    for idx in order[: 3 if d > 1 else 1]:
        res = minimize(
            lambda c: -_infty_to_spectral_ratio(basis, c),
            candidates[idx],
            method="Nelder-Mead",
            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000},
        )
        best = max(best, float(-res.fun))
    return best


@dataclass(frozen=True)
class IncoherenceReport:
    """Incoherence parameters, the chi bound, and the feasible lambda range."""

    alpha: float
    beta: float
    xi: float
    nu: float
    eta: float
    tau: float
    gamma: float
    k_max_col: int
    chi: float
    f: float
    g: float
    h: float
    q: float
    e: float
    lambda_min: float
    lambda_max: float
    feasible: bool
    reason: str = ""


def check_recovery_conditions(
    alpha: float,
    beta: float,
    xi: float,
    nu: float,
    eta: float,
    tau: float,
    gamma: float,
    k_max_col: int,
    mu_npi_omega: float = 0.0,
    null_intersection_dim: int | None = None,
) -> IncoherenceReport:
    """Evaluate the closed-form recovery conditions and the lambda range.

    `mu_npi_omega` is the incoherence between the sampling nullspace and the
    anomaly support, needed for chi; a known-zero nullspace intersection
    (`null_intersection_dim == 0`) bypasses the chi condition.
    """
    for name, val, hi in (
        ("alpha", alpha, 1.0),
        ("beta", beta, 1.0),
        ("xi", xi, 1.0),
        ("nu", nu, 1.0),
        ("mu_npi_omega", mu_npi_omega, 1.0),
        ("eta", eta, 2.0),
        ("tau", tau, 1.0),
        ("gamma", gamma, 1.0),
    ):
        if not 0.0 <= val <= hi + 1e-12:
            raise ValueError(f"{name}={val} outside its valid range [0, {hi}]")
    if k_max_col < 0:
        raise ValueError("k_max_col must be nonnegative")

    if null_intersection_dim == 0:
        chi = 0.0
    elif alpha >= 1.0:
        chi = np.inf
    else:
        chi = float(np.sqrt((xi + beta * mu_npi_omega) / (1.0 - alpha)))

    one_m_a2 = 1.0 - alpha**2
    f = 1.0 - nu * beta - (xi + alpha * nu) * one_m_a2 * (xi + alpha * beta)
    g = xi + alpha**2 * one_m_a2 * (xi + alpha * nu)
    h = nu + alpha * one_m_a2 * (xi + alpha * nu)
    q = tau + eta * alpha + eta * xi
    e = alpha * one_m_a2 * (xi + alpha * beta) + 1.0 + nu

    k = int(k_max_col)
    reason = ""
    if f <= 0:
        return IncoherenceReport(
            alpha, beta, xi, nu, eta, tau, gamma, k, chi, f, g, h, q, e,
            lambda_min=np.nan, lambda_max=np.nan, feasible=False, reason="f <= 0",
        )
    num_max = 1.0 - alpha - alpha**3 * one_m_a2 - g * e / f
    den_max = 1.0 + alpha**2 * one_m_a2 + h * e / f
    if k > 0:
        lam_max = (num_max / den_max) / k
    else:
        lam_max = np.inf if num_max > 0 else -np.inf
    den_min = 1.0 - eta * alpha * k - k * q * h / f
    if den_min <= 0:
        lam_min = np.inf
        reason = "lambda_min denominator <= 0"
    else:
        lam_min = (gamma + q * g / f) / den_min
    feasible = bool(chi < 1.0 and f > 0 and lam_max > lam_min >= 0)
    if not feasible and not reason:
        if chi >= 1.0:
            reason = "chi >= 1"
        elif not lam_max > lam_min:
            reason = "empty lambda range"
    return IncoherenceReport(
        alpha, beta, xi, nu, eta, tau, gamma, k, chi, f, g, h, q, e,
        lambda_min=float(lam_min), lambda_max=float(lam_max),
        feasible=feasible, reason=reason,
    )


def k_per_column(support, periods: int) -> int:
    counts = np.zeros(periods, dtype=int)
    for _, t in support:
        counts[t] += 1
    return int(counts.max(initial=0))


def measure_incoherences(routing, mask: SamplingMask, bundle: SubspaceBundle) -> dict:
    """All subspace measures needed by the recovery checker, as a dict."""
    F, T = bundle.shape
    _check_size(F, T)
    omega = omega_basis(bundle.support, (F, T))
    phi = phi_basis(bundle)
    nr = nullspace_R_basis(routing, T)
    npi = nullspace_Pi_basis(mask)
    inter = intersect_nullspaces(routing, mask)
    hidden = ~mask.mask
    omega_cap_npi = omega_basis(
        [(f, t) for f, t in bundle.support if hidden[f, t]], (F, T)
    )
    g_u, g_v, g_uv, eta = gammas(bundle)
    return {
        "alpha": mu(omega, phi),
        "beta": mu(omega, nr),
        "xi": mu(npi, phi),
        "nu": mu(nr, omega_cap_npi),
        "mu_npi_omega": mu(npi, omega),
        "eta": eta,
        "gamma": g_uv,
        "gamma_u": g_u,
        "gamma_v": g_v,
        "tau": tau(routing, mask, mode="auto", basis=inter),
        "k_max_col": k_per_column(bundle.support, T),
        "null_intersection_dim": inter.dim,
    }


def demonstrate_nonidentifiability(routing, X0: np.ndarray, rank_tol: float = 1e-9,
                                   seed: int = 0) -> np.ndarray:
    """An alternative X1 != X0 with R X1 = R X0 and rank(X1) <= rank(X0).

    Constructed as X0 + w s' V0' with w in the routing nullspace; raises
    TrivialNullspaceError when the nullspace is empty.
    """
    R = routing_entries(routing)
    X0 = np.asarray(X0, dtype=np.float64)
    K = null_space(R)
    if K.shape[1] == 0:
        raise TrivialNullspaceError("routing matrix is injective; instance identifiable")
    U, s, Vt = np.linalg.svd(X0, full_matrices=False)
    if s.size == 0 or s[0] <= 0:
        raise ValueError("X0 must be nonzero")
    r = int(np.sum(s > rank_tol * s[0]))
    V0 = Vt[:r].T
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(r)
    direction /= np.linalg.norm(direction)
    W = 0.5 * s[0] * np.outer(K[:, 0], direction)
    return X0 + W @ V0.T


@dataclass(frozen=True)
class CertificateReport:
    """Dual-certificate construction results and analytic-bound comparison."""

    gamma_matrix: np.ndarray
    lam: float
    c1_residual: float
    c2_residual: float
    c3_residual: float
    c4_value: float
    c5_value: float
    c1_ok: bool
    c2_ok: bool
    c3_ok: bool
    c4_ok: bool
    c5_ok: bool
    theta: float
    cond_a_lhs: float
    cond_a_ok: bool
    cond_b_lhs: float
    cond_b_ok: bool
    measures: dict

    @property
    def passes(self) -> bool:
        return self.c1_ok and self.c2_ok and self.c3_ok and self.c4_ok and self.c5_ok


def dual_certificate(routing, mask: SamplingMask, bundle: SubspaceBundle, lam: float,
                     sign_A0: np.ndarray | None = None) -> CertificateReport:
    """Construct and verify the dual certificate for one instance.

    Solves for the unique Gamma in Omega + Phi + (N_R cap N_Pi) whose
    projections match lam * sgn(A0) on the support, U0 V0' on the tangent
    space, and zero on the nullspace intersection; then checks the strict
    norm bounds.  `sign_A0` supplies the anomaly signs (defaults to +1 on the
    support, which matches anomalies known to be nonnegative).
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    F, T = bundle.shape
    _check_size(F, T)
    support = sorted(bundle.support)
    if sign_A0 is None:
        signs = {idx: 1.0 for idx in support}
    else:
        sign_A0 = np.asarray(sign_A0)
        signs = {idx: float(np.sign(sign_A0[idx])) for idx in support}
        if any(v == 0.0 for v in signs.values()):
            raise ValueError("sign matrix is zero on part of the support")

    omega = omega_basis(support, (F, T))
    phi = phi_basis(bundle)
    inter = intersect_nullspaces(routing, mask)
    M = np.column_stack([b.vectors for b in (omega, phi, inter) if b.dim > 0])
    if M.shape[1] == 0:
        raise NotLocallyIdentifiableError("all certificate subspaces are trivial")
    G = M.T @ M
    w = np.linalg.eigvalsh(G)
    if w[0] <= 1e-10 * max(w[-1], 1.0):
        raise NotLocallyIdentifiableError(
            "support, tangent, and nullspace subspaces do not form a direct sum"
        )

    sign_target = np.zeros((F, T))
    for f, t in support:
        sign_target[f, t] = signs[(f, t)]
    uv = bundle.U0 @ bundle.V0.T
    rhs = np.concatenate([
        lam * np.array([sign_target[f, t] for f, t in support]),
        phi.vectors.T @ _vec(uv) if phi.dim else np.zeros(0),
        np.zeros(inter.dim),
    ])
    coeff = np.linalg.solve(G, rhs)
    Gamma = (M @ coeff).reshape(F, T)

    on_support = np.zeros((F, T), dtype=bool)
    for f, t in support:
        on_support[f, t] = True
    c1_res = float(np.linalg.norm(project_phi(bundle, Gamma) - uv))
    c2_res = float(np.linalg.norm(np.where(on_support, Gamma - lam * sign_target, 0.0)))
    c3_res = float(np.linalg.norm(inter.project(Gamma)))
    perp = Gamma - project_phi(bundle, Gamma)
    c4_val = float(np.linalg.svd(perp, compute_uv=False)[0]) if perp.size else 0.0
    off = np.where(on_support, 0.0, Gamma)
    c5_val = float(np.abs(off).max(initial=0.0))

    m = measure_incoherences(routing, mask, bundle)
    a, b_, xi, nu_ = m["alpha"], m["beta"], m["xi"], m["nu"]
    eta, tau_v, gam, k = m["eta"], m["tau"], m["gamma"], m["k_max_col"]
    one_m_a2 = 1.0 - a**2
    f_den = 1.0 - nu_ * b_ - (xi + a * nu_) * one_m_a2 * (xi + a * b_)
    if f_den > 0:
        theta = (xi + lam * k * nu_ + a * (xi + a * nu_) * one_m_a2 * (a + lam * k)) / f_den
    else:
        theta = np.inf
    cond_a_lhs = (
        lam * k + a + a * one_m_a2 * (a * (a + lam * k) + (a * b_ + xi) * theta)
        + (1.0 + nu_) * theta
    )
    cond_b_lhs = gam + eta * a * lam * k + (tau_v + eta * a + eta * xi) * theta

    tol = 1e-8
    return CertificateReport(
        gamma_matrix=Gamma,
        lam=lam,
        c1_residual=c1_res,
        c2_residual=c2_res,
        c3_residual=c3_res,
        c4_value=c4_val,
        c5_value=c5_val,
        c1_ok=c1_res < tol,
        c2_ok=c2_res < tol,
        c3_ok=c3_res < tol,
        c4_ok=c4_val < 1.0,
        c5_ok=c5_val < lam,
        theta=float(theta),
        cond_a_lhs=float(cond_a_lhs),
        cond_a_ok=bool(cond_a_lhs < 1.0),
        cond_b_lhs=float(cond_b_lhs),
        cond_b_ok=bool(cond_b_lhs < lam),
        measures=m,
    )
