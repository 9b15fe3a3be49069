"""Joint clock / alteration estimation with a sparse-jerk penalty.

The batch problem over K measurement epochs is

    minimize  1/2 sum_k ||z_k - H (x_k + s_k)||^2_{R_k^-1}
            + 1/2 sum_k ||x_k - F x_{k-1}||^2_{Q_k^-1}
            + 1/2 ||x_0 - m_0||^2_{P_0^-1}
            + mu  sum_k (s_b[k] - s_b[k-1] - dt s_d[k])^2
            + eps ||s||^2
            + lam ||D2 s_d||_1

with x_k = (bias, drift) of the receiver clock and s_k = (s_b, s_d) the
spoofer alteration. D2 takes second differences of the drift alteration,
so the penalty favours alterations whose jerk is sparse.

The solver splits u = D2 s_d and runs ADMM; the (x, s) update is one
banded Cholesky solve because every term couples at most three adjacent
epochs. Once ADMM has identified the sign pattern of u, an active-set
polish solves the remaining equality-constrained quadratic exactly.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.optimize import lsq_linear
from scipy.sparse.linalg import spsolve

from ..attacks import backward_difference
from ..clock import transition_matrix
from ..measurements import wls_clock
from .ekf import StateTrajectory

log = logging.getLogger(__name__)

D2_BOUNDARIES = ("interior", "causal", "toeplitz")


@dataclass(frozen=True)
class AlterationTrajectory:
    s_bias_m: np.ndarray
    s_drift_mps: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.s_bias_m, dtype=float)
        d = np.asarray(self.s_drift_mps, dtype=float)
        if b.shape != d.shape or b.ndim != 1:
            raise ValueError("alteration series must be 1-D and of equal length")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(d))):
            raise ValueError("alteration trajectory contains non-finite values")
        object.__setattr__(self, "s_bias_m", b)
        object.__setattr__(self, "s_drift_mps", d)

    def __len__(self):
        return len(self.s_bias_m)

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.s_bias_m, self.s_drift_mps])


@dataclass(frozen=True)
class SolverConfig:
    """Weights and stopping rules.

    ``mu_integrity``, ``eps_ridge`` and ``splitting_penalty`` left as None
    are scaled from the data (see :meth:`resolve`).
    """

    lam: float = 300.0
    mu_integrity: float | None = None
    eps_ridge: float | None = None
    max_iters: int = 20000
    tol_primal: float = 1e-7
    tol_dual: float = 1e-7
    splitting_penalty: float | None = None
    d2_boundary: str = "causal"
    polish: bool = True
    prior_std: tuple = (1000.0, 100.0)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        for name in ("mu_integrity", "eps_ridge"):
            val = getattr(self, name)
            if val is not None and val < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.splitting_penalty is not None and not self.splitting_penalty > 0:
            raise ValueError("splitting_penalty must be positive")
        if not (self.tol_primal > 0 and self.tol_dual > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.d2_boundary not in D2_BOUNDARIES:
            raise ValueError(f"d2_boundary must be one of {D2_BOUNDARIES}")
        if len(self.prior_std) != 2 or min(self.prior_std) <= 0:
            raise ValueError("prior_std must hold two positive values")

    def resolve(self, data: TsarmData) -> SolverConfig:
        """Fill data-scaled defaults.

        mu defaults to 1e-3 of the typical inverse process-noise diagonal,
        small enough that a bias move without a matching drift costs less
        as an alteration than as a clock jump. eps only breaks ties: summed
        over all epochs it stays 1e3 below the prior precision, which is the
        only other term that pins a constant offset between x and s.
        """
        q_scale = float(np.median(np.mean(np.diagonal(data.q_inv, axis1=1, axis2=2), axis=1)))
        return replace(
            self,
            mu_integrity=1e-3 * q_scale if self.mu_integrity is None else self.mu_integrity,
            eps_ridge=(
                1e-3 / (np.max(np.square(self.prior_std)) * len(data.w))
                if self.eps_ridge is None
                else self.eps_ridge
            ),
            splitting_penalty=(
                float(np.median(data.w[:, 1])) if self.splitting_penalty is None else self.splitting_penalty
            ),
        )


@dataclass
class SolverDiagnostics:
    iterations: int = 0
    primal_residual: float = np.inf
    dual_residual: float = np.inf
    objective: float = np.nan
    kkt_residual: float = np.inf
    converged: bool = False
    polished: bool = False
    penalty: float = np.nan
    elapsed_s: float = 0.0
    history: list = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "converged": self.converged,
            "polished": self.polished,
            "penalty": self.penalty,
            "elapsed_s": self.elapsed_s,
        }


class TsarmSolution(NamedTuple):
    states: StateTrajectory
    alterations: AlterationTrajectory
    diagnostics: SolverDiagnostics


@dataclass(frozen=True)
class TsarmData:
    """Per-epoch sufficient statistics of the residuals plus model covariances.

    ``ybar``/``w`` are the information-weighted channel means and total
    information for the bias and drift blocks; ``const`` is the part of
    each weighted residual norm no clock state can explain.
    """

    ybar: np.ndarray
    w: np.ndarray
    const: np.ndarray
    q_inv: np.ndarray
    dt_s: float
    prior_mean: np.ndarray
    z_norm: float

    @property
    def n_epochs(self) -> int:
        return len(self.ybar)

    @classmethod
    def from_residuals(cls, residuals, Q, dt_s: float, prior_mean=None) -> TsarmData:
        n = len(residuals)
        if n < 3:
            raise ValueError("need at least three epochs")
        ybar = np.empty((n, 2))
        w = np.empty((n, 2))
        const = np.empty(n)
        z_sq = 0.0
        for k, res in enumerate(residuals):
            if res.n_sats < 1:
                raise ValueError(f"epoch {k} has no satellites")
            if np.any(res.var <= 0):
                raise ValueError(f"epoch {k}: measurement covariance is not positive definite")
            ybar[k], w[k], const[k] = res.reduced()
            z_sq += float(res.z @ res.z)
        Q = np.asarray(Q, dtype=float)
        Qs = np.broadcast_to(Q, (n, 2, 2)) if Q.ndim == 2 else Q
        if Qs.shape != (n, 2, 2):
            raise ValueError("Q must be 2x2 or one 2x2 per epoch")
        if np.any(np.linalg.eigvalsh(Qs) <= 0):
            raise ValueError("process noise covariance is not positive definite")
        if prior_mean is None:
            # back-propagate the first snapshot solution to the prior epoch
            x1, _ = wls_clock(residuals[0])
            prior_mean = np.linalg.solve(transition_matrix(dt_s), x1)
        return cls(ybar, w, const, np.linalg.inv(Qs), float(dt_s), np.asarray(prior_mean, float), np.sqrt(z_sq))


def d2_matrix(n: int, boundary: str = "interior") -> sp.csr_matrix:
    """Second-difference operator on a length-n sequence.

    ``interior`` gives the (n-2) x n stencil (1, -2, 1). ``causal`` treats
    the two samples before the record as zero (n x n, lower triangular):
    an alteration and its slope must both start from zero. ``toeplitz``
    pads one zero at both ends (n x n, -2 on the diagonal).
    """
    if n < 3:
        raise ValueError("second differences need at least three samples")
    if boundary == "interior":
        return sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(n - 2, n), format="csr")
    if boundary == "causal":
        return sp.diags([1.0, -2.0, 1.0], [0, -1, -2], shape=(n, n), format="csr")
    if boundary == "toeplitz":
        return sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(n, n), format="csr")
    raise ValueError(f"unknown boundary {boundary!r}; expected one of {D2_BOUNDARIES}")


def _as_arrays(x, s):
    x = x.states if isinstance(x, StateTrajectory) else np.asarray(x, dtype=float)
    s = s.as_array() if isinstance(s, AlterationTrajectory) else np.asarray(s, dtype=float)
    return x, s


def _prior_inv(config: SolverConfig) -> np.ndarray:
    return np.diag(1.0 / np.square(config.prior_std))


def tsarm_objective(x, s, data: TsarmData, config: SolverConfig) -> float:
    """Objective value evaluated term by term (no matrix assembly)."""
    cfg = config.resolve(data)
    x, s = _as_arrays(x, s)
    n = data.n_epochs
    if x.shape != (n + 1, 2) or s.shape != (n, 2):
        raise ValueError(f"expected x of shape {(n + 1, 2)} and s of shape {(n, 2)}")
    F = transition_matrix(data.dt_s)

    meas = 0.5 * np.sum(data.w * (data.ybar - x[1:] - s) ** 2) + 0.5 * np.sum(data.const)
    innov = x[1:] - x[:-1] @ F.T
    dyn = 0.5 * np.einsum("ki,kij,kj->", innov, data.q_inv, innov)
    dx0 = x[0] - data.prior_mean
    prior = 0.5 * dx0 @ _prior_inv(cfg) @ dx0
    sb_prev = np.concatenate([[0.0], s[:-1, 0]])
    coupling = cfg.mu_integrity * np.sum((s[:, 0] - sb_prev - data.dt_s * s[:, 1]) ** 2)
    ridge = cfg.eps_ridge * np.sum(s**2)
    l1 = cfg.lam * np.abs(d2_matrix(n, cfg.d2_boundary) @ s[:, 1]).sum()
    return float(meas + dyn + prior + coupling + ridge + l1)


# ---------------------------------------------------------------------------
# assembly: v = [x_0, (x_1, s_1), ..., (x_K, s_K)], block of four per epoch


def _ix(k: int) -> int:
    """Offset of x_k in the stacked vector."""
    return 0 if k == 0 else 2 + 4 * (k - 1)


def _is(k: int) -> int:
    """Offset of s_k (k >= 1)."""
    return 4 + 4 * (k - 1)


class _Quadratic(NamedTuple):
    P: sp.csc_matrix
    q: np.ndarray
    c0: float
    A: sp.csr_matrix


def _assemble(data: TsarmData, cfg: SolverConfig) -> _Quadratic:
    n = data.n_epochs
    nv = 2 + 4 * n
    rows, cols, vals = [], [], []

    def add(block, idx):
        for a, i in enumerate(idx):
            for b, j in enumerate(idx):
                if block[a][b] != 0.0:
                    rows.append(i)
                    cols.append(j)
                    vals.append(block[a][b])

    q = np.zeros(nv)
    p0i = _prior_inv(cfg)
    add(p0i, [0, 1])
    q[0:2] += p0i @ data.prior_mean
    c0 = 0.5 * data.prior_mean @ p0i @ data.prior_mean

    F = transition_matrix(data.dt_s)
    G = np.hstack([-F, np.eye(2)])
    for k in range(1, n + 1):
        j = k - 1
        xi, si = _ix(k), _is(k)
        # measurement sees x_k + s_k
        for c in range(2):
            wj = data.w[j, c]
            add([[wj, wj], [wj, wj]], [xi + c, si + c])
            q[xi + c] += wj * data.ybar[j, c]
            q[si + c] += wj * data.ybar[j, c]
            c0 += 0.5 * wj * data.ybar[j, c] ** 2
        c0 += 0.5 * data.const[j]
        add(G.T @ data.q_inv[j] @ G, [_ix(k - 1), _ix(k - 1) + 1, xi, xi + 1])
        # integrity coupling; s_b[0] is a fixed zero
        a = np.array([-1.0, 1.0, -data.dt_s]) if k > 1 else np.array([1.0, -data.dt_s])
        idx = [_is(k - 1), si, si + 1] if k > 1 else [si, si + 1]
        add(2.0 * cfg.mu_integrity * np.outer(a, a), idx)
        add(2.0 * cfg.eps_ridge * np.eye(2), [si, si + 1])

    P = sp.coo_matrix((vals, (rows, cols)), shape=(nv, nv)).tocsc()
    select = sp.coo_matrix((np.ones(n), (np.arange(n), [_is(k) + 1 for k in range(1, n + 1)])), shape=(n, nv))
    A = (d2_matrix(n, cfg.d2_boundary) @ select).tocsr()
    return _Quadratic(P, q, float(c0), A)


def _to_banded_lower(M: sp.spmatrix) -> np.ndarray:
    M = M.tocoo()
    lower = M.row >= M.col
    bw = int(np.max(M.row[lower] - M.col[lower]))
    ab = np.zeros((bw + 1, M.shape[0]))
    ab[M.row[lower] - M.col[lower], M.col[lower]] = M.data[lower]
    return ab


def _soft(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _unpack(v: np.ndarray, n: int):
    x = np.empty((n + 1, 2))
    x[0] = v[0:2]
    blocks = v[2:].reshape(n, 4)
    x[1:] = blocks[:, 0:2]
    return x, blocks[:, 2:4].copy()


def _pack(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return np.concatenate([x[0], np.hstack([x[1:], s]).ravel()])


def _smooth_value(quad: _Quadratic, v: np.ndarray) -> float:
    return float(0.5 * v @ (quad.P @ v) - quad.q @ v + quad.c0)


def _polish(quad: _Quadratic, lam: float, u: np.ndarray, max_rounds: int = 30):
    """Exact minimizer for the sign pattern of ``u``, refined by active-set swaps.

    Returns (v, subgradient) or None when no consistent pattern is found.
    """
    P, q, A = quad.P, quad.q, quad.A
    m = A.shape[0]
    sign = np.sign(u)
    for _ in range(max_rounds):
        S = np.flatnonzero(sign)
        Z = np.flatnonzero(sign == 0)
        rhs = q - lam * (A[S].T @ sign[S]) if len(S) else q.copy()
        AZ = A[Z]
        K = sp.bmat([[P, AZ.T], [AZ, None]], format="csc")
        b = np.concatenate([rhs, np.zeros(len(Z))])
        sol = spsolve(K, b)
        sol += spsolve(K, b - K @ sol)  # one step of iterative refinement
        v = sol[: P.shape[0]]
        g = np.zeros(m)
        g[S] = sign[S]
        g[Z] = sol[P.shape[0] :] / lam

        Av = A @ v
        scale = 1e-10 * max(1.0, np.abs(Av).max(initial=0.0))
        flipped = S[np.sign(Av[S]) != sign[S]]
        vanished = S[np.abs(Av[S]) <= scale]
        over = Z[np.abs(g[Z]) > 1.0 + 1e-9]
        if len(flipped) == 0 and len(over) == 0:
            return v, g
        # entries whose value crossed zero leave the support; saturated multipliers join it
        sign[np.union1d(flipped, vanished)] = 0.0
        sign[over] = np.sign(g[over])
    return None


def tsarm_solve(residuals, Q, dt_s: float, config: SolverConfig | None = None, init=None, data=None) -> TsarmSolution:
    """Solve the batch problem for the given residual epochs.

    Args:
        residuals: sequence of ResidualEpoch, K >= 3.
        Q: clock process noise (2x2 or per epoch).
        dt_s: epoch interval.
        config: SolverConfig; defaults if None.
        init: optional (x, s) warm start of shapes (K+1, 2) and (K, 2).
        data: prebuilt TsarmData (skips the reduction of ``residuals``).

    Returns:
        TsarmSolution(states, alterations, diagnostics). A run that does
        not meet the tolerances within ``max_iters`` still returns its last
        iterate with ``diagnostics.converged`` False.
    """
    t_start = time.perf_counter()
    config = config or SolverConfig()
    data = data or TsarmData.from_residuals(residuals, Q, dt_s)
    cfg = config.resolve(data)
    quad = _assemble(data, cfg)
    P, q, A = quad.P, quad.q, quad.A
    AtA = (A.T @ A).tocsc()
    diag = SolverDiagnostics()

    if cfg.lam == 0.0:
        v = spsolve(P, q)
        v += spsolve(P, q - P @ v)
        diag.converged = True
        diag.primal_residual = diag.dual_residual = 0.0
        return _finish(v, quad, data, cfg, diag, np.zeros(A.shape[0]), t_start)

    rho = cfg.splitting_penalty
    factor = cholesky_banded(_to_banded_lower(P + rho * AtA), lower=True)
    if init is not None:
        x0, s0 = _as_arrays(*init)
        v = _pack(x0, s0)
    else:
        v = cho_solve_banded((factor, True), q)
    u = _soft(A @ v, cfg.lam / rho)
    w = np.zeros_like(u)  # scaled dual
    tol_p, tol_d = cfg.tol_primal, cfg.tol_dual
    sqrt_m, sqrt_n = np.sqrt(A.shape[0]), np.sqrt(P.shape[0])
    g_polish = None

    for it in range(1, cfg.max_iters + 1):
        v = cho_solve_banded((factor, True), q + rho * (A.T @ (u - w)))
        Av = A @ v
        u_old = u
        u = _soft(Av + w, cfg.lam / rho)
        w = w + Av - u
        r_norm = float(np.linalg.norm(Av - u))
        s_norm = float(rho * np.linalg.norm(A.T @ (u - u_old)))
        eps_pri = tol_p * (sqrt_m + max(np.linalg.norm(Av), np.linalg.norm(u)))
        eps_dual = tol_d * (sqrt_n + rho * np.linalg.norm(A.T @ w))
        diag.iterations, diag.primal_residual, diag.dual_residual = it, r_norm, s_norm
        if it % 50 == 0:
            diag.history.append((it, r_norm, s_norm, rho))

        if r_norm <= eps_pri and s_norm <= eps_dual:
            if not cfg.polish:
                diag.converged = True
                break
            polished = _polish(quad, cfg.lam, u)
            if polished is not None:
                v, g_polish = polished
                diag.converged = diag.polished = True
                break
            # pattern not settled yet: keep iterating with tighter tolerances
            tol_p, tol_d = tol_p * 0.1, tol_d * 0.1
            if tol_p < 1e-15:
                break

        # residual balancing
        if it % 10 == 0 and (r_norm > 10 * s_norm or s_norm > 10 * r_norm):
            step = 2.0 if r_norm > s_norm else 0.5
            rho *= step
            w /= step
            factor = cholesky_banded(_to_banded_lower(P + rho * AtA), lower=True)

    if not diag.converged and cfg.polish:
        polished = _polish(quad, cfg.lam, u)
        if polished is not None:
            v, g_polish = polished
            diag.polished = True
            diag.converged = True
    diag.penalty = rho
    if not diag.converged:
        log.warning("solver stopped after %d iterations without meeting tolerances", diag.iterations)
    return _finish(v, quad, data, cfg, diag, g_polish, t_start)


def _finish(v, quad, data, cfg, diag, g_hint, t_start) -> TsarmSolution:
    n = data.n_epochs
    x, s = _unpack(v, n)
    diag.objective = _smooth_value(quad, v) + cfg.lam * np.abs(quad.A @ v).sum()
    states = StateTrajectory(x)
    alterations = AlterationTrajectory(s[:, 0], s[:, 1])
    diag.kkt_residual = _kkt_residual(quad, cfg.lam, v)
    diag.elapsed_s = time.perf_counter() - t_start
    return TsarmSolution(states, alterations, diag)


def _kkt_residual(quad: _Quadratic, lam: float, v: np.ndarray, zero_tol: float = 1e-9) -> float:
    grad = quad.P @ v - quad.q
    if lam == 0.0:
        return float(np.linalg.norm(grad))
    Av = quad.A @ v
    thr = zero_tol * max(1.0, np.abs(Av).max(initial=0.0))
    nz = np.abs(Av) > thr
    r0 = grad + lam * (quad.A[np.flatnonzero(nz)].T @ np.sign(Av[nz]))
    Z = np.flatnonzero(~nz)
    if len(Z) == 0:
        return float(np.linalg.norm(r0))
    M = lam * quad.A[Z].T.toarray()
    fit = lsq_linear(M, -r0, bounds=(-1.0, 1.0), method="bvls", tol=1e-14)
    return float(np.linalg.norm(r0 + M @ fit.x))


def kkt_check(solution, residuals=None, Q=None, dt_s=None, config: SolverConfig | None = None, data=None) -> float:
    """Minimal-norm stationarity residual of a candidate solution.

    The gradient of the smooth terms plus lam * D2^T g must vanish for a
    subgradient g with g_i = sign((D2 s_d)_i) where that entry is nonzero
    and g_i free in [-1, 1] where it is zero; the returned value is the
    smallest residual norm over admissible g.
    """
    config = config or SolverConfig()
    data = data or TsarmData.from_residuals(residuals, Q, dt_s)
    cfg = config.resolve(data)
    states, alterations = solution[0], solution[1]
    x, s = _as_arrays(states, alterations)
    quad = _assemble(data, cfg)
    return _kkt_residual(quad, cfg.lam, _pack(x, s))


@dataclass(frozen=True)
class SplitOutputs:
    """Authentic clock estimate and the captured alteration with its derivative chain."""

    bias_m: np.ndarray
    drift_mps: np.ndarray
    s_bias_m: np.ndarray
    s_drift_mps: np.ndarray
    s_accel: np.ndarray
    s_jerk: np.ndarray

    @property
    def spoofed_bias_m(self) -> np.ndarray:
        return self.bias_m + self.s_bias_m

    @property
    def spoofed_drift_mps(self) -> np.ndarray:
        return self.drift_mps + self.s_drift_mps


def split_outputs(solution, dt_s: float) -> SplitOutputs:
    states, alterations = solution[0], solution[1]
    accel = backward_difference(alterations.s_drift_mps, dt_s)
    return SplitOutputs(
        bias_m=states.bias_m.copy(),
        drift_mps=states.drift_mps.copy(),
        s_bias_m=alterations.s_bias_m.copy(),
        s_drift_mps=alterations.s_drift_mps.copy(),
        s_accel=accel,
        s_jerk=backward_difference(accel, dt_s),
    )
