"""
Block-diagonal semidefinite programs and a primal-dual interior-point solver.

Problem form (maximization):

    maximize    sum_k <C_k, X_k> + c' y
    subject to  sum_k A_k(X_k) + F y = b,   X_k PSD (or >= 0 for diag blocks),  y free

Each A_k is stored as a sparse (m, s*s) matrix over the row-major entries of
X_k (symmetric, off-diagonal weights split in half); diag blocks use (m, s).
The solver runs HKM search directions with Mehrotra predictor-corrector steps
on the equivalent minimization problem.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg, sparse

from app.config import settings

logger = logging.getLogger(__name__)

STEP_FRACTION = 0.98
SCHUR_CHUNK = 64


class SdpError(ValueError):
    """Malformed SDP data, unreadable SDPA text or a program exceeding the size caps."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Block:
    name: str
    size: int
    kind: str = "psd"
    basis: Tuple = ()
    vars: Tuple[str, ...] = ()


@dataclass
class SdpProblem:
    blocks: List[Block]
    A: List[sparse.csr_matrix]
    F: sparse.csr_matrix
    b: np.ndarray
    C: List[np.ndarray]
    c: np.ndarray
    free_labels: List = field(default_factory=list)
    row_labels: List[str] = field(default_factory=list)
    infeasible_rows: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if self.m < 1 and not self.infeasible_rows:
            raise SdpError("An SDP needs at least one equality constraint")
        if len(self.A) != len(self.blocks) or len(self.C) != len(self.blocks):
            raise SdpError("One constraint matrix and one cost matrix per block are required")
        for block, A in zip(self.blocks, self.A):
            if block.size < 1:
                raise SdpError(f"Block {block.name} has size {block.size}")
            width = block.size if block.kind == "diag" else block.size * block.size
            if A.shape != (self.m, width):
                raise SdpError(f"Block {block.name}: constraint matrix has shape {A.shape}, expected {(self.m, width)}")
        if self.F.shape != (self.m, self.c.shape[0]):
            raise SdpError(f"Free-variable matrix has shape {self.F.shape}, expected {(self.m, self.c.shape[0])}")

    @property
    def m(self) -> int:
        return int(self.b.shape[0])

    @property
    def n_free(self) -> int:
        return int(self.c.shape[0])

    @property
    def total_gram_dim(self) -> int:
        return sum(block.size for block in self.blocks if block.kind == "psd")

    def apply(self, X: List[np.ndarray], y: np.ndarray) -> np.ndarray:
        """sum_k A_k(X_k) + F y."""
        out = self.F @ y if self.n_free else np.zeros(self.m)
        for A, Xk in zip(self.A, X):
            out = out + A @ Xk.reshape(-1)
        return out

    def adjoint(self, lam: np.ndarray) -> List[np.ndarray]:
        out = []
        for block, A in zip(self.blocks, self.A):
            v = A.T @ lam
            out.append(v if block.kind == "diag" else v.reshape(block.size, block.size))
        return out

    def objective(self, X: List[np.ndarray], y: np.ndarray) -> float:
        value = float(self.c @ y) if self.n_free else 0.0
        for Ck, Xk in zip(self.C, X):
            value += float(np.sum(Ck * Xk))
        return value


@dataclass
class SdpSolution:
    status: str
    X: List[np.ndarray]
    Z: List[np.ndarray]
    y: np.ndarray
    dual: np.ndarray
    primal_objective: float
    dual_objective: float
    iterations: int
    residuals: Dict[str, float]
    free_labels: List = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def compute_residuals(
    problem: SdpProblem,
    X: List[np.ndarray],
    y: np.ndarray,
    lam: np.ndarray,
    Z: List[np.ndarray],
) -> Dict[str, float]:
    """Relative primal/dual infeasibility and duality gap.

    Dual convention: Z_k = A_k^*(lam) - C_k PSD, F'lam = c, dual objective b'lam.
    """
    rp = problem.b - problem.apply(X, y)
    pinf = float(np.linalg.norm(rp)) / (1.0 + float(np.linalg.norm(problem.b)))
    adj = problem.adjoint(lam)
    dnorm, cnorm = 0.0, 0.0
    for Ck, Zk, Ak in zip(problem.C, Z, adj):
        dnorm += float(np.sum((Ak - Ck - Zk) ** 2))
        cnorm += float(np.sum(Ck ** 2))
    if problem.n_free:
        rf = problem.F.T @ lam - problem.c
        dnorm += float(rf @ rf)
        cnorm += float(problem.c @ problem.c)
    dinf = float(np.sqrt(dnorm)) / (1.0 + float(np.sqrt(cnorm)))
    pobj = problem.objective(X, y)
    dobj = float(problem.b @ lam)
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    return {"primal": pinf, "dual": dinf, "gap": gap}


def _factor(M: np.ndarray):
    """Cholesky factor with increasing diagonal jitter on failure."""
    jitter = 0.0
    base = 1e-14 * (1.0 + float(np.max(np.abs(np.diag(M))))) if M.size else 0.0
    for _ in range(8):
        try:
            return linalg.cho_factor(M + jitter * np.eye(M.shape[0]), lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter = base if jitter == 0.0 else jitter * 100.0
    raise np.linalg.LinAlgError("Schur complement is not positive definite")


def _max_step(Xk: np.ndarray, dX: np.ndarray, kind: str) -> float:
    if kind == "diag":
        neg = dX < 0
        if not np.any(neg):
            return np.inf
        return float(np.min(-Xk[neg] / dX[neg]))
    L = linalg.cholesky(Xk, lower=True, check_finite=False)
    Linv_dX = linalg.solve_triangular(L, dX, lower=True, check_finite=False)
    S = linalg.solve_triangular(L, Linv_dX.T, lower=True, check_finite=False)
    smallest = float(np.min(linalg.eigvalsh(0.5 * (S + S.T), check_finite=False)))
    return np.inf if smallest >= 0 else -1.0 / smallest


def stagnation_status(history: List[float], dobj: float, window: Optional[int] = None) -> Optional[str]:
    """Status once the primal residual made no progress over `window` iterations, else None.

    Only a dual objective diverging past the threshold counts as primal infeasibility;
    any other plateau is reported as stalled.
    """
    window = settings.stagnation_window if window is None else window
    if len(history) <= window or history[-1] <= 1e-4 or history[-1] <= 0.99 * history[-window - 1]:
        return None
    return "infeasible" if dobj > settings.infeasible_threshold else "stalled"


class HkmSolver:
    """Infeasible-start primal-dual path following with the HKM direction."""

    def __init__(self, problem: SdpProblem, tol: Optional[float] = None, max_iter: Optional[int] = None):
        self.problem = problem
        self.tol = settings.solver_tol if tol is None else tol
        self.max_iter = settings.solver_max_iter if max_iter is None else max_iter
        # internal minimization: min <-C, X> - c'y
        self.Cm = [-Ck for Ck in problem.C]
        self.cm = -problem.c
        self.coo = [A.tocoo() for A in problem.A]

    def _initial(self):
        p = self.problem
        scale = 1.0 + max(
            float(np.max(np.abs(p.b))) if p.m else 0.0,
            max((float(np.max(np.abs(Ck))) for Ck in p.C if Ck.size), default=0.0),
        )
        X, Z = [], []
        for block in p.blocks:
            if block.kind == "diag":
                X.append(np.full(block.size, scale))
                Z.append(np.full(block.size, scale))
            else:
                X.append(scale * np.eye(block.size))
                Z.append(scale * np.eye(block.size))
        return X, Z, np.zeros(p.n_free), np.zeros(p.m)

    def _schur(self, X, Zinv) -> np.ndarray:
        p = self.problem
        M = np.zeros((p.m, p.m))
        for block, A, coo, Xk, Zk in zip(p.blocks, p.A, self.coo, X, Zinv):
            if coo.nnz == 0:
                continue
            if block.kind == "diag":
                M += (A.multiply(Xk * Zk) @ A.T).toarray()
                continue
            s = block.size
            rows = np.unique(coo.row)
            order = np.argsort(coo.row, kind="stable")
            r_sorted, c_sorted, v_sorted = coo.row[order], coo.col[order], coo.data[order]
            for start in range(0, len(rows), SCHUR_CHUNK):
                chunk = rows[start:start + SCHUR_CHUNK]
                lo = np.searchsorted(r_sorted, chunk[0], side="left")
                hi = np.searchsorted(r_sorted, chunk[-1], side="right")
                r_idx = np.searchsorted(chunk, r_sorted[lo:hi])
                a, b = np.divmod(c_sorted[lo:hi], s)
                # rows of Z^-1 A_j X summed over the nonzeros of each A_j
                outer = (Zk[:, a].T[:, :, None] * Xk[b, :][:, None, :]).reshape(hi - lo, s * s)
                P = sparse.csr_matrix((v_sorted[lo:hi], (r_idx, np.arange(hi - lo))), shape=(len(chunk), hi - lo))
                W = (P @ outer).reshape(len(chunk), s, s).transpose(0, 2, 1).reshape(len(chunk), s * s)
                M[:, chunk] += (A @ W.T)
        return 0.5 * (M + M.T)

    def _direction(self, state, factor, sigma_mu, corr):
        p = self.problem
        X, Z, Zinv, Rd, rp, rf = state
        R = []
        for block, Xk, Zk, Rk, ck in zip(p.blocks, X, Zinv, Rd, corr):
            if block.kind == "diag":
                R.append(sigma_mu * Zk - Xk - Zk * Rk * Xk - (Zk * ck if ck is not None else 0.0))
            else:
                term = sigma_mu * Zk - Xk - Zk @ Rk @ Xk
                if ck is not None:
                    term = term - Zk @ ck
                R.append(term)
        h = rp - p.apply(R, np.zeros(p.n_free))
        def solve(rhs):
            return linalg.cho_solve(factor, rhs, check_finite=False)

        if p.n_free:
            Fd = p.F.toarray()
            MinvF = solve(Fd)
            S = Fd.T @ MinvF
            Sf = _factor(0.5 * (S + S.T))
            dy = linalg.cho_solve(Sf, Fd.T @ solve(h) - rf, check_finite=False)
            dlam = solve(h - Fd @ dy)
        else:
            dy = np.zeros(0)
            dlam = solve(h)
        adj = p.adjoint(dlam)
        dX, dZ = [], []
        for block, Xk, Zk, Rk, Ak, Rdk in zip(p.blocks, X, Zinv, R, adj, Rd):
            dZ.append(Rdk - Ak)
            if block.kind == "diag":
                dX.append(Rk + Zk * Ak * Xk)
            else:
                D = Rk + Zk @ Ak @ Xk
                dX.append(0.5 * (D + D.T))
        return dX, dy, dlam, dZ

    def _steps(self, X, Z, dX, dZ) -> Tuple[float, float]:
        ap, ad = np.inf, np.inf
        for block, Xk, Zk, dXk, dZk in zip(self.problem.blocks, X, Z, dX, dZ):
            ap = min(ap, _max_step(Xk, dXk, block.kind))
            ad = min(ad, _max_step(Zk, dZk, block.kind))
        return min(1.0, STEP_FRACTION * ap), min(1.0, STEP_FRACTION * ad)

    def solve(self) -> SdpSolution:
        p = self.problem
        started = time.perf_counter()
        X, Z, y, lam = self._initial()
        nu = sum(block.size for block in p.blocks) or 1
        status = "stalled"
        history: List[float] = []
        it = 0
        residuals = compute_residuals(p, X, y, -lam, Z)
        for it in range(1, self.max_iter + 1):
            rp = p.b - p.apply(X, y)
            adj = p.adjoint(lam)
            Rd = [Cm - Zk - Ak for Cm, Zk, Ak in zip(self.Cm, Z, adj)]
            rf = self.cm - p.F.T @ lam if p.n_free else np.zeros(0)
            mu = sum(float(np.sum(Xk * Zk)) for Xk, Zk in zip(X, Z)) / nu
            residuals = compute_residuals(p, X, y, -lam, Z)
            pobj, dobj = -p.objective(X, y), float(p.b @ lam)
            logger.debug(
                f"it {it:3d} pobj {pobj:+.6e} dobj {dobj:+.6e} "
                f"pinf {residuals['primal']:.2e} dinf {residuals['dual']:.2e} mu {mu:.2e}"
            )
            if max(residuals.values()) < self.tol:
                status = "optimal"
                break
            if -pobj > settings.infeasible_threshold and residuals["primal"] < 1e-6:
                status = "unbounded"
                break
            history.append(residuals["primal"])
            verdict = stagnation_status(history, dobj)
            if verdict is not None:
                status = verdict
                break

            Zinv = [1.0 / Zk if block.kind == "diag" else linalg.inv(Zk, check_finite=False)
                    for block, Zk in zip(p.blocks, Z)]
            try:
                factor = _factor(self._schur(X, Zinv))
            except np.linalg.LinAlgError:
                logger.warning(f"Schur complement factorization failed at iteration {it}")
                break
            state = (X, Z, Zinv, Rd, rp, rf)
            none = [None] * len(p.blocks)
            dXa, _dya, _dla, dZa = self._direction(state, factor, 0.0, none)
            ap, ad = self._steps(X, Z, dXa, dZa)
            mu_aff = sum(
                float(np.sum((Xk + ap * dx) * (Zk + ad * dz))) for Xk, Zk, dx, dz in zip(X, Z, dXa, dZa)
            ) / nu
            sigma = min(1.0, (max(mu_aff, 0.0) / mu) ** 3) if mu > 0 else 0.0
            corr = [
                dz * dx if block.kind == "diag" else dz @ dx
                for block, dx, dz in zip(p.blocks, dXa, dZa)
            ]
            dX, dy, dlam, dZ = self._direction(state, factor, sigma * mu, corr)
            ap, ad = self._steps(X, Z, dX, dZ)
            if ap < 1e-10 and ad < 1e-10:
                logger.warning(f"Step lengths collapsed at iteration {it}")
                break
            X = [Xk + ap * d for Xk, d in zip(X, dX)]
            y = y + ap * dy
            Z = [Zk + ad * d for Zk, d in zip(Z, dZ)]
            lam = lam + ad * dlam
        elapsed = time.perf_counter() - started
        solution = SdpSolution(
            status=status,
            X=X,
            Z=Z,
            y=y,
            dual=-lam,
            primal_objective=p.objective(X, y),
            dual_objective=-float(p.b @ lam),
            iterations=it,
            residuals=residuals,
            free_labels=list(p.free_labels),
            elapsed=elapsed,
        )
        logger.info(
            f"SDP {status} after {it} iterations in {elapsed:.2f}s "
            f"(pinf {residuals['primal']:.1e}, dinf {residuals['dual']:.1e}, gap {residuals['gap']:.1e})"
        )
        return solution


def check_dimensions(problem: SdpProblem) -> None:
    if problem.total_gram_dim > settings.max_gram_dim:
        raise SdpError(f"Total Gram dimension {problem.total_gram_dim} exceeds the cap {settings.max_gram_dim}")
    if problem.m > settings.max_constraints:
        raise SdpError(f"{problem.m} equality constraints exceed the cap {settings.max_constraints}")


def solve_sdp(problem: SdpProblem, tol: Optional[float] = None, max_iter: Optional[int] = None) -> SdpSolution:
    """Solve, short-circuiting programs whose compilation already proved infeasibility."""
    check_dimensions(problem)
    if problem.infeasible_rows:
        logger.info(f"SDP infeasible before solving: {problem.infeasible_rows[0]} has no decision variables")
        empty = [np.zeros((b.size,) if b.kind == "diag" else (b.size, b.size)) for b in problem.blocks]
        return SdpSolution(
            status="infeasible",
            X=empty,
            Z=empty,
            y=np.zeros(problem.n_free),
            dual=np.zeros(problem.m),
            primal_objective=float("nan"),
            dual_objective=float("nan"),
            iterations=0,
            residuals={"primal": float("inf"), "dual": float("inf"), "gap": float("inf")},
            free_labels=list(problem.free_labels),
        )
    return HkmSolver(problem, tol, max_iter).solve()


def asymmetry(problem: SdpProblem) -> float:
    """Largest |A_k[i, (a, b)] - A_k[i, (b, a)]| over all PSD blocks."""
    worst = 0.0
    for block, A in zip(problem.blocks, problem.A):
        if block.kind == "diag" or A.nnz == 0:
            continue
        s = block.size
        perm = (np.arange(s * s).reshape(s, s).T).reshape(-1)
        diff = A - A[:, perm]
        if diff.nnz:
            worst = max(worst, float(np.max(np.abs(diff.data))))
    return worst
