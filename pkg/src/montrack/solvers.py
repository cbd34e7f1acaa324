"""Normal-equation solvers for the two Gauss-Newton stages.

The pose stage produces a dense 36x36 system solved by QR; the surface stage
produces a 3x3-block sparse system (one block row per vertex, off-diagonal
blocks on mesh edges) solved by a few preconditioned conjugate gradient
iterations with a block-Jacobi preconditioner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

RANK_DEFICIENT_RTOL = 1e-10
DAMPING_SCALE = 1e-6
PCG_BREAKDOWN_EPS = 1e-14


@dataclass
class DenseNormalSystem:
    a: np.ndarray  # (n,n) symmetric positive semidefinite
    b: np.ndarray  # (n,)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise ValueError("system matrix must be square")
        if not (np.isfinite(self.a).all() and np.isfinite(self.b).all()):
            raise ValueError("non-finite entries in normal system")


@dataclass
class DenseSolveInfo:
    damped: bool = False
    damping: float = 0.0


def dense_solve(system: DenseNormalSystem):
    """Solve A d = b by QR; Tikhonov-damp and retry on rank deficiency."""
    a, b = system.a, system.b
    n = a.shape[0]
    info = DenseSolveInfo()
    q, r = np.linalg.qr(a)
    diag = np.abs(np.diag(r))
    if diag.min() < RANK_DEFICIENT_RTOL * max(diag.max(), 1e-300):
        info.damped = True
        info.damping = DAMPING_SCALE * np.trace(a) / n
        if info.damping <= 0.0:
            info.damping = DAMPING_SCALE
        a = a + info.damping * np.eye(n)
        q, r = np.linalg.qr(a)
    delta = scipy.linalg.solve_triangular(r, q.T @ b)
    return delta, info


@dataclass
class BlockSparseSystem:
    """A = J^T J with 3x3 blocks: dense diagonal, sparse off-diagonal."""
    diag: np.ndarray      # (N,3,3)
    off: np.ndarray       # (M,3,3)
    off_rows: np.ndarray  # (M,)
    off_cols: np.ndarray  # (M,)
    rhs: np.ndarray       # (N,3)

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=np.float64)
        self.off = np.asarray(self.off, dtype=np.float64).reshape(-1, 3, 3)
        self.off_rows = np.asarray(self.off_rows, dtype=np.int64)
        self.off_cols = np.asarray(self.off_cols, dtype=np.int64)
        self.rhs = np.asarray(self.rhs, dtype=np.float64)

    @property
    def n_blocks(self) -> int:
        return self.diag.shape[0]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = np.einsum("nij,nj->ni", self.diag, x)
        if len(self.off_rows):
            contrib = np.einsum("mij,mj->mi", self.off, x[self.off_cols])
            np.add.at(y, self.off_rows, contrib)
        return y

    def dense(self) -> np.ndarray:
        """Explicit matrix, for oracles and small tests."""
        n = self.n_blocks
        a = np.zeros((3 * n, 3 * n))
        for i in range(n):
            a[3 * i:3 * i + 3, 3 * i:3 * i + 3] = self.diag[i]
        for blk, r, c in zip(self.off, self.off_rows, self.off_cols):
            a[3 * r:3 * r + 3, 3 * c:3 * c + 3] += blk
        return a


@dataclass
class PcgInfo:
    iterations: int = 0
    breakdown: bool = False
    residual_norms: list = field(default_factory=list)


def pcg_solve(system: BlockSparseSystem, iterations: int = 4):
    """Block-Jacobi preconditioned CG from a zero start.

    Returns the iterate with the smallest residual norm; detects breakdown
    (vanishing curvature p^T A p) and stops there.
    """
    n = system.n_blocks
    try:
        minv = np.linalg.inv(system.diag)
    except np.linalg.LinAlgError:
        minv = np.linalg.pinv(system.diag)
    x = np.zeros((n, 3))
    r = system.rhs.copy()
    z = np.einsum("nij,nj->ni", minv, r)
    p = z.copy()
    rz = float(np.sum(r * z))
    info = PcgInfo(residual_norms=[float(np.linalg.norm(r))])
    best = x.copy()
    best_norm = info.residual_norms[0]
    for _ in range(iterations):
        ap = system.matvec(p)
        pap = float(np.sum(p * ap))
        if pap <= PCG_BREAKDOWN_EPS * max(float(np.sum(p * p)), 1e-300):
            info.breakdown = True
            break
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        info.iterations += 1
        norm = float(np.linalg.norm(r))
        info.residual_norms.append(norm)
        if norm < best_norm:
            best_norm = norm
            best = x.copy()
        z = np.einsum("nij,nj->ni", minv, r)
        rz_new = float(np.sum(r * z))
        if rz <= 0.0:
            info.breakdown = True
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    return best, info
