"""The discretized optimality function and its descent direction.

For a control ``xi`` the subproblem is

    minimize over xi' in the relaxed set:  max_r (a_r . (xi' - xi) + b_r) + ||xi' - xi||_X

where the affine rows are the cost derivative and every node constraint
derivative with branch-dependent offsets. It is solved in epigraph form as a
second-order cone program by a primal-dual interior-point method.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve

from .core import ControlDirection, PiecewiseControl, x_norm
from .errors import SolverStall
from .simulate import FunctionalGradients, SystemModel, psi_number

log = logging.getLogger(__name__)

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
ACTIVE_TOL = 1e-6
DUAL_TOL = 1e-6
BREAKDOWN_SLACK = 1e3
REFINE_STEPS = 6
REFINE_TOL = 1e-11
REFINE_ACCEPT = 1e-7
PCG_ITERS = 50
DENSE_FALLBACK_MAX = 3000


def simplex_project(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (Michelot's active-set iteration)."""
    v = np.asarray(v, dtype=float)
    active = np.ones(v.size, dtype=bool)
    while True:
        tau = (v[active].sum() - 1.0) / active.sum()
        x = np.where(active, v - tau, 0.0)
        neg = active & (x < 0.0)
        if not neg.any():
            return np.maximum(x, 0.0)
        active &= ~neg


@dataclass(frozen=True, eq=False)
class Subproblem:
    """Affine rows ``a_r . (xi' - xi) + b_r`` with their tags and the feasible set data.

    ``rows_u`` is (R, K, m), ``rows_d`` is (R, K, q); row 0 is always the cost.
    Constraint tags are ``(j, k)`` pairs.
    """

    base: PiecewiseControl
    rows_u: np.ndarray
    rows_d: np.ndarray
    offsets: np.ndarray
    tags: list
    branch: str
    gamma: float
    box: np.ndarray
    psi: float

    @property
    def n_rows(self) -> int:
        return self.offsets.size

    def row_values(self, direction: ControlDirection) -> np.ndarray:
        return (np.einsum("rkm,km->r", self.rows_u, direction.u)
                + np.einsum("rkq,kq->r", self.rows_d, direction.d) + self.offsets)

    def zeta(self, target: PiecewiseControl) -> float:
        """Objective value at a candidate ``xi'``."""
        w = target - self.base
        return float(self.row_values(w).max()) + x_norm(w)


@dataclass(frozen=True, eq=False)
class OptimalityReport:
    theta: float
    direction: PiecewiseControl
    step_norm: float
    active: list
    solver_iters: int
    residual: float
    branch: str
    subproblem: Subproblem | None = field(default=None, repr=False)


def build_subproblem(model: SystemModel, xi: PiecewiseControl, grads: FunctionalGradients,
                     gamma: float) -> Subproblem:
    """Assemble the affine rows for the current branch."""
    psi = psi_number(grads.psi_max)
    branch = FEASIBLE if psi <= 0.0 else INFEASIBLE
    Jn, Kp1 = grads.psi_values.shape
    rows_u = [grads.cost_u[None]]
    rows_d = [grads.cost_d[None]]
    tags: list = ["cost"]
    if branch == FEASIBLE:
        offsets = [0.0]
        con_off = gamma * psi
    else:
        offsets = [-psi]
        con_off = 0.0
    if Jn:
        K = xi.n_intervals
        rows_u.append(grads.con_u.reshape(Jn * Kp1, K, model.m))
        rows_d.append(grads.con_d.reshape(Jn * Kp1, K, model.q))
        offsets.extend([con_off] * (Jn * Kp1))
        tags.extend((j, k) for j in range(Jn) for k in range(Kp1))
    return Subproblem(xi, np.concatenate(rows_u), np.concatenate(rows_d),
                      np.asarray(offsets, dtype=float), tags, branch, float(gamma),
                      model.input_box, psi)


def _orth_complement(q: int) -> np.ndarray:
    """Orthonormal basis (q, q-1) of the zero-sum subspace."""
    if q == 1:
        return np.zeros((1, 0))
    return np.linalg.svd(np.eye(q) - 1.0 / q)[0][:, : q - 1]


def _soc_step(s: np.ndarray, d: np.ndarray) -> float:
    """Largest ``a`` keeping ``s + a d`` in the second-order cone (inf if unbounded)."""
    a = d[0] * d[0] - d[1:] @ d[1:]
    b = 2.0 * (s[0] * d[0] - s[1:] @ d[1:])
    c = s[0] * s[0] - s[1:] @ s[1:]
    roots = []
    if abs(a) <= 1e-300:
        if b < 0.0:
            roots.append(-c / b)
    else:
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            sq = math.sqrt(disc)
            # numerically stable pair of roots
            qv = -0.5 * (b + math.copysign(sq, b))
            for r in (qv / a, c / qv if qv != 0.0 else math.inf):
                if r > 0.0:
                    roots.append(r)
    step = min(roots) if roots else math.inf
    if d[0] < 0.0:
        step = min(step, -s[0] / d[0])
    return step


def _jordan(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.concatenate([[u @ v], u[0] * v[1:] + v[0] * u[1:]])


def _jordan_div(lam: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Solve ``lam o x = r`` for ``x`` in the second-order cone algebra."""
    det = lam[0] * lam[0] - lam[1:] @ lam[1:]
    x0 = (lam[0] * r[0] - lam[1:] @ r[1:]) / det
    return np.concatenate([[x0], (r[1:] - x0 * lam[1:]) / lam[0]])


def _cone_radius(v: np.ndarray) -> float:
    """``sqrt(v0^2 - |v1|^2)`` factored to avoid cancellation near the boundary."""
    t = math.sqrt(v[1:] @ v[1:])
    return math.sqrt(max((v[0] - t) * (v[0] + t), 0.0))


class _SOCScaling:
    """Nesterov-Todd scaling ``W`` of one second-order cone with ``W z = W^-1 s``."""

    def __init__(self, s: np.ndarray, z: np.ndarray):
        sn, zn = _cone_radius(s), _cone_radius(z)
        if not (sn > 0.0 and zn > 0.0):
            raise FloatingPointError("cone iterate left the interior")
        sb, zb = s / sn, z / zn
        gam = math.sqrt(0.5 * (1.0 + sb @ zb))
        wb = np.concatenate([[sb[0] + zb[0]], sb[1:] - zb[1:]]) / (2.0 * gam)
        w = wb.copy()
        w[0] += 1.0
        w /= math.sqrt(2.0 * (wb[0] + 1.0))
        self.beta = math.sqrt(sn / zn)
        if not 0.0 < self.beta < math.inf:
            raise FloatingPointError("degenerate cone scaling")
        self.w = w
        self.lam = self.apply(z)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``W v`` with ``W = beta (2 w w^T - J)``."""
        w = self.w
        out = 2.0 * (w @ v) * w
        out[0] -= v[0]
        out[1:] += v[1:]
        return self.beta * out

    def apply_inv(self, v: np.ndarray) -> np.ndarray:
        """``W^-1 v`` with ``W^-1 = (2 Jw (Jw)^T - J) / beta``."""
        jw = self.w.copy()
        jw[1:] *= -1.0
        out = 2.0 * (jw @ v) * jw
        out[0] -= v[0]
        out[1:] += v[1:]
        return out / self.beta

    def inv_square(self) -> np.ndarray:
        """Dense ``W^-2``."""
        n = self.w.size
        jw = self.w.copy()
        jw[1:] *= -1.0
        Hm = 2.0 * np.outer(jw, jw)
        Hm[0, 0] -= 1.0
        Hm[np.arange(1, n), np.arange(1, n)] += 1.0
        return (Hm @ Hm) / (self.beta ** 2)


class _ConeProgram:
    """The subproblem as ``min c.x  s.t.  G x + s = h,  s in cone``.

    Variables are ``[y_u, y_d, s, r_u?, r_d?]``; on each positive-length
    interval ``k`` the input move is ``width * y_u / sqrt(dt_k)`` and the weight
    move is ``V y_d / sqrt(dt_k)`` with ``V`` an orthonormal basis of the
    zero-sum subspace, so both L2 norms become Euclidean norms of ``y``.
    The cone is a nonnegative orthant (rows, box, simplex) times one
    second-order cone per norm term.
    """

    def __init__(self, sp: Subproblem):
        base = sp.base
        w = base.partition.widths
        self.keep = np.flatnonzero(w > 0.0)
        sq = np.sqrt(w[self.keep])
        self.sq = sq
        K, m, q = self.keep.size, base.m, base.q
        box = np.asarray(sp.box, dtype=float).reshape(m, 2)
        width = box[:, 1] - box[:, 0]
        self.free_u = np.flatnonzero(width > 0.0)
        mu = self.free_u.size
        self.V = _orth_complement(q)
        qd = q - 1
        self.mu, self.qd, self.K, self.q = mu, qd, K, q
        self.width = width[self.free_u]
        self.nu_, self.nd_ = K * mu, K * qd
        self.ny = self.nu_ + self.nd_
        self.use_u = self.nu_ > 0
        self.use_d = self.nd_ > 0
        self.i_s = self.ny
        self.i_ru = self.ny + 1 if self.use_u else None
        self.i_rd = self.ny + 1 + self.use_u if self.use_d else None
        self.nx = self.ny + 1 + self.use_u + self.use_d

        u = base.u[self.keep][:, self.free_u]
        self.ylo = (sq[:, None] * (box[self.free_u, 0] - u) / self.width).reshape(-1)
        self.yhi = (sq[:, None] * (box[self.free_u, 1] - u) / self.width).reshape(-1)
        self.dsc = sq[:, None] * base.d[self.keep]

        R = sp.n_rows
        cu = sp.rows_u[:, self.keep][:, :, self.free_u] * (self.width / sq[:, None])[None]
        cd = np.einsum("rkq,qp->rkp", sp.rows_d[:, self.keep], self.V) / sq[None, :, None]
        self.C = np.concatenate([cu.reshape(R, -1), cd.reshape(R, -1)], axis=1)
        self.b = sp.offsets.copy()
        self.R = R
        self.Wu = np.tile(self.width, K) if self.use_u else np.zeros(0)

        # orthant layout: rows | lo | hi | simplex
        self.n_simp = K * q if self.use_d else 0
        self.l = R + 2 * self.nu_ + self.n_simp
        self.cones = []
        off = self.l
        if self.use_u:
            self.cones.append((off, self.nu_ + 1))
            off += self.nu_ + 1
        if self.use_d:
            self.cones.append((off, self.nd_ + 1))
            off += self.nd_ + 1
        self.ns = off
        self.h = np.concatenate([
            -self.b, -self.ylo, self.yhi,
            self.dsc.reshape(-1) if self.use_d else np.zeros(0),
            np.zeros(off - self.l)])
        self.c = np.zeros(self.nx)
        self.c[self.i_s] = 1.0
        for i in (self.i_ru, self.i_rd):
            if i is not None:
                self.c[i] = 1.0

    # structured products with G
    def G(self, x: np.ndarray) -> np.ndarray:
        y = x[: self.ny]
        yu, yd = y[: self.nu_], y[self.nu_:]
        parts = [self.C @ y - x[self.i_s], -yu, yu]
        if self.use_d:
            parts.append(-(yd.reshape(self.K, self.qd) @ self.V.T).reshape(-1))
        if self.use_u:
            parts.append(np.concatenate([[-x[self.i_ru]], -self.Wu * yu]))
        if self.use_d:
            parts.append(np.concatenate([[-x[self.i_rd]], -yd]))
        return np.concatenate(parts)

    def GT(self, z: np.ndarray) -> np.ndarray:
        out = np.zeros(self.nx)
        R, nu = self.R, self.nu_
        zr = z[:R]
        out[: self.ny] += self.C.T @ zr
        out[self.i_s] -= zr.sum()
        out[:nu] += -z[R: R + nu] + z[R + nu: R + 2 * nu]
        p = R + 2 * nu
        if self.use_d:
            zs = z[p: p + self.n_simp].reshape(self.K, self.q)
            out[nu: self.ny] -= (zs @ self.V).reshape(-1)
        for (o, n), which in zip(self.cones, [c for c in ("u", "d") if getattr(self, "use_" + c)]):
            zc = z[o: o + n]
            if which == "u":
                out[self.i_ru] -= zc[0]
                out[:nu] -= self.Wu * zc[1:]
            else:
                out[self.i_rd] -= zc[0]
                out[nu: self.ny] -= zc[1:]
        return out

    def normal_matrix(self, dl: np.ndarray, socs: list) -> np.ndarray:
        """``G^T W^-2 G`` for orthant weights ``dl = 1/w^2`` and cone scalings."""
        nx, ny, R, nu = self.nx, self.ny, self.R, self.nu_
        Hm = np.zeros((nx, nx))
        D = dl[:R]
        CD = self.C.T * D
        Hm[:ny, :ny] += CD @ self.C
        col = -CD.sum(axis=1)
        Hm[:ny, self.i_s] += col
        Hm[self.i_s, :ny] += col
        Hm[self.i_s, self.i_s] += D.sum()
        iu = np.arange(nu)
        Hm[iu, iu] += dl[R: R + nu] + dl[R + nu: R + 2 * nu]
        p = R + 2 * nu
        if self.use_d:
            ds = dl[p: p + self.n_simp].reshape(self.K, self.q)
            blocks = np.einsum("pa,kp,pb->kab", self.V, ds, self.V)
            for k in range(self.K):
                a = nu + k * self.qd
                Hm[a: a + self.qd, a: a + self.qd] += blocks[k]
        which = [c for c in ("u", "d") if getattr(self, "use_" + c)]
        for sc, kind in zip(socs, which):
            M = sc.inv_square()
            if kind == "u":
                idx = np.concatenate([[self.i_ru], iu])
                scale = np.concatenate([[1.0], self.Wu])
            else:
                idx = np.concatenate([[self.i_rd], np.arange(nu, ny)])
                scale = np.ones(self.nd_ + 1)
            Hm[np.ix_(idx, idx)] += scale[:, None] * M * scale[None, :]
        return Hm

    def normal_solver(self, dl: np.ndarray, socs: list) -> Callable[[np.ndarray], np.ndarray]:
        """Solver for ``G^T W^-2 G`` exploiting block-diagonal plus low-rank structure.

        The matrix splits into a part that is block diagonal away from the
        epigraph variable (box and simplex barriers, the scaled identity of each
        cone scaling), the row term ``C^T D C`` and two rank-one terms per cone.
        The epigraph variable is eliminated by a scalar Schur complement and the
        rest is solved with the Woodbury identity, falling back to a dense
        Cholesky factorization when that is cheaper.
        """
        R, nu, ny, nx = self.R, self.nu_, self.ny, self.nx
        n_low = R + 2 * len(socs)
        n_p = nx - 1
        if R * n_p * n_p + n_p ** 3 / 3.0 <= n_low * n_low * n_p + n_low ** 3 / 3.0:
            return _dense_solver(self.normal_matrix(dl, socs))

        D = dl[:R]
        bd = np.zeros(ny)
        bd[:nu] = dl[R: R + nu] + dl[R + nu: R + 2 * nu]
        which = [c for c in ("u", "d") if getattr(self, "use_" + c)]
        t_idx = [self.i_s]
        nT = 1 + len(socs)
        HyT = np.zeros((ny, nT))
        HTT = np.zeros((nT, nT))
        HyT[:, 0] = -(self.C.T @ D)
        HTT[0, 0] = float(D.sum())
        low_vecs, low_w = [], []
        for c, (sc, kind) in enumerate(zip(socs, which), start=1):
            # W^-2 = (2 a a^T - J)^2 / beta^2 with a = J w, split into the radius
            # entry, its coupling column and identity plus rank one on the rest
            a = sc.w.copy()
            a[1:] *= -1.0
            aa = float(a @ a)
            b2 = sc.beta ** 2
            if kind == "u":
                yi, scale, t_var = np.arange(nu), self.Wu, self.i_ru
            else:
                yi, scale, t_var = np.arange(nu, ny), np.ones(self.nd_), self.i_rd
            t_idx.append(t_var)
            bd[yi] += scale * scale / b2
            HTT[c, c] = (1.0 + 4.0 * aa * a[0] ** 2 - 4.0 * a[0] ** 2) / b2
            HyT[yi, c] = 4.0 * aa * a[0] * scale * a[1:] / b2
            vec = np.zeros(ny)
            vec[yi] = scale * a[1:]
            low_vecs.append(vec)
            low_w.append(4.0 * (aa + 1.0) / b2)

        blk_inv = None
        if self.use_d:
            p = R + 2 * nu
            ds = dl[p: p + self.n_simp].reshape(self.K, self.q)
            blocks = np.einsum("pa,kp,pb->kab", self.V, ds, self.V)
            diag = bd[nu: ny].reshape(self.K, self.qd)
            blocks[:, np.arange(self.qd), np.arange(self.qd)] += diag
            blk_inv = np.linalg.inv(blocks)

        def binv(v):
            out = v / bd
            if blk_inv is not None:
                out[..., nu:] = np.einsum("kab,...kb->...ka", blk_inv,
                                     v[..., nu:].reshape(v.shape[:-1] + (self.K, self.qd))
                                     ).reshape(v.shape[:-1] + (self.nd_,))
            return out

        def binv_cols(M):
            return binv(M.T).T

        U = np.vstack([self.C] + [v[None] for v in low_vecs]) if low_vecs else self.C
        weights = np.concatenate([D, low_w])
        Z = binv_cols(U.T)
        # capacitance with positive weights: E^-1 + U B^-1 U^T
        S = U @ Z
        S[np.diag_indices_from(S)] += 1.0 / np.maximum(weights, 1e-300)
        cap = cho_factor(S, check_finite=False)

        def hyy_inv(V):
            X = binv_cols(V)
            return X - Z @ cho_solve(cap, U @ X, check_finite=False)

        Y = hyy_inv(HyT)
        schur = HTT - HyT.T @ Y
        schur_f = lu_factor(schur, check_finite=False)
        t_idx = np.array(t_idx)

        def solve(v):
            vy = v[:ny]
            xy0 = hyy_inv(vy[:, None])[:, 0]
            xt = lu_solve(schur_f, v[t_idx] - HyT.T @ xy0, check_finite=False)
            out = np.empty(nx)
            out[:ny] = xy0 - Y @ xt
            out[t_idx] = xt
            return out

        return solve

    def start(self) -> np.ndarray:
        """A strictly feasible primal point."""
        x = np.zeros(self.nx)
        if self.use_u:
            x[: self.nu_] = 0.3 * 0.5 * (self.ylo + self.yhi)
        if self.use_d:
            move = 0.3 * (1.0 / self.q - self.dsc / self.sq[:, None])
            x[self.nu_: self.ny] = (self.sq[:, None] * (move @ self.V)).reshape(-1)
        yu, yd = x[: self.nu_], x[self.nu_: self.ny]
        if self.use_u:
            x[self.i_ru] = 1.5 * float(np.linalg.norm(self.Wu * yu)) + 1e-3
        if self.use_d:
            x[self.i_rd] = 1.5 * float(np.linalg.norm(yd)) + 1e-3
        x[self.i_s] = float((self.C @ x[: self.ny] + self.b).max()) + 1.0
        return x

    def to_control(self, x: np.ndarray, sp: Subproblem) -> PiecewiseControl:
        base = sp.base
        u = base.u.copy()
        d = base.d.copy()
        if self.use_u:
            move = x[: self.nu_].reshape(self.K, self.mu) * self.width / self.sq[:, None]
            sub = u[self.keep]
            sub[:, self.free_u] += move
            u[self.keep] = sub
        if self.use_d:
            move = (x[self.nu_: self.ny].reshape(self.K, self.qd) @ self.V.T) / self.sq[:, None]
            d[self.keep] += move
        if base.m:
            box = np.asarray(sp.box).reshape(base.m, 2)
            u = np.clip(u, box[:, 0], box[:, 1])
        if self.use_d:
            d = np.array([simplex_project(row) for row in d])
        return PiecewiseControl(base.partition, u, d, pure=False)


def _cone_barrier_dual(cp: _ConeProgram, s: np.ndarray) -> np.ndarray:
    """Dual starting point on the central path direction of ``s``."""
    z = np.empty_like(s)
    z[: cp.l] = 1.0 / s[: cp.l]
    for o, n in cp.cones:
        sc = s[o: o + n]
        det = sc[0] * sc[0] - sc[1:] @ sc[1:]
        z[o: o + n] = np.concatenate([[sc[0]], -sc[1:]]) / det
    return z


def _max_step(cp: _ConeProgram, s: np.ndarray, ds: np.ndarray) -> float:
    neg = ds[: cp.l] < 0.0
    step = float(np.min(-s[: cp.l][neg] / ds[: cp.l][neg])) if neg.any() else math.inf
    for o, n in cp.cones:
        step = min(step, _soc_step(s[o: o + n], ds[o: o + n]))
    return step


def solve_theta(sp: Subproblem, tol: float = 1e-8, max_iters: int = 100) -> OptimalityReport:
    """Minimize the subproblem with a primal-dual interior-point method.

    The iteration starts primal feasible and uses Mehrotra predictor-corrector
    steps with Nesterov-Todd scaling. It stops when the duality gap falls
    below ``tol * max(1, |objective|)`` with the dual residual equally small.
    """
    cp = _ConeProgram(sp)
    zero_value = float(sp.offsets.max())  # objective at xi' = xi
    if cp.ny == 0:
        return _report(sp, sp.base.as_relaxed(), 0, 0.0, zero_value)

    x = cp.start()
    s = cp.h - cp.G(x)
    z = _cone_barrier_dual(cp, s)
    degree = cp.l + len(cp.cones)
    cnorm = max(1.0, float(np.linalg.norm(cp.c)))
    gap = math.inf
    it = 0
    for it in range(1, max_iters + 1):
        rx = cp.GT(z) + cp.c
        rz = cp.G(x) + s - cp.h
        gap = float(s @ z)
        if not math.isfinite(gap):
            raise SolverStall("interior-point iterate became non-finite", residual=gap, iters=it)
        pcost = float(cp.c @ x)
        scale = max(1.0, abs(pcost))
        if gap <= tol * scale and np.linalg.norm(rx) <= DUAL_TOL * cnorm:
            break
        try:
            x, s, z = _pd_step(cp, x, s, z, rx, rz, gap / degree)
        except (ZeroDivisionError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
            # scalings degenerate once both cones sit on their boundary
            if gap <= BREAKDOWN_SLACK * tol * scale:
                break
            raise SolverStall(f"interior-point breakdown at gap {gap:.3g}: {exc}",
                              residual=gap, iters=it) from exc
    else:
        raise SolverStall(f"interior-point method stalled after {max_iters} iterations (gap {gap:.3g})",
                          residual=gap, iters=max_iters)
    target = cp.to_control(x, sp)
    return _report(sp, target, it, gap, zero_value)


def _dense_solver(Hm: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    try:
        chol = cho_factor(Hm, check_finite=False)
    except np.linalg.LinAlgError:
        Hm = Hm.copy()
        Hm[np.diag_indices_from(Hm)] += 1e-12 * max(1.0, float(np.abs(np.diag(Hm)).max()))
        chol = cho_factor(Hm, check_finite=False)
    return lambda v: cho_solve(chol, v, check_finite=False)


def _pcg(matvec, precond, rhs, x, tol, max_iters):
    """Preconditioned conjugate gradients from ``x``; returns ``(x, relative residual)``."""
    scale = max(float(np.linalg.norm(rhs)), 1e-300)
    r = rhs - matvec(x)
    z = precond(r)
    p = z.copy()
    rz = float(r @ z)
    best, best_res = x, float(np.linalg.norm(r)) / scale
    for _ in range(max_iters):
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0 or rz == 0.0:
            break
        a = rz / pAp
        x = x + a * p
        r = r - a * Ap
        res = float(np.linalg.norm(r)) / scale
        if res < best_res:
            best, best_res = x, res
        if res <= tol:
            break
        z = precond(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return best, best_res


def _refined_solve(solver: dict, matvec, rhs: np.ndarray) -> np.ndarray:
    """Solve ``H dx = rhs`` to a relative residual of about ``REFINE_TOL``.

    Iterative refinement on the structured factorization comes first; when it
    stalls, conjugate gradients preconditioned by the same factorization take
    over, and a dense factorization is the last resort for small systems.
    """
    scale = max(float(np.linalg.norm(rhs)), 1e-300)
    dx = solver["solve"](rhs)
    res = rhs - matvec(dx)
    prev = float(np.linalg.norm(res)) / scale
    for _ in range(REFINE_STEPS):
        if prev <= REFINE_TOL:
            return dx
        step = dx + solver["solve"](res)
        res_new = rhs - matvec(step)
        cur = float(np.linalg.norm(res_new)) / scale
        if cur < prev:
            dx, res = step, res_new
        if cur > 0.5 * prev:
            prev = min(prev, cur)
            break
        prev = cur
    if prev <= REFINE_ACCEPT or solver.get("is_dense"):
        return dx
    dx, prev = _pcg(matvec, solver["solve"], rhs, dx, REFINE_TOL, PCG_ITERS)
    if prev <= REFINE_ACCEPT or rhs.size > DENSE_FALLBACK_MAX:
        return dx
    solver["solve"] = solver.pop("dense")()
    solver["is_dense"] = True
    return solver["solve"](rhs)


def _pd_step(cp: _ConeProgram, x, s, z, rx, rz, mu):
    """One Mehrotra predictor-corrector step with Nesterov-Todd scaling."""
    l = cp.l
    with np.errstate(invalid="raise", divide="raise"):
        wl = np.sqrt(s[:l] / z[:l])
        lam_l = np.sqrt(s[:l] * z[:l])
        socs = [_SOCScaling(s[o: o + n], z[o: o + n]) for o, n in cp.cones]
    solver = {"solve": cp.normal_solver(1.0 / (wl * wl), socs),
              "dense": lambda: _dense_solver(cp.normal_matrix(1.0 / (wl * wl), socs))}

    def W(v):
        out = np.empty_like(v)
        out[:l] = wl * v[:l]
        for (o, n), sc in zip(cp.cones, socs):
            out[o: o + n] = sc.apply(v[o: o + n])
        return out

    def Winv(v):
        out = np.empty_like(v)
        out[:l] = v[:l] / wl
        for (o, n), sc in zip(cp.cones, socs):
            out[o: o + n] = sc.apply_inv(v[o: o + n])
        return out

    def newton(rc):
        # W dz + W^-1 ds = lam \ rc ;  G dx + ds = -rz ;  G^T dz = -rx
        t = np.empty_like(rc)
        t[:l] = rc[:l] / lam_l
        for (o, n), sc in zip(cp.cones, socs):
            t[o: o + n] = _jordan_div(sc.lam, rc[o: o + n])
        wt = W(t)
        rhs = -rx - cp.GT(Winv(Winv(wt + rz)))
        dx = _refined_solve(solver, lambda v: cp.GT(Winv(Winv(cp.G(v)))), rhs)
        gdx = cp.G(dx)
        dz = Winv(Winv(gdx + wt + rz))
        ds = -rz - gdx
        return dx, ds, dz

    lamsq = np.empty(cp.ns)
    lamsq[:l] = lam_l * lam_l
    e = np.zeros(cp.ns)
    e[:l] = 1.0
    for (o, n), sc in zip(cp.cones, socs):
        lamsq[o: o + n] = _jordan(sc.lam, sc.lam)
        e[o] = 1.0

    gap = float(s @ z)
    dx, ds, dz = newton(-lamsq)
    a_aff = min(1.0, _max_step(cp, s, ds), _max_step(cp, z, dz))
    sigma = min(1.0, max(0.0, float((s + a_aff * ds) @ (z + a_aff * dz)) / gap)) ** 3
    ws, wz = Winv(ds), W(dz)
    corr = np.empty(cp.ns)
    corr[:l] = ws[:l] * wz[:l]
    for o, n in cp.cones:
        corr[o: o + n] = _jordan(ws[o: o + n], wz[o: o + n])
    dx, ds, dz = newton(sigma * mu * e - lamsq - corr)
    alpha = min(1.0, 0.99 * min(_max_step(cp, s, ds), _max_step(cp, z, dz)))
    if not np.isfinite(alpha) or alpha <= 0.0:
        raise FloatingPointError("no admissible step")
    return x + alpha * dx, s + alpha * ds, z + alpha * dz


def _report(sp: Subproblem, target: PiecewiseControl, iters: int, gap: float,
            zero_value: float) -> OptimalityReport:
    value = sp.zeta(target)
    if not value <= zero_value:
        # the base point itself attains max(offsets) + 0
        target, value = sp.base.as_relaxed(), zero_value
    w = target - sp.base
    rows = sp.row_values(w)
    peak = rows.max()
    active = [sp.tags[i] for i in np.flatnonzero(rows >= peak - ACTIVE_TOL)]
    return OptimalityReport(theta=float(value), direction=target, step_norm=x_norm(w),
                            active=active, solver_iters=iters, residual=gap,
                            branch=sp.branch, subproblem=sp)
