"""Two-stage refinement of coarse path candidates.

Stage 1 minimizes the total path length over the interaction points, each
restricted to the infinite plane through its current position and normal
and parameterized by two tangent coordinates. Stage 2 re-casts the path
segment by segment and accepts it when the surface found near every
optimized point agrees with the plane it was optimized on (normal angle and
plane distance thresholds). Failing interactions are re-anchored to the
surfaces actually hit and the optimization is retried.

Stage 1 is gradient descent with an Armijo backtracking line search; the
trial step follows the Barzilai-Borwein rule after the first iteration.
The gradient of the length with respect to interaction point ``I_k`` is

    (I_k - I_{k-1}) / |I_k - I_{k-1}| + (I_k - I_{k+1}) / |I_k - I_{k+1}|

projected on the tangent basis of the point's plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .grid import AccelStructure
from .isect import IntersectionConfig, cast_kernel, geometry, visible_from_surface, visible_kernel
from .paths import InteractionKind, Interaction, PathSet, PropagationPath
from .dedup import _hash_all

REJECTED = 0
ACCEPTED = 1
SKIPPED = 2

_DEGENERATE = 1e-9
_ARMIJO = 1e-4


@dataclass(frozen=True)
class RefinementConfig:
    max_iterations: int = 50
    retry_count: int = 10
    convergence_threshold: float = 1e-4
    angle_threshold: float = 1.0  # degrees
    distance_threshold: float = 0.01
    step_size: float = 0.05
    # candidates sharing a coarse trajectory (rx + surface labels) are skipped once one
    # of them refined successfully, or after this many rejections (0 = never skip)
    key_attempt_limit: int = 2
    # once converged, keep iterating (at most polish_iterations more) until the squared
    # gradient drops below polish_tolerance; leaves the convergence decision untouched
    polish_tolerance: float = 1e-14
    polish_iterations: int = 20
    # a chain that validates but whose stage 1 stopped on the iteration cap is
    # retried from its current points instead of being accepted
    require_convergence: bool = True
    # two consecutive interaction points closer than this sit on a crease of the path-length
    # function; stationarity there is judged on the subdifferential and the chain is rejected
    kink_length: float = 1e-3

    def __post_init__(self):
        if self.max_iterations < 1 or self.retry_count < 0:
            raise ValueError("max_iterations must be >= 1 and retry_count >= 0")
        for name in ("convergence_threshold", "angle_threshold", "distance_threshold", "step_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.key_attempt_limit < 0:
            raise ValueError("key_attempt_limit must be >= 0")
        if self.polish_tolerance < 0 or self.polish_iterations < 0:
            raise ValueError("polish settings must be non-negative")
        if not self.kink_length >= 0:
            raise ValueError("kink_length must be non-negative")


def path_length(points) -> float:
    """Sum of consecutive segment lengths of ``TX, I_1, ..., I_N, RX``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


# --------------------------------------------------------------------------- kernels


@njit(cache=True)
def _basis(nx, ny, nz):
    if abs(nx) < 0.9:
        ax, ay, az = 1.0, 0.0, 0.0
    else:
        ax, ay, az = 0.0, 1.0, 0.0
    ux = ay * nz - az * ny
    uy = az * nx - ax * nz
    uz = ax * ny - ay * nx
    l = math.sqrt(ux * ux + uy * uy + uz * uz)
    ux /= l
    uy /= l
    uz /= l
    vx = ny * uz - nz * uy
    vy = nz * ux - nx * uz
    vz = nx * uy - ny * ux
    return ux, uy, uz, vx, vy, vz


@njit(cache=True)
def _bases(nrm, n):
    u = np.empty((n, 3))
    v = np.empty((n, 3))
    for k in range(n):
        u[k, 0], u[k, 1], u[k, 2], v[k, 0], v[k, 1], v[k, 2] = _basis(nrm[k, 0], nrm[k, 1], nrm[k, 2])
    return u, v


@njit(cache=True)
def _place(c, u, v, x, n, pts):
    for k in range(n):
        for a in range(3):
            pts[k, a] = c[k, a] + x[2 * k] * u[k, a] + x[2 * k + 1] * v[k, a]


@njit(cache=True)
def _length_grad(start, end, c, u, v, x, n, pts, units, grad):
    """Path length and tangent-coordinate gradient; length < 0 flags a degenerate segment."""
    _place(c, u, v, x, n, pts)
    f = 0.0
    for j in range(n + 1):
        if j == 0:
            ax, ay, az = start[0], start[1], start[2]
        else:
            ax, ay, az = pts[j - 1, 0], pts[j - 1, 1], pts[j - 1, 2]
        if j == n:
            bx, by, bz = end[0], end[1], end[2]
        else:
            bx, by, bz = pts[j, 0], pts[j, 1], pts[j, 2]
        dx = bx - ax
        dy = by - ay
        dz = bz - az
        L = math.sqrt(dx * dx + dy * dy + dz * dz)
        if L < _DEGENERATE:
            return -1.0
        f += L
        units[j, 0] = dx / L
        units[j, 1] = dy / L
        units[j, 2] = dz / L
    for k in range(n):
        gx = units[k, 0] - units[k + 1, 0]
        gy = units[k, 1] - units[k + 1, 1]
        gz = units[k, 2] - units[k + 1, 2]
        grad[2 * k] = gx * u[k, 0] + gy * u[k, 1] + gz * u[k, 2]
        grad[2 * k + 1] = gx * v[k, 0] + gy * v[k, 1] + gz * v[k, 2]
    return f


@njit(cache=True)
def _chain_units(start, end, pts, n, units, seg):
    """Unit vectors and lengths of the ``n + 1`` segments; zero-length segments get a zero vector."""
    for j in range(n + 1):
        if j == 0:
            ax, ay, az = start[0], start[1], start[2]
        else:
            ax, ay, az = pts[j - 1, 0], pts[j - 1, 1], pts[j - 1, 2]
        if j == n:
            bx, by, bz = end[0], end[1], end[2]
        else:
            bx, by, bz = pts[j, 0], pts[j, 1], pts[j, 2]
        dx = bx - ax
        dy = by - ay
        dz = bz - az
        L = math.sqrt(dx * dx + dy * dy + dz * dz)
        seg[j] = L
        inv = 1.0 / L if L > 0.0 else 0.0
        units[j, 0] = dx * inv
        units[j, 1] = dy * inv
        units[j, 2] = dz * inv


@njit(cache=True)
def _kink_residual(units, short, u, v, n, t_c):
    """Smallest squared tangent gradient over the subdifferential of the short segments.

    A short segment's unit vector is replaced by a free vector in the unit
    ball (rows of ``W``; the others stay fixed); projected gradient on those
    vectors stops once the residual drops under ``t_c``.
    """
    W = np.zeros((n + 1, 3))
    for j in range(n + 1):
        for a in range(3):
            W[j, a] = units[j, a]
    pr = np.empty((n, 3))
    best = np.inf
    for _ in range(200):
        total = 0.0
        for k in range(n):
            rx = W[k, 0] - W[k + 1, 0]
            ry = W[k, 1] - W[k + 1, 1]
            rz = W[k, 2] - W[k + 1, 2]
            gu = rx * u[k, 0] + ry * u[k, 1] + rz * u[k, 2]
            gv = rx * v[k, 0] + ry * v[k, 1] + rz * v[k, 2]
            total += gu * gu + gv * gv
            for a in range(3):
                pr[k, a] = gu * u[k, a] + gv * v[k, a]
        best = min(best, total)
        if best < t_c:
            break
        for j in range(1, n):
            if not short[j]:
                continue
            ln = 0.0
            for a in range(3):
                # gradient 2 (pr_j - pr_{j-1}); step 1/8 is safe for chains of adjacent short segments
                W[j, a] -= 0.25 * (pr[j, a] - pr[j - 1, a])
                ln += W[j, a] * W[j, a]
            if ln > 1.0:
                ln = math.sqrt(ln)
                for a in range(3):
                    W[j, a] /= ln
    return best


@njit(cache=True)
def _crease_point(p, q, na, nb):
    """Point of the line shared by planes ``(p, na)`` and ``(q, nb)`` nearest their midpoint, and its direction."""
    ex = na[1] * nb[2] - na[2] * nb[1]
    ey = na[2] * nb[0] - na[0] * nb[2]
    ez = na[0] * nb[1] - na[1] * nb[0]
    el = math.sqrt(ex * ex + ey * ey + ez * ez)
    out = np.empty(3)
    e = np.empty(3)
    if el < 1e-6:
        return False, out, e
    e[0] = ex / el
    e[1] = ey / el
    e[2] = ez / el
    cab = na[0] * nb[0] + na[1] * nb[1] + na[2] * nb[2]
    m = 0.5 * (p + q)
    r1 = na[0] * (p[0] - m[0]) + na[1] * (p[1] - m[1]) + na[2] * (p[2] - m[2])
    r2 = nb[0] * (q[0] - m[0]) + nb[1] * (q[1] - m[1]) + nb[2] * (q[2] - m[2])
    det = 1.0 - cab * cab
    a = (r1 - cab * r2) / det
    b = (r2 - cab * r1) / det
    for i in range(3):
        out[i] = m[i] + a * na[i] + b * nb[i]
    return True, out, e


@njit(cache=True)
def _descend(start, end, c, u, v, n, x, history, it, max_iter, t_c, step, polish_tol, polish_iter, kink,
             stop_at_conv):
    """Barzilai-Borwein descent on tangent coordinates ``x`` (updated in place).

    Returns ``(f, it, conv_it, crease)``. ``crease`` is the index ``j`` of the
    second point of an inner segment that got shorter than ``kink`` before
    convergence (descent stops there), else -1. ``f < 0`` flags a degenerate
    start.
    """
    m = 2 * n
    xn = np.empty(m)
    g = np.empty(m)
    gn = np.empty(m)
    pts = np.empty((n, 3))
    units = np.empty((n + 1, 3))
    f = _length_grad(start, end, c, u, v, x, n, pts, units, g)
    if f < 0.0:
        return f, it, -1, -1
    if it < history.shape[0]:
        history[it] = f
    gg = 0.0
    for i in range(m):
        gg += g[i] * g[i]
    kk = kink * kink
    alpha = step
    conv_it = -1
    while True:
        if conv_it < 0:
            if gg < t_c:
                conv_it = it
                if stop_at_conv:
                    break
            else:
                for j in range(1, n):
                    dx = pts[j, 0] - pts[j - 1, 0]
                    dy = pts[j, 1] - pts[j - 1, 1]
                    dz = pts[j, 2] - pts[j - 1, 2]
                    if dx * dx + dy * dy + dz * dz < kk:
                        return f, it, -1, j
                if it >= max_iter:
                    break
        if conv_it >= 0 and (gg < polish_tol or it - conv_it >= polish_iter):
            break
        a = alpha
        accepted = False
        fn = f
        for _ in range(60):
            for i in range(m):
                xn[i] = x[i] - a * g[i]
            fn = _length_grad(start, end, c, u, v, xn, n, pts, units, gn)
            if fn >= 0.0 and fn <= f - _ARMIJO * a * gg:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            break
        sy = 0.0
        ss = 0.0
        for i in range(m):
            s = xn[i] - x[i]
            y = gn[i] - g[i]
            sy += s * y
            ss += s * s
        alpha = ss / sy if sy > 1e-18 else 2.0 * a
        alpha = min(max(alpha, 1e-9), 1e3)
        gg = 0.0
        for i in range(m):
            x[i] = xn[i]
            g[i] = gn[i]
            gg += g[i] * g[i]
        f = fn
        it += 1
        if it < history.shape[0]:
            history[it] = f
    return f, it, conv_it, -1


@njit(cache=True)
def _minimize(start, end, c0, u0, v0, n0, max_iter, t_c, step, history, polish_tol, polish_iter, kink):
    """Stage 1. Returns ``(points, f, iterations, converged, degenerate, kinked)``.

    ``iterations`` counts the steps taken until the convergence test passed
    (or all of them when it never did). ``history[i]`` receives the length
    after ``i`` accepted iterations.

    Path length is convex but not smooth where two consecutive interaction
    points meet on the line shared by their planes. When an inner segment
    gets shorter than ``kink`` the pair is merged into one point sliding
    along that line and descent continues on the reduced chain. If the
    reduced minimum is also stationary for the full chain (checked on the
    subdifferential) the chain has converged onto the crease and ``kinked``
    is set; otherwise descent resumes on the full chain from the state
    before the merge, with merging disabled.
    """
    full = np.empty((n0, 3))
    x = np.zeros(2 * n0)
    use_kink = kink if n0 > 1 else 0.0
    f, it, conv_it, j = _descend(start, end, c0, u0, v0, n0, x, history, 0, max_iter, t_c, step, polish_tol,
                                 polish_iter, use_kink, False)
    if f < 0.0:
        for k in range(n0):
            for a in range(3):
                full[k, a] = c0[k, a]
        return full, f, 0, False, True, False
    if j > 0:
        _place(c0, u0, v0, x, n0, full)
        na = np.empty(3)
        nb = np.empty(3)
        na[0] = u0[j - 1, 1] * v0[j - 1, 2] - u0[j - 1, 2] * v0[j - 1, 1]
        na[1] = u0[j - 1, 2] * v0[j - 1, 0] - u0[j - 1, 0] * v0[j - 1, 2]
        na[2] = u0[j - 1, 0] * v0[j - 1, 1] - u0[j - 1, 1] * v0[j - 1, 0]
        nb[0] = u0[j, 1] * v0[j, 2] - u0[j, 2] * v0[j, 1]
        nb[1] = u0[j, 2] * v0[j, 0] - u0[j, 0] * v0[j, 2]
        nb[2] = u0[j, 0] * v0[j, 1] - u0[j, 1] * v0[j, 0]
        ok, q, e = _crease_point(full[j - 1], full[j], na, nb)
        if ok:
            n = n0 - 1
            c2 = np.empty((n, 3))
            u2 = np.empty((n, 3))
            v2 = np.empty((n, 3))
            for k in range(n):
                src = k if k < j else k + 1
                for a in range(3):
                    c2[k, a] = full[src, a]
                    u2[k, a] = u0[src, a]
                    v2[k, a] = v0[src, a]
            for a in range(3):
                c2[j - 1, a] = q[a]
                u2[j - 1, a] = e[a]
                v2[j - 1, a] = 0.0
            x2 = np.zeros(2 * n)
            f2, it2, conv2, _ = _descend(start, end, c2, u2, v2, n, x2, history, it, max_iter, t_c, step,
                                         polish_tol, polish_iter, 0.0, True)
            if f2 >= 0.0 and conv2 >= 0:
                reduced = np.empty((n, 3))
                _place(c2, u2, v2, x2, n, reduced)
                for k in range(n0):
                    src = k if k < j else k - 1
                    for a in range(3):
                        full[k, a] = reduced[src, a]
                funits = np.empty((n0 + 1, 3))
                seg = np.empty(n0 + 1)
                _chain_units(start, end, full, n0, funits, seg)
                short = np.zeros(n0 + 1, np.bool_)
                for jj in range(1, n0):
                    short[jj] = seg[jj] < kink
                if _kink_residual(funits, short, u0, v0, n0, t_c) < t_c:
                    return full, f2, conv2, True, False, True
            it = it2
        # not a minimum of the full chain: resume from the pre-merge state
        f, it, conv_it, _ = _descend(start, end, c0, u0, v0, n0, x, history, it, max_iter, t_c, step,
                                     polish_tol, polish_iter, 0.0, False)
    _place(c0, u0, v0, x, n0, full)
    if conv_it >= 0:
        return full, f, conv_it, True, False, False
    return full, f, it, False, False, False


@njit(cache=True)
def _refine_chain(g, start, end, n, anchor_p, anchor_n, max_iter, retries, t_c, cos_ta, t_d, step,
                  polish_tol, polish_iter, need_conv, kink, out_p, out_n, out_dps, out_near):
    """Refine one specular chain. Returns ``(accepted, length, first_iters, first_converged)``."""
    c = anchor_p[:n].copy()
    nn = anchor_n[:n].copy()
    hdps = np.empty(n, np.int64)
    hnear = np.empty(n, np.int64)
    history = np.empty(max_iter + polish_iter + 1)
    first_iters = 0
    first_conv = False
    for attempt in range(retries + 1):
        u, v = _bases(nn, n)
        pts, f, iters, conv, degenerate, kinked = _minimize(start, end, c, u, v, n, max_iter, t_c, step, history,
                                                            polish_tol, polish_iter, kink)
        if attempt == 0:
            first_iters = iters
            first_conv = conv
        if degenerate or kinked:
            return False, 0.0, first_iters, first_conv

        all_ok = True
        for k in range(n):
            if k == 0:
                ox, oy, oz = start[0], start[1], start[2]
                t_min = 0.0
            else:
                px, py, pz = pts[k - 1, 0], pts[k - 1, 1], pts[k - 1, 2]
                side = (pts[k, 0] - px) * nn[k - 1, 0] + (pts[k, 1] - py) * nn[k - 1, 1] \
                    + (pts[k, 2] - pz) * nn[k - 1, 2]
                s = g.offset if side >= 0.0 else -g.offset
                ox = px + s * nn[k - 1, 0]
                oy = py + s * nn[k - 1, 1]
                oz = pz + s * nn[k - 1, 2]
                t_min = g.start_slack
            dx = pts[k, 0] - ox
            dy = pts[k, 1] - oy
            dz = pts[k, 2] - oz
            L = math.sqrt(dx * dx + dy * dy + dz * dz)
            if L < _DEGENERATE:
                return False, 0.0, first_iters, first_conv
            dx /= L
            dy /= L
            dz /= L
            ok, t, hx, hy, hz, dps, near = cast_kernel(g, ox, oy, oz, dx, dy, dz, t_min, np.inf)
            if not ok:
                return False, 0.0, first_iters, first_conv
            qx = ox + t * dx
            qy = oy + t * dy
            qz = oz + t * dz
            cosang = abs(hx * nn[k, 0] + hy * nn[k, 1] + hz * nn[k, 2])
            plane_d = abs((qx - pts[k, 0]) * nn[k, 0] + (qy - pts[k, 1]) * nn[k, 1] + (qz - pts[k, 2]) * nn[k, 2])
            hdps[k] = dps
            hnear[k] = near
            if cosang > cos_ta and plane_d < t_d:
                for a in range(3):
                    c[k, a] = pts[k, a]
            else:
                all_ok = False
                c[k, 0] = qx
                c[k, 1] = qy
                c[k, 2] = qz
                nn[k, 0] = hx
                nn[k, 1] = hy
                nn[k, 2] = hz
        if not all_ok or (need_conv and not conv):
            continue

        # reflection side: both neighbours on the same side of each plane
        for k in range(n):
            if k == 0:
                ax, ay, az = start[0], start[1], start[2]
            else:
                ax, ay, az = pts[k - 1, 0], pts[k - 1, 1], pts[k - 1, 2]
            if k == n - 1:
                bx, by, bz = end[0], end[1], end[2]
            else:
                bx, by, bz = pts[k + 1, 0], pts[k + 1, 1], pts[k + 1, 2]
            sa = (ax - pts[k, 0]) * nn[k, 0] + (ay - pts[k, 1]) * nn[k, 1] + (az - pts[k, 2]) * nn[k, 2]
            sb = (bx - pts[k, 0]) * nn[k, 0] + (by - pts[k, 1]) * nn[k, 1] + (bz - pts[k, 2]) * nn[k, 2]
            if sa * sb <= 0.0:
                return False, 0.0, first_iters, first_conv
            s = 1.0 if sa > 0.0 else -1.0
            for a in range(3):
                out_p[k, a] = pts[k, a]
                out_n[k, a] = s * nn[k, a]
            out_dps[k] = hdps[k]
            out_near[k] = hnear[k]
        last = n - 1
        if not visible_from_surface(g, pts[last, 0], pts[last, 1], pts[last, 2],
                                    out_n[last, 0], out_n[last, 1], out_n[last, 2], end[0], end[1], end[2]):
            return False, 0.0, first_iters, first_conv
        return True, f, first_iters, first_conv
    return False, 0.0, first_iters, first_conv


@njit(cache=True, parallel=True)
def _refine_groups(g, group_ptr, members, start, end, n, anchor_p, anchor_n, max_iter, retries, t_c,
                   cos_ta, t_d, step, polish_tol, polish_iter, need_conv, kink, limit):
    C = start.shape[0]
    K = anchor_p.shape[1]
    out_p = np.zeros((C, K, 3))
    out_n = np.zeros((C, K, 3))
    out_dps = np.full((C, K), -1, np.int64)
    out_near = np.full((C, K), -1, np.int64)
    length = np.zeros(C)
    status = np.full(C, SKIPPED, np.int64)
    iters = np.zeros(C, np.int64)
    conv = np.zeros(C, np.bool_)
    for gi in prange(group_ptr.shape[0] - 1):
        failures = 0
        for m in range(group_ptr[gi], group_ptr[gi + 1]):
            ci = members[m]
            ok, L, it, cv = _refine_chain(g, start[ci], end[ci], n[ci], anchor_p[ci], anchor_n[ci], max_iter,
                                          retries, t_c, cos_ta, t_d, step, polish_tol, polish_iter, need_conv,
                                          kink, out_p[ci], out_n[ci], out_dps[ci], out_near[ci])
            iters[ci] = it
            conv[ci] = cv
            if ok:
                status[ci] = ACCEPTED
                length[ci] = L
                if limit > 0:
                    break
            else:
                status[ci] = REJECTED
                failures += 1
                if limit > 0 and failures >= limit:
                    break
    return out_p, out_n, out_dps, out_near, length, status, iters, conv


# --------------------------------------------------------------------------- python API


@dataclass
class RefineResult:
    paths: PathSet  # accepted paths, in candidate order
    status: np.ndarray  # per candidate: REJECTED / ACCEPTED / SKIPPED
    iterations: np.ndarray  # stage-1 iterations of the first attempt
    converged: np.ndarray  # first attempt met the gradient criterion


def _cfg_args(cfg: RefinementConfig):
    return (int(cfg.max_iterations), int(cfg.retry_count), float(cfg.convergence_threshold),
            math.cos(math.radians(cfg.angle_threshold)), float(cfg.distance_threshold), float(cfg.step_size),
            float(cfg.polish_tolerance), int(cfg.polish_iterations), bool(cfg.require_convergence),
            float(cfg.kink_length))


@njit(cache=True)
def _final_leg_mismatch(n, start, end, point, normal):
    """``1 - cos`` between the mirror direction at the last bounce and the direction to the receiver.

    Bounce chains are specular by construction except at the final leg, so a
    small value means the coarse chain is already close to a true path.
    """
    C = n.shape[0]
    out = np.empty(C)
    for c in range(C):
        k = n[c] - 1
        if k > 0:
            ax, ay, az = point[c, k - 1, 0], point[c, k - 1, 1], point[c, k - 1, 2]
        else:
            ax, ay, az = start[c, 0], start[c, 1], start[c, 2]
        px, py, pz = point[c, k, 0], point[c, k, 1], point[c, k, 2]
        nx, ny, nz = normal[c, k, 0], normal[c, k, 1], normal[c, k, 2]
        ix, iy, iz = px - ax, py - ay, pz - az
        ox, oy, oz = end[c, 0] - px, end[c, 1] - py, end[c, 2] - pz
        nn = nx * nx + ny * ny + nz * nz
        li = ix * ix + iy * iy + iz * iz
        lo = ox * ox + oy * oy + oz * oz
        if nn == 0.0 or li == 0.0 or lo == 0.0:
            out[c] = 2.0
            continue
        s = 2.0 * (ix * nx + iy * ny + iz * nz) / nn
        mx, my, mz = ix - s * nx, iy - s * ny, iz - s * nz
        out[c] = 1.0 - (mx * ox + my * oy + mz * oz) / math.sqrt(li * lo)
    return out


def refine_candidates(coarse: PathSet, accel: AccelStructure, isect_config: IntersectionConfig = IntersectionConfig(),
                      config: RefinementConfig = RefinementConfig()) -> RefineResult:
    """Refine a batch of all-specular coarse candidates.

    With ``config.key_attempt_limit > 0`` candidates are grouped by coarse
    trajectory (rx and surface-label chain). Within a group the chains whose
    last bounce already mirrors toward the receiver go first; attempts stop at
    the first acceptance or after the limit of rejections.
    """
    C = len(coarse)
    if C == 0:
        return RefineResult(PathSet.empty(coarse.width), np.zeros(0, np.int64), np.zeros(0, np.int64),
                            np.zeros(0, bool))
    if (coarse.n < 1).any() or ((coarse.kind != InteractionKind.SPECULAR) & (coarse.kind != -1)).any():
        raise ValueError("refine_candidates expects specular chains with at least one interaction")
    if config.key_attempt_limit > 0:
        key = _hash_all(np.zeros(C, np.int64), coarse.rx, coarse.n, coarse.kind, coarse.surface_label,
                        coarse.voxel, coarse.edge)
        members = np.lexsort((np.arange(C), _final_leg_mismatch(coarse.n, coarse.start, coarse.end,
                                                                       coarse.point, coarse.normal), key))
        ks = key[members]
        brk = np.flatnonzero(ks[1:] != ks[:-1]) + 1
        group_ptr = np.concatenate([[0], brk, [C]]).astype(np.int64)
    else:
        members = np.arange(C, dtype=np.int64)
        group_ptr = np.arange(C + 1, dtype=np.int64)
    g = geometry(accel, isect_config)
    out_p, out_n, out_dps, out_near, length, status, iters, conv = _refine_groups(
        g, group_ptr, members.astype(np.int64), np.ascontiguousarray(coarse.start), np.ascontiguousarray(coarse.end),
        coarse.n, np.ascontiguousarray(coarse.point), np.ascontiguousarray(coarse.normal), *_cfg_args(config),
        int(config.key_attempt_limit),
    )
    ok = np.flatnonzero(status == ACCEPTED)
    K = coarse.width
    n = coarse.n[ok]
    slot = np.arange(K)[None, :] < n[:, None]
    near = out_near[ok]
    dps = out_dps[ok]
    surf = np.where(slot, accel.surface_labels[np.maximum(near, 0)], -1)
    mat = np.where(slot, accel.material_labels[np.maximum(near, 0)], -1)
    vox = np.where(slot[..., None], accel.dps.voxel[np.maximum(dps, 0)], 0)
    kind = np.where(slot, int(InteractionKind.SPECULAR), -1)
    refined = PathSet(coarse.tx[ok], coarse.rx[ok], n, coarse.start[ok], coarse.end[ok], kind, out_p[ok],
                      out_n[ok], surf, mat, vox, np.full((len(ok), K), -1), length[ok], np.ones(len(ok), bool))
    return RefineResult(refined, status, iters, conv)


def refine_specular(path: PropagationPath, accel: AccelStructure,
                    isect_config: IntersectionConfig = IntersectionConfig(),
                    config: RefinementConfig = RefinementConfig()) -> PropagationPath | None:
    """Refine one coarse specular path; None when it never validates."""
    if not path.interactions or any(i.kind != InteractionKind.SPECULAR for i in path.interactions):
        raise ValueError("refine_specular expects a path of specular interactions")
    res = refine_candidates(PathSet.from_paths([path]), accel, isect_config, config)
    if res.status[0] != ACCEPTED:
        return None
    return res.paths.path(0)


def minimize_on_planes(start, end, anchors, normals, config: RefinementConfig = RefinementConfig()):
    """Stage 1 alone: returns ``(points, iterations, converged, length_history)``."""
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    c = np.ascontiguousarray(np.asarray(anchors, dtype=np.float64).reshape(-1, 3))
    nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    nrm = np.ascontiguousarray(nrm / np.linalg.norm(nrm, axis=1, keepdims=True))
    n = len(c)
    u, v = _bases(nrm, n)
    history = np.full(config.max_iterations + config.polish_iterations + 1, np.nan)
    pts, f, iters, conv, degenerate, _ = _minimize(start, end, c, u, v, n, config.max_iterations,
                                                   config.convergence_threshold, config.step_size, history,
                                                   config.polish_tolerance, config.polish_iterations,
                                                   config.kink_length)
    if degenerate:
        raise FloatingPointError("degenerate path: a segment collapsed to zero length")
    return pts, iters, bool(conv), history[~np.isnan(history)]


def length_and_gradient(start, end, anchors, normals, coords):
    """Path length and its gradient with respect to the tangent coordinates ``coords`` (2 per point).

    Tangent bases are derived from ``normals`` exactly as the optimizer does.
    """
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    c = np.ascontiguousarray(np.asarray(anchors, dtype=np.float64).reshape(-1, 3))
    nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    nrm = np.ascontiguousarray(nrm / np.linalg.norm(nrm, axis=1, keepdims=True))
    n = len(c)
    u, v = _bases(nrm, n)
    x = np.asarray(coords, dtype=np.float64).reshape(2 * n)
    grad = np.empty(2 * n)
    f = _length_grad(start, end, c, u, v, x.copy(), n, np.empty((n, 3)), np.empty((n + 1, 3)), grad)
    if f < 0:
        raise FloatingPointError("degenerate path")
    return f, grad, u, v


# --------------------------------------------------------------------------- diffraction


def _edge_minimize(tx, rx, es, ep, config: RefinementConfig):
    """Projected gradient descent on the edge parameter s in [0, 1]."""
    e = ep - es

    def f_and_g(s):
        p = es + s * e
        a = p - tx
        b = p - rx
        la = np.linalg.norm(a)
        lb = np.linalg.norm(b)
        if la < _DEGENERATE or lb < _DEGENERATE:
            return -1.0, 0.0
        return la + lb, float((a / la + b / lb) @ e)

    s = 0.5
    f, gr = f_and_g(s)
    if f < 0:
        return None
    alpha = config.step_size / max(np.linalg.norm(e), 1e-12)

    def proj_grad(s, gr):
        if (s <= 0.0 and gr > 0) or (s >= 1.0 and gr < 0):
            return 0.0
        return gr

    it = 0
    while proj_grad(s, gr) ** 2 >= config.convergence_threshold and it < config.max_iterations:
        a = alpha
        for _ in range(60):
            sn = min(max(s - a * gr, 0.0), 1.0)
            fn, gn = f_and_g(sn)
            if fn >= 0 and fn <= f - _ARMIJO * abs(gr) * abs(sn - s):
                break
            a *= 0.5
        else:
            break
        ds, dg = sn - s, gn - gr
        alpha = min(max(ds / dg if ds * dg > 1e-18 else 2 * a, 1e-9), 1e3)
        s, f, gr = sn, fn, gn
        it += 1
    return s, f


def refine_diffraction(path: PropagationPath, accel: AccelStructure | None,
                       isect_config: IntersectionConfig = IntersectionConfig(),
                       config: RefinementConfig = RefinementConfig(), scene=None) -> PropagationPath | None:
    """Place the single diffraction point at the shortest-path position on its edge and check visibility."""
    if len(path.interactions) != 1 or path.interactions[0].kind != InteractionKind.DIFFRACTION:
        raise ValueError("refine_diffraction expects exactly one diffraction interaction")
    scene = accel.scene if accel is not None else scene
    it0 = path.interactions[0]
    edge = scene.edges[it0.edge_index]
    tx = np.asarray(path.tx_position, dtype=np.float64)
    rx = np.asarray(path.rx_position, dtype=np.float64)
    res = _edge_minimize(tx, rx, edge.start, edge.end, config)
    if res is None:
        return None
    s, f = res
    p = edge.start + s * (edge.end - edge.start)
    if accel is not None:
        g = geometry(accel, isect_config)
        if not visible_kernel(g, tx[0], tx[1], tx[2], p[0], p[1], p[2], 0.0):
            return None
        if not visible_kernel(g, rx[0], rx[1], rx[2], p[0], p[1], p[2], 0.0):
            return None
    normal = edge.normal_a + edge.normal_b
    nl = np.linalg.norm(normal)
    inter = Interaction(InteractionKind.DIFFRACTION, p, normal / nl if nl > 0 else edge.normal_a.copy(),
                        -1, int(edge.material_a), (0, 0, 0), int(it0.edge_index))
    return PropagationPath(path.tx_index, path.rx_index, tx, rx, [inter], True, 0)
