"""Direct reimplementations used as test oracles."""

import numpy as np


def naive_blend(origin, direction, positions, normals, radius, lam, cutoff):
    """Weighted-average hit of a ray with a set of disks, evaluated point by point.

    Returns ``(q, normal)`` or ``None`` when no disk is hit.
    """
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    hits = []
    for p, n in zip(positions, normals):
        den = float(n @ d)
        if abs(den) < 1e-12:
            continue
        t = float(n @ (p - o)) / den
        if t <= 0:
            continue
        q = o + t * d
        off = np.linalg.norm(q - p)
        if off > radius:
            continue
        hits.append((t, q, off, n if n @ d <= 0 else -n))
    if not hits:
        return None
    q_min = min(hits, key=lambda h: h[0])[1]
    w = np.array([np.exp(-off**2 / (2 * radius**2)) * np.exp(-lam * np.linalg.norm(q - q_min))
                  for _, q, off, _ in hits])
    keep = w >= cutoff * w.max()
    qs = np.array([h[1] for h in hits])[keep]
    ns = np.array([h[3] for h in hits])[keep]
    w = w[keep]
    normal = (w[:, None] * ns).sum(0)
    return (w[:, None] * qs).sum(0) / w.sum(), normal / np.linalg.norm(normal)


def random_dps_rays(accel, count, rng, radius):
    """``count`` (set index, origin, unit direction) triples aimed into random point sets."""
    dps = accel.dps
    pos = accel.scene.positions
    out = []
    while len(out) < count:
        d = int(rng.integers(len(dps)))
        m = dps.members(d)
        target = pos[m[rng.integers(len(m))]] + rng.uniform(-radius, radius, 3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        origin = target - rng.uniform(0.3, 2.0) * direction
        out.append((d, origin, direction))
    return out


def projected_gradient_error(fn, args, rng, step=1e-6):
    """Relative error of reverse-mode gradients against central differences.

    ``fn`` maps Vars to a Var of any shape (real or complex). Its output is
    reduced to the real scalar ``Re(sum(conj(c) * out))`` with a random
    complex ``c``, which checks the whole Jacobian along a random direction.
    Steps are scaled by each argument's magnitude.
    """
    from pointrt import autodiff as ad

    out0 = np.asarray(fn(*[ad.Var(np.array(a, dtype=float)) for a in args]).value)
    c = rng.normal(size=out0.shape) + (1j * rng.normal(size=out0.shape) if np.iscomplexobj(out0) else 0)

    def scalar(*xs):
        out = fn(*xs)
        return ad.sum(ad.real(out * np.conj(c))) if np.iscomplexobj(out0) else ad.sum(out * c)

    _, grads = ad.grad_of(scalar, *args)
    num, den = 0.0, 0.0
    for i, a in enumerate(args):
        a = np.array(a, dtype=float)
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            h = step * max(abs(a[idx]), 1e-3)
            up, dn = a.copy(), a.copy()
            up[idx] += h
            dn[idx] -= h
            vals = []
            for x in (up, dn):
                xs = [np.array(b, dtype=float) for b in args]
                xs[i] = x
                vals.append(float(np.asarray(scalar(*[ad.Var(v) for v in xs]).value)))
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        num += float(np.sum((np.asarray(grads[i]) - fd) ** 2))
        den += float(np.sum(fd ** 2))
    return np.sqrt(num) / max(np.sqrt(den), 1e-300)
