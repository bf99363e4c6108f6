"""Inner loops of the simulator.

Every kernel exists twice: ``*_numba`` (explicit loops, compiled with
``@njit``) and ``*_numpy`` (vectorised).  The unsuffixed public names are
bound to one of them at import time according to ``ECHO2DEPTH_NUMBA``.
Both flavours are exercised by the test suite and compared in
``benchmarks/bench_kernels.py``.
"""
import numpy as np
from scipy.signal import lfilter

from ._accel import USE_NUMBA, njit

# Surface ids returned by the raycaster: room faces first, then boxes.
WALL_X0, WALL_X1, WALL_Y0, WALL_Y1, FLOOR, CEILING = range(6)
N_ROOM_SURFACES = 6


# --------------------------------------------------------------------------
# one-pole low-pass: y[n] = a*x[n] + (1-a)*y[n-1]


@njit
def one_pole_lowpass_numba(x, alpha):
    y = np.empty_like(x)
    acc = 0.0
    keep = 1.0 - alpha
    for i in range(x.shape[0]):
        acc = alpha * x[i] + keep * acc
        y[i] = acc
    return y


def one_pole_lowpass_numpy(x, alpha):
    return lfilter([alpha], [1.0, alpha - 1.0], x)


# --------------------------------------------------------------------------
# fractional-delay scatter-add of per-path templates


@njit
def scatter_paths_numba(out, templates, delays, gains):
    n = out.shape[0]
    n_paths, length = templates.shape
    for p in range(n_paths):
        d = delays[p]
        base = int(np.floor(d))
        frac = d - base
        g0 = gains[p] * (1.0 - frac)
        g1 = gains[p] * frac
        for k in range(length):
            i = base + k
            if i >= n:
                break
            if i >= 0:
                out[i] += g0 * templates[p, k]
            if i + 1 < n and i + 1 >= 0:
                out[i + 1] += g1 * templates[p, k]
    return out


def scatter_paths_numpy(out, templates, delays, gains):
    n = out.shape[0]
    length = templates.shape[1]
    base = np.floor(delays).astype(np.int64)
    frac = delays - base
    for p in range(templates.shape[0]):
        for shift, w in ((0, 1.0 - frac[p]), (1, frac[p])):
            lo = base[p] + shift
            if lo >= n:
                continue
            k0 = max(0, -lo)
            k1 = min(length, n - lo)
            if k1 <= k0:
                continue
            out[lo + k0:lo + k1] += gains[p] * w * templates[p, k0:k1]
    return out


# --------------------------------------------------------------------------
# normalised cross-correlation, 'valid' alignment


@njit
def normalized_xcorr_numba(x, template):
    n = x.shape[0]
    m = template.shape[0]
    out = np.zeros(n - m + 1)
    t_norm = 0.0
    for k in range(m):
        t_norm += template[k] * template[k]
    t_norm = np.sqrt(t_norm)
    if t_norm == 0.0:
        return out
    energy = 0.0
    for k in range(m):
        energy += x[k] * x[k]
    for i in range(n - m + 1):
        if i > 0:
            energy += x[i + m - 1] * x[i + m - 1] - x[i - 1] * x[i - 1]
        if energy > 1e-300:
            acc = 0.0
            for k in range(m):
                acc += x[i + k] * template[k]
            out[i] = acc / (t_norm * np.sqrt(energy))
    return out


def normalized_xcorr_numpy(x, template):
    m = template.shape[0]
    t_norm = np.sqrt(np.dot(template, template))
    raw = np.correlate(x, template, mode="valid")
    csum = np.concatenate(([0.0], np.cumsum(x * x)))
    energy = csum[m:] - csum[:-m]
    out = np.zeros_like(raw)
    if t_norm == 0.0:
        return out
    ok = energy > 1e-300
    out[ok] = raw[ok] / (t_norm * np.sqrt(energy[ok]))
    return out


# --------------------------------------------------------------------------
# rays from one origin against the room shell and axis-aligned boxes


@njit
def raycast_numba(origin, dirs, room, box_lo, box_hi):
    n = dirs.shape[0]
    n_box = box_lo.shape[0]
    t_hit = np.empty(n)
    surface = np.empty(n, dtype=np.int64)
    normal = np.zeros((n, 3))
    for r in range(n):
        best = np.inf
        best_s = -1
        best_axis = 0
        best_sign = 0.0
        # room shell: exit distance through the nearest face
        for a in range(3):
            d = dirs[r, a]
            if d > 0.0:
                t = (room[a] - origin[a]) / d
                if t < best:
                    best = t
                    best_s = 2 * a + 1
                    best_axis = a
                    best_sign = -1.0
            elif d < 0.0:
                t = -origin[a] / d
                if t < best:
                    best = t
                    best_s = 2 * a
                    best_axis = a
                    best_sign = 1.0
        for b in range(n_box):
            t_near = -np.inf
            t_far = np.inf
            near_axis = 0
            miss = False
            for a in range(3):
                d = dirs[r, a]
                if d == 0.0:
                    if origin[a] < box_lo[b, a] or origin[a] > box_hi[b, a]:
                        miss = True
                        break
                    continue
                t0 = (box_lo[b, a] - origin[a]) / d
                t1 = (box_hi[b, a] - origin[a]) / d
                if t0 > t1:
                    t0, t1 = t1, t0
                if t0 > t_near:
                    t_near = t0
                    near_axis = a
                if t1 < t_far:
                    t_far = t1
            if miss or t_near > t_far or t_near <= 0.0:
                continue
            if t_near < best:
                best = t_near
                best_s = N_ROOM_SURFACES + b
                best_axis = near_axis
                best_sign = -1.0 if dirs[r, near_axis] > 0.0 else 1.0
        t_hit[r] = best
        surface[r] = best_s
        normal[r, best_axis] = best_sign
    return t_hit, surface, normal


def raycast_numpy(origin, dirs, room, box_lo, box_hi):
    n = dirs.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        # room shell
        wall = np.where(dirs > 0, room[None, :], 0.0)
        t_axes = (wall - origin[None, :]) * inv
        t_axes = np.where(dirs != 0, t_axes, np.inf)
        axis = np.argmin(t_axes, axis=1)
        rows = np.arange(n)
        t_hit = t_axes[rows, axis]
        positive = dirs[rows, axis] > 0
        surface = 2 * axis + positive.astype(np.int64)
        sign = np.where(positive, -1.0, 1.0)
        for b in range(box_lo.shape[0]):
            t0 = (box_lo[b][None, :] - origin[None, :]) * inv
            t1 = (box_hi[b][None, :] - origin[None, :]) * inv
            lo = np.minimum(t0, t1)
            hi = np.maximum(t0, t1)
            # axis-parallel rays: inside the slab -> unbounded, outside -> miss
            flat = dirs == 0
            inside = (origin >= box_lo[b]) & (origin <= box_hi[b])
            lo = np.where(flat, np.where(inside[None, :], -np.inf, np.inf), lo)
            hi = np.where(flat, np.where(inside[None, :], np.inf, -np.inf), hi)
            near_axis = np.argmax(lo, axis=1)
            t_near = lo[rows, near_axis]
            t_far = hi.min(axis=1)
            hit = (t_near <= t_far) & (t_near > 0) & (t_near < t_hit)
            t_hit = np.where(hit, t_near, t_hit)
            surface = np.where(hit, N_ROOM_SURFACES + b, surface)
            axis = np.where(hit, near_axis, axis)
            sign = np.where(hit, np.where(dirs[rows, near_axis] > 0, -1.0, 1.0), sign)
    normal = np.zeros((n, 3))
    normal[rows, axis] = sign
    return t_hit, surface, normal


if USE_NUMBA:
    one_pole_lowpass = one_pole_lowpass_numba
    scatter_paths = scatter_paths_numba
    normalized_xcorr = normalized_xcorr_numba
    raycast = raycast_numba
else:
    one_pole_lowpass = one_pole_lowpass_numpy
    scatter_paths = scatter_paths_numpy
    normalized_xcorr = normalized_xcorr_numpy
    raycast = raycast_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
