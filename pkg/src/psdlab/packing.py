"""Sphere assemblies: diameter sampling and drop-and-roll deposition.

Deposition is sequential. Each sphere falls vertically at a seeded lateral
position until it touches the floor or a settled sphere, then descends along
the steepest feasible direction (gravity projected onto the cone allowed by
its contacts) until no descent direction remains. Contacts are resolved
exactly by ray/sphere sweeps, so no sphere ever penetrates another beyond
floating-point error.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .psd import (DEFAULT_LADDER, PsdError, PsdLabel, SieveLadder, mean_diameter, psd_from_diameters,
                  retained_bins)

OVERLAP_TOL = 1e-6
CONTACT_TOL = 1e-3
MAX_RETRIES = 64
# solid fraction assumed when sizing a mass budget to fill the box
PACKING_FRACTION = 0.6
FILL_LAYERS = 6.0


class PackingError(RuntimeError):
    pass


@dataclass
class PackingConfig:
    """Deposition settings.

    ``fill_height=None`` picks max(2 * upper_bound, FILL_LAYERS * d_m) for the
    target, where d_m is its mass-mean diameter; coarse mixtures need more
    layers before the walls stop showing through the top view.
    """

    target: PsdLabel | None = None
    box_size: float = 4450.0
    fill_height: float | None = None
    seed: int = 0
    ladder: SieveLadder = DEFAULT_LADDER
    step_fraction: float = 0.25
    max_roll_steps: int = 200

    def __post_init__(self):
        if self.fill_height is not None and self.fill_height < 2.0 * self.ladder.upper_bound:
            raise PackingError(f"fill height {self.fill_height} is below twice the largest diameter")
        if self.box_size <= 0:
            raise PackingError("box size must be positive")

    def resolved_fill_height(self, target=None) -> float:
        if self.fill_height is not None:
            return float(self.fill_height)
        base = 2.0 * self.ladder.upper_bound
        target = target if target is not None else self.target
        if target is None:
            return base
        return max(base, FILL_LAYERS * mean_diameter(target, self.ladder))

    def mass_budget(self, target=None, overfill: float = 1.25) -> float:
        """Sum of d**3 that over-fills the box to the fill height."""
        volume = self.box_size ** 2 * self.resolved_fill_height(target) * PACKING_FRACTION
        return overfill * volume * 6.0 / math.pi


@dataclass
class SphereAssembly:
    centers: np.ndarray
    diameters: np.ndarray
    colors: np.ndarray
    box: tuple
    seed: int
    ladder: SieveLadder = DEFAULT_LADDER
    target: PsdLabel | None = None
    unused_diameters: np.ndarray = field(default_factory=lambda: np.zeros(0))
    _label: PsdLabel | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.diameters)

    @property
    def radii(self) -> np.ndarray:
        return 0.5 * self.diameters

    @property
    def achieved_label(self) -> PsdLabel:
        if self._label is None:
            self._label = psd_from_diameters(self.diameters, self.ladder)
        return self._label

    def to_csv(self) -> str:
        """Dump with a JSON header block, then ``id,x,y,z,d,r,g,b`` rows."""
        header = {
            "box": list(self.box),
            "seed": int(self.seed),
            "ladder": {"openings": list(self.ladder.openings),
                       "lower_bound": self.ladder.lower_bound,
                       "upper_bound": self.ladder.upper_bound},
            "target": None if self.target is None else list(self.target.passing),
            "achieved": list(self.achieved_label.passing),
            "unused": [float(v) for v in self.unused_diameters],
        }
        buf = io.StringIO()
        for line in json.dumps(header, indent=1).splitlines():
            buf.write("# " + line + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "x", "y", "z", "d", "r", "g", "b"])
        for i in range(len(self)):
            x, y, z = self.centers[i]
            r, g, b = self.colors[i]
            writer.writerow([i, repr(float(x)), repr(float(y)), repr(float(z)),
                             repr(float(self.diameters[i])), int(r), int(g), int(b)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SphereAssembly":
        lines = text.splitlines()
        head = [ln[2:] for ln in lines if ln.startswith("# ")]
        body = [ln for ln in lines if not ln.startswith("#")]
        meta = json.loads("\n".join(head))
        rows = list(csv.DictReader(body))
        centers = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]).reshape(-1, 3)
        diameters = np.array([float(r["d"]) for r in rows])
        colors = np.array([[int(r["r"]), int(r["g"]), int(r["b"])] for r in rows], dtype=np.uint8).reshape(-1, 3)
        ladder = SieveLadder(tuple(meta["ladder"]["openings"]), meta["ladder"]["lower_bound"],
                             meta["ladder"]["upper_bound"])
        target = None if meta["target"] is None else PsdLabel(tuple(meta["target"]))
        return cls(centers=centers, diameters=diameters, colors=colors, box=tuple(meta["box"]),
                   seed=meta["seed"], ladder=ladder, target=target,
                   unused_diameters=np.array(meta.get("unused", []), dtype=float))


def assembly_label(assembly: SphereAssembly) -> PsdLabel:
    return assembly.achieved_label


def sample_diameters(target, total_mass_budget: float, seed: int,
                     ladder: SieveLadder = DEFAULT_LADDER) -> np.ndarray:
    """Diameters whose d**3 mass per bin meets the target's retained fractions.

    Bins are filled finest first; within a bin diameters are uniform over the
    bin's edges and appended until the bin's cube sum first reaches its share
    of ``total_mass_budget``.
    """
    if total_mass_budget <= 0:
        raise PsdError("mass budget must be positive")
    stats = retained_bins(target, ladder)
    edges = stats.bin_edges
    if stats.retained_fraction[-1] > 0 and total_mass_budget < edges[-2] ** 3:
        raise PsdError("budget too small")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A3D]))
    out = []
    for k, frac in enumerate(stats.retained_fraction):
        quota = frac * total_mass_budget
        if quota <= 0:
            continue
        lo, hi = edges[k], edges[k + 1]
        acc = 0.0
        while acc < quota:
            # draw in blocks sized from the expected count
            mean_mass = (hi ** 4 - lo ** 4) / (4 * (hi - lo))
            n = max(16, int(1.1 * (quota - acc) / mean_mass) + 1)
            draw = rng.uniform(lo, hi, size=n)
            cum = acc + np.cumsum(draw ** 3)
            stop = int(np.searchsorted(cum, quota, side="left"))
            if stop < n:
                out.append(draw[: stop + 1])
                acc = cum[stop]
            else:
                out.append(draw)
                acc = cum[-1]
    if not out:
        raise PsdError("target produced no particles")
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# numba kernels
#
# Settled spheres live in a uniform 3-D cell grid (cubic cells of edge
# ``cell``; ``nx`` cells per lateral axis, ``nz`` layers). Each sphere is
# registered in every cell its bounding box overlaps, through singly linked
# lists (head -> nxt -> ... with sid holding sphere indices). Layers above
# the grid are folded into the top layer.

@numba.njit(cache=True)
def _cell_range(lo, hi, cell, n):
    a = int(math.floor(lo / cell))
    b = int(math.floor(hi / cell))
    if a < 0:
        a = 0
    if b > n - 1:
        b = n - 1
    if a > n - 1:
        a = n - 1
    if b < 0:
        b = 0
    return a, b


@numba.njit(cache=True)
def _drop_height(px, py, ztop, r, pos, rad, head, nxt, sid, cell, nx, nz):
    """Highest resting z (<= ztop) for a sphere falling at (px, py)."""
    best = r
    i0, i1 = _cell_range(px - r, px + r, cell, nx)
    j0, j1 = _cell_range(py - r, py + r, cell, nx)
    ltop = nz - 1
    if ztop < nz * cell:
        ltop = int(math.floor(ztop / cell))
        if ltop < 0:
            ltop = 0
    for layer in range(ltop, -1, -1):
        # anything registered only below this layer tops out under (layer+1)*cell
        if best >= (layer + 1) * cell + r:
            break
        base = layer * nx * nx
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                e = head[base + i * nx + j]
                while e >= 0:
                    k = sid[e]
                    e = nxt[e]
                    rr = r + rad[k]
                    dx = px - pos[k, 0]
                    dy = py - pos[k, 1]
                    h2 = dx * dx + dy * dy
                    if h2 >= rr * rr:
                        continue
                    zc = pos[k, 2] + math.sqrt(rr * rr - h2)
                    if zc > best and zc <= ztop + 1e-9 * rr:
                        best = zc
    return best


@numba.njit(cache=True)
def _gather_contacts(p, r, box, pos, rad, head, nxt, sid, cell, nx, nz, tol, normals, gaps, ids):
    """Fill normals/gaps/ids with constraints whose gap is below tol; returns count.

    Floor and walls get id -1.
    """
    m = 0
    cap = normals.shape[0]
    g = p[2] - r
    if g <= tol and m < cap:
        normals[m, 0] = 0.0
        normals[m, 1] = 0.0
        normals[m, 2] = 1.0
        gaps[m] = g
        ids[m] = -1
        m += 1
    for axis in range(2):
        for side in range(2):
            if side == 0:
                g = p[axis] - r
            else:
                g = box[axis] - r - p[axis]
            if g <= tol and m < cap:
                normals[m, 0] = 0.0
                normals[m, 1] = 0.0
                normals[m, 2] = 0.0
                normals[m, axis] = 1.0 if side == 0 else -1.0
                gaps[m] = g
                ids[m] = -1
                m += 1
    reach = r + tol
    i0, i1 = _cell_range(p[0] - reach, p[0] + reach, cell, nx)
    j0, j1 = _cell_range(p[1] - reach, p[1] + reach, cell, nx)
    l0, l1 = _cell_range(p[2] - reach, p[2] + reach, cell, nz)
    for layer in range(l0, l1 + 1):
        base = layer * nx * nx
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                e = head[base + i * nx + j]
                while e >= 0:
                    k = sid[e]
                    e = nxt[e]
                    dx = p[0] - pos[k, 0]
                    dy = p[1] - pos[k, 1]
                    dz = p[2] - pos[k, 2]
                    dist = math.sqrt(dx * dx + dy * dy + dz * dz)
                    g = dist - (r + rad[k])
                    if g > tol or dist == 0.0:
                        continue
                    # spheres are registered in several cells
                    dup = False
                    for q in range(m):
                        if ids[q] == k:
                            dup = True
                            break
                    if dup or m >= cap:
                        continue
                    normals[m, 0] = dx / dist
                    normals[m, 1] = dy / dist
                    normals[m, 2] = dz / dist
                    gaps[m] = g
                    ids[m] = k
                    m += 1
    return m


@numba.njit(cache=True)
def _solve_small(a, b, k):
    """Gaussian elimination with partial pivoting on a k x k system; returns (x, ok)."""
    m = a.copy()
    x = b.copy()
    for c in range(k):
        piv = c
        for rrow in range(c + 1, k):
            if abs(m[rrow, c]) > abs(m[piv, c]):
                piv = rrow
        if abs(m[piv, c]) < 1e-12:
            return x, False
        if piv != c:
            for q in range(k):
                t = m[c, q]
                m[c, q] = m[piv, q]
                m[piv, q] = t
            t = x[c]
            x[c] = x[piv]
            x[piv] = t
        for rrow in range(c + 1, k):
            f = m[rrow, c] / m[c, c]
            for q in range(c, k):
                m[rrow, q] -= f * m[c, q]
            x[rrow] -= f * x[c]
    for c in range(k - 1, -1, -1):
        s = x[c]
        for q in range(c + 1, k):
            s -= m[c, q] * x[q]
        x[c] = s / m[c, c]
    return x, True


@numba.njit(cache=True)
def _descent_direction(normals, m, out):
    """Project gravity (0, 0, -1) onto the cone {d : n_i . d >= 0}.

    Enumerates active subsets of size <= 3 and returns the first KKT point.
    """
    idx = np.empty(3, dtype=np.int64)
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for size in range(0, 4):
        if size > m:
            break
        for q in range(size):
            idx[q] = q
        while True:
            ok = True
            lam = np.zeros(3)
            if size > 0:
                for u in range(size):
                    nu = normals[idx[u]]
                    for v in range(size):
                        nv = normals[idx[v]]
                        a[u, v] = nu[0] * nv[0] + nu[1] * nv[1] + nu[2] * nv[2]
                    b[u] = nu[2]  # -n . g with g = (0, 0, -1)
                sol, ok = _solve_small(a[:size, :size], b[:size], size)
                if ok:
                    for u in range(size):
                        if sol[u] < -1e-12:
                            ok = False
                        lam[u] = sol[u]
            if ok:
                d0 = 0.0
                d1 = 0.0
                d2 = -1.0
                for u in range(size):
                    nu = normals[idx[u]]
                    d0 += lam[u] * nu[0]
                    d1 += lam[u] * nu[1]
                    d2 += lam[u] * nu[2]
                feasible = True
                for w in range(m):
                    if normals[w, 0] * d0 + normals[w, 1] * d1 + normals[w, 2] * d2 < -1e-10:
                        feasible = False
                        break
                if feasible:
                    out[0] = d0
                    out[1] = d1
                    out[2] = d2
                    return True
            # next combination
            if size == 0:
                break
            q = size - 1
            while q >= 0 and idx[q] == m - size + q:
                q -= 1
            if q < 0:
                break
            idx[q] += 1
            for w in range(q + 1, size):
                idx[w] = idx[w - 1] + 1
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    return False


@numba.njit(cache=True)
def _sweep(p, d, smax, r, box, pos, rad, head, nxt, sid, cell, nx, nz):
    """Largest t <= smax such that p + t d stays feasible (|d| = 1)."""
    t = smax
    if d[2] < 0.0:
        tf = (p[2] - r) / (-d[2])
        if tf < t:
            t = tf
    for axis in range(2):
        if d[axis] < 0.0:
            tw = (p[axis] - r) / (-d[axis])
            if tw < t:
                t = tw
        elif d[axis] > 0.0:
            tw = (box[axis] - r - p[axis]) / d[axis]
            if tw < t:
                t = tw
    if t < 0.0:
        t = 0.0
    i0, i1 = _cell_range(min(p[0], p[0] + t * d[0]) - r, max(p[0], p[0] + t * d[0]) + r, cell, nx)
    j0, j1 = _cell_range(min(p[1], p[1] + t * d[1]) - r, max(p[1], p[1] + t * d[1]) + r, cell, nx)
    l0, l1 = _cell_range(min(p[2], p[2] + t * d[2]) - r, max(p[2], p[2] + t * d[2]) + r, cell, nz)
    for layer in range(l0, l1 + 1):
        base = layer * nx * nx
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                e = head[base + i * nx + j]
                while e >= 0:
                    k = sid[e]
                    e = nxt[e]
                    wx = p[0] - pos[k, 0]
                    wy = p[1] - pos[k, 1]
                    wz = p[2] - pos[k, 2]
                    wd = wx * d[0] + wy * d[1] + wz * d[2]
                    rr = r + rad[k]
                    # tangential motion on a current contact moves outward
                    if wd >= -1e-9 * rr:
                        continue
                    c = wx * wx + wy * wy + wz * wz - rr * rr
                    disc = wd * wd - c
                    if disc < 0.0:
                        continue
                    tc = -wd - math.sqrt(disc)
                    if tc < 0.0:
                        tc = 0.0
                    if tc < t:
                        t = tc
    return t


@numba.njit(cache=True)
def _register(k, pos, rad, head, nxt, sid, n_entries, cell, nx, nz):
    r = rad[k]
    i0, i1 = _cell_range(pos[k, 0] - r, pos[k, 0] + r, cell, nx)
    j0, j1 = _cell_range(pos[k, 1] - r, pos[k, 1] + r, cell, nx)
    l0, l1 = _cell_range(pos[k, 2] - r, pos[k, 2] + r, cell, nz)
    for layer in range(l0, l1 + 1):
        base = layer * nx * nx
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                c = base + i * nx + j
                sid[n_entries] = k
                nxt[n_entries] = head[c]
                head[c] = n_entries
                n_entries += 1
    return n_entries


@numba.njit(cache=True)
def _update_heightmap(k, pos, rad, hmap, cell, nx):
    """Raise the per-column top-surface height at lateral cell centres."""
    r = rad[k]
    i0, i1 = _cell_range(pos[k, 0] - r, pos[k, 0] + r, cell, nx)
    j0, j1 = _cell_range(pos[k, 1] - r, pos[k, 1] + r, cell, nx)
    delta = 0.0
    for i in range(i0, i1 + 1):
        cx = (i + 0.5) * cell
        for j in range(j0, j1 + 1):
            cy = (j + 0.5) * cell
            h2 = (cx - pos[k, 0]) ** 2 + (cy - pos[k, 1]) ** 2
            if h2 < r * r:
                top = pos[k, 2] + math.sqrt(r * r - h2)
                if top > hmap[i * nx + j]:
                    delta += top - hmap[i * nx + j]
                    hmap[i * nx + j] = top
    return delta


@numba.njit(cache=True)
def _deposit_kernel(start, radii, lateral, box, fill_height, step_fraction, max_steps,
                    pos, rad, head, nxt, sid, n_entries, hmap, cell, nx, nz, state):
    """Deposit radii[start:] in order.

    Returns the index where it stopped: len(radii) when exhausted, the index of
    a failed sphere when ``state[0] == 1``, or the first unused index when the
    fill height was reached (``state[0] == 2``); ``state[0] == 3`` asks for more
    list storage. ``state[1]`` holds n_entries, ``state[2]`` counts roll steps.
    """
    normals = np.zeros((16, 3))
    gaps = np.zeros(16)
    ids = np.zeros(16, dtype=np.int64)
    d = np.zeros(3)
    p = np.zeros(3)
    ncol = nx * nx
    hsum = 0.0
    for c in range(ncol):
        hsum += hmap[c]
    for k in range(start, radii.shape[0]):
        if hsum / ncol >= fill_height:
            state[0] = 2
            state[1] = n_entries
            return k
        r = radii[k]
        span = int(math.ceil(2.0 * r / cell)) + 1
        if sid.shape[0] - n_entries < span * span * span:
            state[0] = 3
            state[1] = n_entries
            return k
        p[0] = lateral[k, 0]
        p[1] = lateral[k, 1]
        p[2] = _drop_height(p[0], p[1], 1e300, r, pos, rad, head, nxt, sid, cell, nx, nz)
        tol = CONTACT_TOL * r
        for it in range(max_steps):
            if p[2] - r <= tol:
                break
            m = _gather_contacts(p, r, box, pos, rad, head, nxt, sid, cell, nx, nz, tol, normals, gaps, ids)
            _descent_direction(normals, m, d)
            norm = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            if norm < 1e-6:
                break
            state[2] += 1
            d[0] /= norm
            d[1] /= norm
            d[2] /= norm
            t = _sweep(p, d, step_fraction * r, r, box, pos, rad, head, nxt, sid, cell, nx, nz)
            p[0] += t * d[0]
            p[1] += t * d[1]
            p[2] += t * d[2]
            # rounding can push a wall contact a hair outside
            p[0] = min(max(p[0], r), box[0] - r)
            p[1] = min(max(p[1], r), box[1] - r)
            p[2] = _drop_height(p[0], p[1], p[2], r, pos, rad, head, nxt, sid, cell, nx, nz)
        m = _gather_contacts(p, r, box, pos, rad, head, nxt, sid, cell, nx, nz, tol, normals, gaps, ids)
        worst = 0.0
        for q in range(m):
            if -gaps[q] > worst:
                worst = -gaps[q]
        # 1e-7 r stays below 1e-6 of the smallest admissible diameter
        if worst > 1e-7 * r:
            state[0] = 1
            state[1] = n_entries
            return k
        pos[k, 0] = p[0]
        pos[k, 1] = p[1]
        pos[k, 2] = p[2]
        rad[k] = r
        n_entries = _register(k, pos, rad, head, nxt, sid, n_entries, cell, nx, nz)
        hsum += _update_heightmap(k, pos, rad, hmap, cell, nx)
    state[0] = 0
    state[1] = n_entries
    return radii.shape[0]


def _grid_cells(box_size: float, min_diameter: float) -> int:
    return int(min(256, max(1, math.floor(box_size / (2.0 * min_diameter)))))


def deposit(diameters, config: PackingConfig, colors=None, lateral=None) -> SphereAssembly:
    """Drop spheres one by one into the box until the fill height is reached.

    The deposition order is a seeded shuffle of ``diameters``. Diameters left
    over when the mean surface height reaches the fill height are kept in
    ``unused_diameters``. Passing ``lateral`` (n x 2 drop positions) disables
    the shuffle and the seeded drop positions.
    """
    ladder = config.ladder
    d = np.asarray(diameters, dtype=float).ravel()
    if d.size == 0:
        raise PackingError("no diameters to deposit")
    bad = np.flatnonzero((d < ladder.lower_bound) | (d > ladder.upper_bound))
    if bad.size:
        raise PackingError(f"diameter {d[bad[0]]} (index {bad[0]}) outside ladder bounds")
    W = float(config.box_size)
    if d.max() > W:
        raise PackingError(f"sphere of diameter {d.max()} is wider than the {W} box")

    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0xD3]))
    if lateral is None:
        order = rng.permutation(d.size)
        d = d[order]
        radii = 0.5 * d
        lateral = np.empty((d.size, 2))
        lateral[:, 0] = radii + rng.random(d.size) * (W - 2 * radii)
        lateral[:, 1] = radii + rng.random(d.size) * (W - 2 * radii)
    else:
        order = np.arange(d.size)
        radii = 0.5 * d
        lateral = np.array(lateral, dtype=float).reshape(d.size, 2)
        if np.any(lateral < radii[:, None]) or np.any(lateral > W - radii[:, None]):
            raise PackingError("drop position puts a sphere through a wall")
    if colors is None:
        colors = rng.integers(0, 256, size=(d.size, 3), dtype=np.uint8)
    else:
        colors = np.asarray(colors, dtype=np.uint8)[order]

    nx = _grid_cells(W, d.min())
    cell = W / nx
    fill_height = config.resolved_fill_height()
    nz = max(1, int(math.ceil((fill_height + 4.0 * ladder.upper_bound) / cell)))
    box = np.array([W, W])
    pos = np.zeros((d.size, 3))
    rad = np.zeros(d.size)
    head = np.full(nz * nx * nx, -1, dtype=np.int64)
    capacity = 8 * d.size + 4096
    nxt = np.empty(capacity, dtype=np.int64)
    sid = np.empty(capacity, dtype=np.int64)
    hmap = np.zeros(nx * nx)
    state = np.zeros(3)
    n_entries = 0
    start = 0
    retries = 0
    stop = d.size
    while start < d.size:
        k = _deposit_kernel(start, radii, lateral, box, fill_height,
                            float(config.step_fraction), int(config.max_roll_steps),
                            pos, rad, head, nxt, sid, n_entries, hmap, cell, nx, nz, state)
        n_entries = int(state[1])
        status = int(state[0])
        if status == 0:
            stop = d.size
            break
        if status == 2:
            stop = k
            break
        if status == 3:
            grow = capacity
            nxt = np.concatenate([nxt, np.empty(grow, dtype=np.int64)])
            sid = np.concatenate([sid, np.empty(grow, dtype=np.int64)])
            capacity += grow
            start = k
            continue
        retries += 1
        if retries > MAX_RETRIES:
            raise PackingError(f"sphere {order[k]} (d={d[k]:.3f}) found no resting place "
                               f"after {MAX_RETRIES} lateral re-seeds; {k} spheres settled")
        r = radii[k]
        lateral[k] = r + rng.random(2) * (W - 2 * r)
        start = k

    assembly = SphereAssembly(
        centers=pos[:stop].copy(),
        diameters=d[:stop].copy(),
        colors=colors[:stop].copy(),
        box=(W, W, fill_height),
        seed=int(config.seed),
        ladder=ladder,
        target=config.target,
        unused_diameters=d[stop:].copy(),
    )
    if len(assembly) == 0:
        raise PackingError("no sphere was deposited")
    return assembly


def generate_assembly(target, config: PackingConfig, overfill: float = 1.25) -> SphereAssembly:
    """Sample diameters for ``target`` and deposit them with ``config``."""
    if not isinstance(target, PsdLabel):
        target = PsdLabel(tuple(target))
    if config.target is None:
        config.target = target
    budget = config.mass_budget(target, overfill)
    diameters = sample_diameters(target, budget, config.seed, config.ladder)
    return deposit(diameters, config)


def max_penetration(assembly: SphereAssembly) -> float:
    """Largest pairwise overlap relative to the smaller diameter (O(n^2))."""
    c = assembly.centers
    r = assembly.radii
    worst = 0.0
    for i in range(len(r) - 1):
        dist = np.linalg.norm(c[i + 1:] - c[i], axis=1)
        pen = (r[i] + r[i + 1:]) - dist
        rel = pen / np.minimum(2 * r[i], 2 * r[i + 1:])
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
