"""Execute CAD sequences into solids represented as signed distance fields.

Slot decoding (all slot values are in [-1, 1] once normalized):

=========  ===============================================================
slot       geometry
=========  ===============================================================
x, y       segment end point / circle center, sketch units
alpha      arc sweep angle ``pi * (v + 1)``; ``f`` = 1 for counter-clockwise
r          circle radius, sketch units
theta..    sketch plane orientation, Euler angles ``pi * v`` (ZYZ)
px..pz     sketch plane origin, world units
s          sketch scale ``v + 1`` (world units per sketch unit)
e1, e2     extrusion extents ``2 * v``, world units
b, u       boolean op / extent type enums
=========  ===============================================================

Curve loops start at the sketch origin; the last end point is snapped back to
the origin when it lands within one quantization step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mambacad.codec import BooleanOp, CadSequence, CommandKind, ExtentType

ARC_SEGMENTS = 32
GRID_RES = 64
GRID_PAD = 0.05
SNAP_TOL = 2.0 / 255.0
_EPS = 1e-9
_CHUNK = 8192


class GeometryError(ValueError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class EmptySolid(GeometryError):
    def __init__(self, reason: str = "empty solid"):
        super().__init__(reason)


def decode_scale(v):
    return v + 1.0


def decode_extent(v):
    return 2.0 * v


def decode_angle(v):
    return math.pi * v


def rotation_zyz(theta: float, phi: float, gamma: float) -> np.ndarray:
    """Columns are the sketch x axis, y axis and normal in world coordinates."""
    def rz(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    c, s = math.cos(phi), math.sin(phi)
    ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return rz(theta) @ ry @ rz(gamma)


@dataclass(frozen=True)
class Profile:
    """Closed 2-D polylines (first vertex repeated last) filled even-odd."""

    loops: tuple[np.ndarray, ...]

    def __post_init__(self):
        starts, a, b = [], [], []
        n = 0
        for loop in self.loops:
            starts.append(n)
            a.append(loop[:-1])
            b.append(loop[1:])
            n += len(loop) - 1
        object.__setattr__(self, "_a", np.concatenate(a))
        object.__setattr__(self, "_b", np.concatenate(b))
        object.__setattr__(self, "_starts", np.array(starts))

    @property
    def vertices(self) -> np.ndarray:
        return self._a

    def winding_inside(self, p: np.ndarray) -> np.ndarray:
        """Even-odd membership from per-loop winding numbers."""
        a, b = self._a, self._b
        out = np.empty(len(p), dtype=bool)
        for i in range(0, len(p), _CHUNK):
            px, py = p[i : i + _CHUNK, None, 0], p[i : i + _CHUNK, None, 1]
            is_left = (b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (px - a[:, 0]) * (b[:, 1] - a[:, 1])
            up = (a[:, 1] <= py) & (b[:, 1] > py) & (is_left > 0)
            down = (a[:, 1] > py) & (b[:, 1] <= py) & (is_left < 0)
            wind = np.add.reduceat(up.astype(np.int64) - down, self._starts, axis=1)
            out[i : i + _CHUNK] = (np.count_nonzero(wind, axis=1) % 2) == 1
        return out

    def sdf(self, p: np.ndarray) -> np.ndarray:
        """Signed distance in sketch units, negative inside."""
        out = np.empty(len(p))
        for i in range(0, len(p), _CHUNK):
            q = p[i : i + _CHUNK]
            a, ba = self._a, self._b - self._a
            pax = q[:, None, 0] - a[:, 0]
            pay = q[:, None, 1] - a[:, 1]
            denom = np.maximum((ba * ba).sum(1), 1e-300)
            h = np.clip((pax * ba[:, 0] + pay * ba[:, 1]) / denom, 0.0, 1.0)
            dx = pax - ba[:, 0] * h
            dy = pay - ba[:, 1] * h
            d = np.sqrt((dx * dx + dy * dy).min(1))
            out[i : i + _CHUNK] = np.where(self.winding_inside(q), -d, d)
        return out

    def area(self) -> float:
        """Even-odd area is not needed; this is the sum of |loop areas|."""
        return float(sum(abs(_shoelace(loop)) for loop in self.loops))


def _shoelace(loop: np.ndarray) -> float:
    x, y = loop[:-1, 0], loop[:-1, 1]
    xn, yn = loop[1:, 0], loop[1:, 1]
    return 0.5 * float((x * yn - xn * y).sum())


@dataclass(frozen=True)
class ExtrusionBody:
    profile: Profile
    rotation: np.ndarray
    origin: np.ndarray
    scale: float
    interval: tuple[float, float]
    op: BooleanOp
    extent_type: ExtentType = ExtentType.ONE_SIDED

    def __post_init__(self):
        v = self.profile.vertices * self.scale
        lo = np.array([v[:, 0].min(), v[:, 1].min(), self.interval[0]])
        hi = np.array([v[:, 0].max(), v[:, 1].max(), self.interval[1]])
        object.__setattr__(self, "_box", (lo, hi))
        object.__setattr__(self, "_margin", 0.05 * float(np.linalg.norm(hi - lo)))

    def local(self, q: np.ndarray) -> np.ndarray:
        return (q - self.origin) @ self.rotation

    def _box_distance(self, loc: np.ndarray) -> np.ndarray:
        lo, hi = self._box
        return np.linalg.norm(np.maximum(np.maximum(lo - loc, loc - hi), 0.0), axis=1)

    def sdf(self, q: np.ndarray) -> np.ndarray:
        """Body distance; away from the local bounding box the box distance stands in
        (a lower bound with the right sign), which keeps large grids cheap."""
        loc = self.local(q)
        out = self._box_distance(loc)
        near = out <= self._margin
        if near.any():
            ln = loc[near]
            d2 = self.profile.sdf(ln[:, :2] / self.scale) * self.scale
            lo, hi = self.interval
            dz = np.abs(ln[:, 2] - (lo + hi) / 2.0) - (hi - lo) / 2.0
            out[near] = np.maximum(d2, dz)
        return out

    def contains(self, q: np.ndarray) -> np.ndarray:
        loc = self.local(q)
        lo, hi = self._box
        box = (loc[:, 2] > lo[2]) & (loc[:, 2] < hi[2])
        box &= (loc[:, 0] >= lo[0]) & (loc[:, 0] <= hi[0]) & (loc[:, 1] >= lo[1]) & (loc[:, 1] <= hi[1])
        out = np.zeros(len(q), dtype=bool)
        if box.any():
            out[box] = self.profile.winding_inside(loc[box, :2] / self.scale)
        return out

    def corners(self) -> np.ndarray:
        v = self.profile.vertices * self.scale
        pts = []
        for w in self.interval:
            local = np.column_stack([v, np.full(len(v), w)])
            pts.append(local @ self.rotation.T + self.origin)
        return np.concatenate(pts)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.corners()
        return c.min(0), c.max(0)


@dataclass(frozen=True)
class SolidScene:
    bodies: tuple[ExtrusionBody, ...]
    bounds: tuple[np.ndarray, np.ndarray] = field(init=False)

    def __post_init__(self):
        if not self.bodies:
            raise GeometryError("scene has no bodies")
        if self.bodies[0].op != BooleanOp.NEW:
            raise GeometryError("first body must create a new solid")
        lo, hi = self.bodies[0].bounds()
        for body in self.bodies[1:]:
            blo, bhi = body.bounds()
            if body.op in (BooleanOp.NEW, BooleanOp.JOIN):
                lo, hi = np.minimum(lo, blo), np.maximum(hi, bhi)
            elif body.op == BooleanOp.INTERSECT:
                lo, hi = np.maximum(lo, blo), np.minimum(hi, bhi)
        hi = np.maximum(hi, lo)
        object.__setattr__(self, "bounds", (lo, hi))

    def sdf(self, q) -> np.ndarray:
        """CSG pseudo-distance: exact sign, magnitude a lower bound."""
        q = np.asarray(q, dtype=np.float64)
        single = q.ndim == 1
        q = q.reshape(-1, 3)
        d = self.bodies[0].sdf(q)
        for body in self.bodies[1:]:
            db = body.sdf(q)
            if body.op in (BooleanOp.NEW, BooleanOp.JOIN):
                d = np.minimum(d, db)
            elif body.op == BooleanOp.CUT:
                d = np.maximum(d, -db)
            else:
                d = np.maximum(d, db)
        return d[0] if single else d

    def contains(self, q) -> np.ndarray:
        """Boolean membership with the same CSG rules as :meth:`sdf`."""
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        inside = self.bodies[0].contains(q)
        for body in self.bodies[1:]:
            b = body.contains(q)
            if body.op in (BooleanOp.NEW, BooleanOp.JOIN):
                inside |= b
            elif body.op == BooleanOp.CUT:
                inside &= ~b
            else:
                inside &= b
        return inside


# --- sketch execution ---------------------------------------------------------

def _arc_points(p0: np.ndarray, p1: np.ndarray, sweep: float, ccw: bool) -> np.ndarray:
    chord = p1 - p0
    c = float(np.hypot(*chord))
    if c < _EPS:
        raise GeometryError("zero-length arc")
    if not 1e-6 < sweep < 2.0 * math.pi - 1e-6:
        raise GeometryError("degenerate arc sweep")
    radius = c / (2.0 * math.sin(sweep / 2.0))
    normal = np.array([-chord[1], chord[0]]) / c
    offset = radius * math.cos(sweep / 2.0)
    center = (p0 + p1) / 2.0 + (normal * offset if ccw else -normal * offset)
    a0 = math.atan2(p0[1] - center[1], p0[0] - center[0])
    sign = 1.0 if ccw else -1.0
    t = a0 + sign * sweep * np.arange(1, ARC_SEGMENTS + 1) / ARC_SEGMENTS
    pts = center + radius * np.column_stack([np.cos(t), np.sin(t)])
    pts[-1] = p1
    return pts


def _circle_points(center: np.ndarray, r: float) -> np.ndarray:
    if not r > _EPS:
        raise GeometryError("non-positive circle radius")
    t = 2.0 * math.pi * np.arange(ARC_SEGMENTS + 1) / ARC_SEGMENTS
    pts = center + r * np.column_stack([np.cos(t), np.sin(t)])
    pts[-1] = pts[0]
    return pts


def _check_simple(loop: np.ndarray) -> None:
    a, b = loop[:-1], loop[1:]
    n = len(a)
    seg = b - a
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(lengths < _EPS):
        raise GeometryError("zero-length segment")
    # fold-back between consecutive segments
    nxt = np.roll(seg, -1, axis=0)
    cross = seg[:, 0] * nxt[:, 1] - seg[:, 1] * nxt[:, 0]
    dot = (seg * nxt).sum(1)
    if np.any((np.abs(cross) <= 1e-12 * lengths * np.roll(lengths, -1)) & (dot < 0)):
        raise GeometryError("self-intersecting loop")
    if n < 4:
        return

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    # only segment pairs with overlapping bounding boxes can meet
    lo, hi = np.minimum(a, b) - 1e-9, np.maximum(a, b) + 1e-9
    keep &= np.all((lo[i] <= hi[j]) & (lo[j] <= hi[i]), axis=1)
    i, j = i[keep], j[keep]
    A, B, C, D = a[i], b[i], a[j], b[j]
    d1, d2 = orient(C, D, A), orient(C, D, B)
    d3, d4 = orient(A, B, C), orient(A, B, D)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)

    def touch(p, s0, s1):
        v = s1 - s0
        h = np.clip(((p - s0) * v).sum(1) / np.maximum((v * v).sum(1), 1e-300), 0.0, 1.0)
        return np.hypot(*(p - s0 - v * h[:, None]).T) < 1e-9

    touching = touch(A, C, D) | touch(B, C, D) | touch(C, A, B) | touch(D, A, B)
    if np.any(proper | touching):
        raise GeometryError("self-intersecting loop")


def _curve_loop(commands: list[tuple[CommandKind, np.ndarray]]) -> np.ndarray:
    pts = [np.zeros(2)]
    for kind, p in commands:
        end = np.array([p[0], p[1]], dtype=np.float64)
        if kind == CommandKind.LINE:
            if np.hypot(*(end - pts[-1])) < _EPS:
                raise GeometryError("zero-length segment")
            pts.append(end)
        else:
            sweep = math.pi * (float(p[2]) + 1.0)
            pts.extend(_arc_points(pts[-1], end, sweep, bool(int(p[3]))))
    loop = np.vstack(pts)
    if np.hypot(*loop[-1]) > SNAP_TOL:
        raise GeometryError("unclosed loop")
    loop[-1] = 0.0
    return loop


def _loop_from_commands(commands) -> np.ndarray:
    if commands[0][0] == CommandKind.CIRCLE:
        p = commands[0][1]
        loop = _circle_points(np.array([p[0], p[1]], dtype=np.float64), float(p[4]))
    else:
        loop = _curve_loop(commands)
    if len(np.unique(np.round(loop[:-1], 12), axis=0)) < 3:
        raise GeometryError("loop has fewer than three vertices")
    _check_simple(loop)
    if abs(_shoelace(loop)) < 1e-10:
        raise GeometryError("zero-area profile")
    return loop


def build_profile(commands: list[tuple[CommandKind, np.ndarray]]) -> Profile:
    loops, current = [], None
    for kind, p in commands:
        if kind == CommandKind.SOL:
            if current:
                loops.append(_loop_from_commands(current))
            current = []
        else:
            current.append((kind, p))
    if current:
        loops.append(_loop_from_commands(current))
    if not loops:
        raise GeometryError("empty sketch")
    profile = Profile(tuple(loops))
    if profile.area() < 1e-10:
        raise GeometryError("zero-area profile")
    return profile


def build_body(sketch: list[tuple[CommandKind, np.ndarray]], extrude: np.ndarray) -> ExtrusionBody:
    profile = build_profile(sketch)
    theta, phi, gamma = (decode_angle(float(v)) for v in extrude[5:8])
    scale = decode_scale(float(extrude[11]))
    if not scale > _EPS:
        raise GeometryError("non-positive sketch scale")
    e1, e2 = decode_extent(float(extrude[12])), decode_extent(float(extrude[13]))
    etype = ExtentType(int(extrude[15]))
    if etype == ExtentType.ONE_SIDED:
        lo, hi = min(0.0, e1), max(0.0, e1)
    elif etype == ExtentType.SYMMETRIC:
        lo, hi = -abs(e1) / 2.0, abs(e1) / 2.0
    else:
        lo, hi = -e2, e1
    if not hi - lo > 1e-6:
        raise GeometryError("zero-depth extrusion")
    return ExtrusionBody(
        profile=profile,
        rotation=rotation_zyz(theta, phi, gamma),
        origin=np.array(extrude[8:11], dtype=np.float64),
        scale=scale,
        interval=(lo, hi),
        op=BooleanOp(int(extrude[14])),
        extent_type=etype,
    )


def build_scene(seq: CadSequence) -> SolidScene:
    """One extrusion body per sketch-extrude unit, combined in program order."""
    if seq.raw_length == 0:
        raise GeometryError("empty program")
    commands = seq.commands
    bodies, start = [], 0
    for t, (kind, p) in enumerate(commands):
        if kind == CommandKind.EXTRUDE:
            bodies.append(build_body(commands[start:t], p))
            start = t + 1
    return SolidScene(tuple(bodies))


# --- sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class SdfGrid:
    axes: tuple[np.ndarray, np.ndarray, np.ndarray]
    values: np.ndarray

    @property
    def spacing(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] for ax in self.axes])

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.spacing))


def _grid_axes(scene: SolidScene, res: int, pad: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo, hi = scene.bounds
    size = hi - lo
    size = np.where(size > 1e-9, size, max(float(size.max()), 1e-3))
    mid = (lo + hi) / 2.0
    lo, hi = mid - size * (0.5 + pad), mid + size * (0.5 + pad)
    return tuple(np.linspace(lo[i], hi[i], res) for i in range(3))


def sdf_grid(scene: SolidScene, res: int = GRID_RES, pad: float = GRID_PAD) -> SdfGrid:
    axes = _grid_axes(scene, res, pad)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return SdfGrid(axes, scene.sdf(pts).reshape(res, res, res))


def _sign_change_cells(inside: np.ndarray) -> np.ndarray:
    corners = [inside[i : inside.shape[0] - 1 + i, j : inside.shape[1] - 1 + j, k : inside.shape[2] - 1 + k]
               for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    n_in = sum(c.astype(np.int8) for c in corners)
    return (n_in > 0) & (n_in < 8)


def _gradient(scene: SolidScene, p: np.ndarray, h: float) -> np.ndarray:
    g = np.empty_like(p)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[:, i] = (scene.sdf(p + e) - scene.sdf(p - e)) / (2.0 * h)
    return g


def project_to_surface(scene: SolidScene, p: np.ndarray, reach: float, h: float, iters: int = 24) -> np.ndarray:
    """Bisection along the SDF gradient line through each point."""
    g = _gradient(scene, p, h)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    n = np.where(norm > 1e-12, g / np.maximum(norm, 1e-12), 0.0)
    lo_t = np.full(len(p), -reach)
    hi_t = np.full(len(p), reach)
    # only the sign matters for bisection; membership is cheaper than distance
    in_lo = scene.contains(p + lo_t[:, None] * n)
    in_hi = scene.contains(p + hi_t[:, None] * n)
    bracket = (in_lo != in_hi) & (norm[:, 0] > 1e-12)
    for _ in range(iters):
        mid = (lo_t + hi_t) / 2.0
        in_mid = scene.contains(p + mid[:, None] * n)
        left = in_mid == in_lo
        lo_t = np.where(left, mid, lo_t)
        hi_t = np.where(left, hi_t, mid)
    t = np.where(bracket, (lo_t + hi_t) / 2.0, -scene.sdf(p))
    return p + t[:, None] * n


def farthest_point_sample(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = rng.integers(n)
    dist = ((points - points[chosen[0]]) ** 2).sum(1)
    for i in range(1, m):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, ((points - points[chosen[i]]) ** 2).sum(1))
    return points[chosen]


def sample_surface(scene: SolidScene, m: int = 2000, rng_seed: int = 0, res: int = GRID_RES) -> np.ndarray:
    """Exactly ``m`` points near the zero level set; deterministic per seed.

    Sign-change cells of the grid are thinned to ``m`` by farthest-point
    sampling of their centres, then projected onto the surface; with fewer
    cells than ``m`` all are projected and jittered copies fill the rest.
    """
    axes = _grid_axes(scene, res, GRID_PAD)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    inside = scene.contains(pts).reshape(res, res, res)
    cells = np.argwhere(_sign_change_cells(inside))
    if len(cells) == 0:
        raise EmptySolid("no sign change on the sampling grid")
    spacing = np.array([ax[1] - ax[0] for ax in axes])
    origin = np.array([ax[0] for ax in axes])
    centers = origin + (cells + 0.5) * spacing
    rng = np.random.default_rng(rng_seed)
    if len(centers) >= m:
        centers = farthest_point_sample(centers, m, rng)
    pts = project_to_surface(scene, centers, reach=float(np.linalg.norm(spacing)), h=0.25 * float(spacing.min()))
    if len(pts) >= m:
        return pts
    extra = pts[rng.integers(len(pts), size=m - len(pts))]
    extra = extra + rng.normal(scale=1e-3 * float(spacing.min()), size=extra.shape)
    return np.concatenate([pts, extra])


def has_interior(scene: SolidScene, res: int = 16) -> bool:
    """True when some node of a ``res``^3 grid over the scene bounds is inside."""
    lo, hi = scene.bounds
    axes = [np.linspace(lo[i], hi[i], res + 2)[1:-1] for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return bool(scene.contains(pts).any())


# --- meshing ----------------------------------------------------------------

_CELL_EDGES = [
    ((0, 0, 0), (1, 0, 0)), ((0, 1, 0), (1, 1, 0)), ((0, 0, 1), (1, 0, 1)), ((0, 1, 1), (1, 1, 1)),
    ((0, 0, 0), (0, 1, 0)), ((1, 0, 0), (1, 1, 0)), ((0, 0, 1), (0, 1, 1)), ((1, 0, 1), (1, 1, 1)),
    ((0, 0, 0), (0, 0, 1)), ((1, 0, 0), (1, 0, 1)), ((0, 1, 0), (0, 1, 1)), ((1, 1, 0), (1, 1, 1)),
]


def surface_nets(grid: SdfGrid) -> tuple[np.ndarray, np.ndarray]:
    """One vertex per sign-change cell, one quad (two triangles) per crossing edge."""
    v = grid.values
    r0, r1, r2 = v.shape
    inside = v < 0
    active = _sign_change_cells(inside)
    cell_idx = np.full(active.shape, -1, dtype=np.int64)
    cells = np.argwhere(active)
    if len(cells) == 0:
        raise EmptySolid("no surface crossing on the meshing grid")
    cell_idx[tuple(cells.T)] = np.arange(len(cells))

    acc = np.zeros((len(cells), 3))
    cnt = np.zeros(len(cells))
    spacing = grid.spacing
    origin = np.array([ax[0] for ax in grid.axes])
    for c0, c1 in _CELL_EDGES:
        i0 = cells + c0
        i1 = cells + c1
        f0 = v[tuple(i0.T)]
        f1 = v[tuple(i1.T)]
        cross = (f0 < 0) != (f1 < 0)
        t = np.where(cross, f0 / np.where(cross, f0 - f1, 1.0), 0.0)
        p = origin + (i0 + t[:, None] * (np.array(c1) - np.array(c0))) * spacing
        acc[cross] += p[cross]
        cnt[cross] += 1
    verts = acc / cnt[:, None]

    tris = []
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a] = slice(0, v.shape[a] - 1)
        hi[a] = slice(1, v.shape[a])
        flip = inside[tuple(lo)] != inside[tuple(hi)]
        nodes = np.argwhere(flip)
        ok = (nodes[:, b] > 0) & (nodes[:, c] > 0)
        ok &= (nodes[:, b] < active.shape[b]) & (nodes[:, c] < active.shape[c])
        nodes = nodes[ok]
        eb = np.zeros(3, dtype=np.int64)
        ec = np.zeros(3, dtype=np.int64)
        eb[b] = 1
        ec[c] = 1
        ring = [nodes - eb - ec, nodes - ec, nodes, nodes - eb]
        q = np.stack([cell_idx[tuple(r.T)] for r in ring], axis=1)
        valid = (q >= 0).all(1)
        q = q[valid]
        # lower node inside: the outward normal points along +a
        low_inside = inside[tuple(nodes[valid].T)]
        q = np.where(low_inside[:, None], q, q[:, ::-1])
        tris.append(q[:, [0, 1, 2]])
        tris.append(q[:, [0, 2, 3]])
    faces = np.concatenate(tris)
    return verts, faces


def extract_mesh(scene: SolidScene, res: int = GRID_RES) -> tuple[np.ndarray, np.ndarray]:
    return surface_nets(sdf_grid(scene, res))


def write_obj(path: str | Path, verts: np.ndarray, faces: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for x, y, z in verts:
            fh.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
        for a, b, c in faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def export_mesh(scene: SolidScene, path: str | Path, res: int = GRID_RES) -> int:
    """Write an OBJ surface mesh; returns the triangle count."""
    verts, faces = extract_mesh(scene, res)
    if len(faces) == 0:
        raise EmptySolid("mesh has no triangles")
    write_obj(path, verts, faces)
    return len(faces)


def write_ply(path: str | Path, points: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in points:
            fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def read_ply(path: str | Path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    end = lines.index("end_header")
    return np.array([[float(v) for v in ln.split()] for ln in lines[end + 1 :] if ln.strip()])
