"""Dataset tooling: length filter, deterministic splits, synthetic sketch-extrude corpus."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from mambacad import codec, geometry
from mambacad.codec import BooleanOp, CommandKind, ExtentType

MIN_LEN = 10
# length buckets used for corpus statistics; the last one is reported as [60-128]
BUCKETS = ((1, 10), (11, 25), (26, 40), (41, 60), (61, 128))
BUCKET_LABELS = ("[1-10]", "[11-25]", "[26-40]", "[41-60]", "[60-128]")
# share of each length bucket in the reference dataset
REFERENCE_DISTRIBUTION = {(11, 25): 0.4125, (26, 40): 0.2660, (41, 60): 0.1613, (61, 128): 0.1602}


class TooFewRecords(ValueError):
    pass


class GenerationBudgetExceeded(RuntimeError):
    pass


@dataclass
class FilterStats:
    kept: int = 0
    rejected: Counter = field(default_factory=Counter)
    buckets: dict = field(default_factory=lambda: dict.fromkeys(BUCKET_LABELS, 0))

    def to_dict(self) -> dict:
        total = max(self.kept, 1)
        return {
            "kept": self.kept,
            "rejected": dict(sorted(self.rejected.items())),
            "buckets": dict(self.buckets),
            "bucket_fractions": {k: v / total for k, v in self.buckets.items()},
        }


def bucket_label(length: int) -> str:
    for (lo, hi), label in zip(BUCKETS, BUCKET_LABELS):
        if lo <= length <= hi:
            return label
    raise ValueError(f"length {length} outside [1, {codec.MAX_LEN}]")


def _record_length(record) -> int | None:
    if isinstance(record, Mapping) and isinstance(record.get("commands"), list):
        return len(record["commands"])
    return None


def filter_corpus(records: Iterable, min_len: int = MIN_LEN, max_len: int = codec.MAX_LEN):
    """Keep grammar-valid records with ``min_len <= length <= max_len``.

    Returns ``(kept, stats)``; every rejection is counted under one reason:
    malformed, unsupported_command, too_long, grammar, too_short.
    """
    kept, stats = [], FilterStats()
    for rec in records:
        n = _record_length(rec)
        if n is not None and n > max_len:
            stats.rejected["too_long"] += 1
            continue
        try:
            _, seq = codec.parse_corpus_record(rec)
        except codec.GrammarError:
            stats.rejected["grammar"] += 1
            continue
        except codec.MalformedRecord as exc:
            reason = "unsupported_command" if "unsupported command" in str(exc) else "malformed"
            stats.rejected[reason] += 1
            continue
        if seq.raw_length < min_len:
            stats.rejected["too_short"] += 1
            continue
        kept.append(rec)
        stats.kept += 1
        stats.buckets[bucket_label(seq.raw_length)] += 1
    return kept, stats


def split(records: Sequence, seed: int = 0, fractions=(0.8, 0.1, 0.1)):
    """Shuffle by seed and cut into floor(0.8 n) / floor(0.1 n) / remainder."""
    n = len(records)
    if n < 10:
        raise TooFewRecords(f"need at least 10 records to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(fractions[0] * n)
    n_val = math.floor(fractions[1] * n)
    pick = [records[i] for i in order]
    return pick[:n_train], pick[n_train : n_train + n_val], pick[n_train + n_val :]


# --- synthetic programs -------------------------------------------------------

@dataclass
class SynthConfig:
    cut_ratio: float = 0.25
    intersect_ratio: float = 0.05
    arc_ratio: float = 0.3
    max_units: int = 6
    max_loops: int = 3
    max_segments: int = 30
    max_attempts: int = 200


def _allocate(count: int, length_range: tuple[int, int], distribution) -> list[tuple[int, int]]:
    """Per-record length interval; bucket counts follow ``distribution`` by largest remainder."""
    lo, hi = length_range
    if distribution is None:
        return [(lo, hi)] * count
    spans, weights = [], []
    for (a, b), w in distribution.items():
        a, b = max(a, lo), min(b, hi)
        if a <= b and w > 0:
            spans.append((a, b))
            weights.append(w)
    if not spans:
        raise ValueError("length distribution does not overlap the length range")
    w = np.array(weights) / sum(weights)
    raw = w * count
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: count - counts.sum()]:
        counts[i] += 1
    return [span for span, c in zip(spans, counts) for _ in range(c)]


def _composition(total: int, parts: int, lo: int, hi: int, rng) -> list[int] | None:
    sizes = [lo] * parts
    rest = total - lo * parts
    while rest > 0:
        open_ = [i for i in range(parts) if sizes[i] < hi]
        i = open_[rng.integers(len(open_))]
        step = min(rest, hi - sizes[i], int(rng.integers(1, 4)))
        sizes[i] += step
        rest -= step
    # a unit of four commands would need a two-segment loop
    while 4 in sizes:
        i = sizes.index(4)
        donors = [j for j in range(parts) if j != i and sizes[j] not in (3, 5)]
        if donors:
            sizes[donors[int(rng.integers(len(donors)))]] -= 1
            sizes[i] += 1
        else:
            growers = [j for j in range(parts) if j != i and 5 <= sizes[j] < hi]
            if not growers:
                return None
            sizes[growers[int(rng.integers(len(growers)))]] += 1
            sizes[i] -= 1
    return sizes


def _unit_lengths(length: int, cfg: SynthConfig, rng) -> list[int] | None:
    unit_max = 2 + cfg.max_segments + 2 * (cfg.max_loops - 1)
    lo_units = max(1, -(-length // unit_max))
    hi_units = min(cfg.max_units, length // 3)
    if lo_units > hi_units:
        return None
    units = int(rng.integers(lo_units, hi_units + 1))
    return _composition(length, units, 3, unit_max, rng)


def _loop_plan(body: int, cfg: SynthConfig, rng) -> tuple[int, int]:
    """Split ``body`` sketch commands into (segments of the curve loop, circle count)."""
    options = []
    for circles in range(cfg.max_loops + 1):
        rest = body - 2 * circles
        if rest == 0 and 1 <= circles <= cfg.max_loops:
            options.append((0, circles))
        elif rest >= 4 and rest - 1 <= cfg.max_segments and circles + 1 <= cfg.max_loops:
            options.append((rest - 1, circles))
    if not options:
        raise ValueError(f"no loop layout for {body} sketch commands")
    return options[int(rng.integers(len(options)))]


def _segment_distance(p: np.ndarray, loop: np.ndarray) -> np.ndarray:
    a, b = loop[:-1], loop[1:]
    ba = b - a
    pa = p[:, None, :] - a[None]
    h = np.clip((pa * ba).sum(-1) / np.maximum((ba * ba).sum(-1), 1e-300), 0.0, 1.0)
    return np.linalg.norm(pa - ba * h[..., None], axis=-1).min(1)


def _star_polygon(n: int, cfg: SynthConfig, rng):
    """Sketch commands of a star-shaped loop through the origin (counter-clockwise)."""
    if n == 4 and rng.random() < 0.5:
        w = rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0])
        h = rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0])
        pts = np.array([[w, 0.0], [w, h], [0.0, h], [0.0, 0.0]])
        cmds = [(CommandKind.LINE, {"x": float(x), "y": float(y)}) for x, y in pts]
        return cmds, np.vstack([[0.0, 0.0], pts]), np.array([w / 2.0, h / 2.0])
    beta = rng.uniform(-math.pi, math.pi)
    radius = 0.5
    center = radius * np.array([math.cos(beta), math.sin(beta)])
    gap = 2.0 * math.pi / n
    ang = beta + math.pi + gap * np.arange(n) + rng.uniform(-0.25, 0.25, n) * gap
    ang[0] = beta + math.pi
    rho = rng.uniform(0.6, 1.15, n) * radius
    rho[0] = radius
    verts = center + rho[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])
    verts[0] = 0.0
    ring = np.vstack([verts[1:], verts[:1]])
    cmds = []
    outline = [np.zeros(2)]
    for end in ring:
        x, y = float(end[0]), float(end[1])
        if rng.random() < cfg.arc_ratio:
            sweep = rng.uniform(0.15, 0.45) * math.pi
            cmds.append((CommandKind.ARC, {"x": x, "y": y, "alpha": sweep / math.pi - 1.0, "f": 1}))
            outline.extend(geometry._arc_points(outline[-1], np.array([x, y]), sweep, True))
        else:
            cmds.append((CommandKind.LINE, {"x": x, "y": y}))
            outline.append(np.array([x, y]))
    return cmds, np.vstack(outline), center


def _place_holes(count: int, outline: np.ndarray, rng) -> list[tuple[float, float, float]] | None:
    """Circles strictly inside ``outline`` and disjoint from it and from each other."""
    prof = geometry.Profile((outline,))
    lo, hi = outline.min(0), outline.max(0)
    holes: list[tuple[float, float, float]] = []
    for _ in range(count):
        for _attempt in range(30):
            c = rng.uniform(lo, hi)
            if not prof.winding_inside(c[None])[0]:
                continue
            room = float(_segment_distance(c[None], outline)[0])
            for hx, hy, hr in holes:
                room = min(room, math.hypot(c[0] - hx, c[1] - hy) - hr)
            r = room * rng.uniform(0.4, 0.7)
            if r > 0.06:
                holes.append((float(c[0]), float(c[1]), float(r)))
                break
        else:
            return None
    return holes


def _sketch(segments: int, circles: int, cfg: SynthConfig, rng):
    """Sketch commands plus the 2-D anchor used to place follow-up bodies."""
    if segments:
        curve, outline, anchor = _star_polygon(segments, cfg, rng)
        holes = _place_holes(circles, outline, rng)
        if holes is None:
            return None
        cmds = [(CommandKind.SOL, {})] + curve
    else:
        r0 = float(rng.uniform(0.5, 1.0))
        c0 = rng.uniform(-0.2, 0.2, 2)
        t = np.linspace(0.0, 2.0 * math.pi, 65)
        holes = _place_holes(circles - 1, c0 + r0 * np.column_stack([np.cos(t), np.sin(t)]), rng)
        if holes is None:
            return None
        cmds = [(CommandKind.SOL, {}), (CommandKind.CIRCLE, {"x": float(c0[0]), "y": float(c0[1]), "r": r0})]
        anchor = c0
    for x, y, r in holes:
        cmds += [(CommandKind.SOL, {}), (CommandKind.CIRCLE, {"x": x, "y": y, "r": r})]
    return cmds, anchor


# (theta, phi) slot values giving a sketch normal along z, x or y
_NORMALS = ((0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (1.0, 0.0), (0.0, -0.5), (-0.5, 0.5))


def _extrude(op: BooleanOp, origin: np.ndarray, scale: float, depth: float, rng) -> dict:
    if rng.random() < 0.1:
        theta, phi = (float(v) for v in rng.uniform(-1.0, 1.0, 2))
    else:
        theta, phi = _NORMALS[int(rng.integers(len(_NORMALS)))]
    gamma = float(rng.choice([0.0, 0.5]))
    etype = ExtentType(int(rng.choice(3, p=[0.6, 0.25, 0.15])))
    e1 = depth * rng.uniform(0.5, 1.0)
    e2 = depth * rng.uniform(0.2, 0.5) if etype == ExtentType.TWO_SIDED else 0.0
    if op == BooleanOp.CUT and etype == ExtentType.ONE_SIDED and rng.random() < 0.5:
        e1 = -e1
    return {
        "theta": theta, "phi": phi, "gamma": gamma,
        "px": float(origin[0]), "py": float(origin[1]), "pz": float(origin[2]),
        "s": scale - 1.0, "e1": e1 / 2.0, "e2": e2 / 2.0,
        "b": int(op), "u": int(etype),
    }


def _pick_op(index: int, cfg: SynthConfig, rng) -> BooleanOp:
    if index == 0:
        return BooleanOp.NEW
    u = rng.random()
    if u < cfg.intersect_ratio:
        return BooleanOp.INTERSECT
    if u < cfg.intersect_ratio + cfg.cut_ratio:
        return BooleanOp.CUT
    return BooleanOp.JOIN


def _program(length: int, cfg: SynthConfig, rng) -> list | None:
    commands: list = []
    bodies: list[geometry.ExtrusionBody] = []
    units = _unit_lengths(length, cfg, rng)
    if units is None:
        return None
    for i, unit in enumerate(units):
        segments, circles = _loop_plan(unit - 1, cfg, rng)
        made = _sketch(segments, circles, cfg, rng)
        if made is None:
            return None
        sketch, _ = made
        op = _pick_op(i, cfg, rng)
        if not bodies:
            origin, size = np.zeros(3), 1.0
        else:
            lo, hi = geometry.SolidScene(tuple(bodies)).bounds
            size = float((hi - lo).max())
            origin = rng.uniform(lo, hi)
        if op == BooleanOp.CUT:
            scale, depth = size * rng.uniform(0.2, 0.5), size * rng.uniform(0.3, 0.8)
        elif op == BooleanOp.INTERSECT:
            origin = (lo + hi) / 2.0
            scale, depth = size * rng.uniform(0.6, 0.9), size * rng.uniform(0.6, 1.0)
        else:
            scale, depth = size * rng.uniform(0.4, 1.0), size * rng.uniform(0.3, 1.0)
        ext = _extrude(op, origin, scale, depth, rng)
        try:
            body = geometry.build_body(
                [(k, codec._slot_vector(k, v, 0)) for k, v in sketch],
                codec._slot_vector(CommandKind.EXTRUDE, ext, 0),
            )
        except geometry.GeometryError:
            return None
        bodies.append(body)
        commands += sketch + [(CommandKind.EXTRUDE, ext)]
    return commands


def _scene_ok(seq: codec.CadSequence) -> None:
    if not geometry.has_interior(geometry.build_scene(seq)):
        raise geometry.EmptySolid()


def verify_program(seq: codec.CadSequence) -> codec.CadSequence:
    """Normalize, quantize and rebuild; returns the dequantized (lattice) program.

    Raises CodecError or GeometryError when any stage fails, including the
    second pass over the emitted lattice program.
    """
    lattice = codec.dequantize(codec.quantize(codec.normalize(seq)))
    _scene_ok(lattice)
    _, parsed = codec.parse_corpus_record(codec.to_record(lattice, "check"))
    if parsed != lattice:
        raise codec.MalformedRecord("record round trip changed the program")
    _scene_ok(codec.dequantize(codec.quantize(codec.normalize(parsed))))
    return lattice


def synthesize(
    count: int,
    length_range: tuple[int, int] = (MIN_LEN, codec.MAX_LEN),
    seed: int = 0,
    distribution: Mapping[tuple[int, int], float] | None = None,
    config: SynthConfig | None = None,
) -> list[dict]:
    """``count`` geometry-checked corpus records; byte-identical for equal arguments.

    With ``distribution`` (bucket -> weight) the record count per length bucket
    is fixed up front by largest-remainder rounding; lengths are uniform inside
    a bucket.
    """
    cfg = config or SynthConfig()
    lo, hi = length_range
    if not 4 <= lo <= hi <= codec.MAX_LEN:
        raise ValueError("length_range must lie within [4, 128]")
    spans = _allocate(count, length_range, distribution)
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(spans))
    records = []
    for i, j in enumerate(order):
        a, b = spans[j]
        rng = np.random.default_rng([seed, i])
        for _ in range(cfg.max_attempts):
            length = int(rng.integers(a, b + 1))
            cmds = _program(length, cfg, rng)
            if cmds is None:
                continue
            try:
                lattice = verify_program(codec.CadSequence.from_commands(cmds))
            except (codec.CodecError, geometry.GeometryError):
                continue
            records.append(codec.to_record(lattice, f"synth-{seed}-{i:06d}"))
            break
        else:
            raise GenerationBudgetExceeded(f"record {i}: {cfg.max_attempts} rejected candidates")
    return records


def length_histogram(records: Iterable[Mapping]) -> dict[str, float]:
    counts = Counter(bucket_label(len(r["commands"])) for r in records)
    total = sum(counts.values()) or 1
    return {label: counts.get(label, 0) / total for label in BUCKET_LABELS}
