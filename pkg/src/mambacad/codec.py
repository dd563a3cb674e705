"""Parametric CAD sequences: data model, corpus records, grammar, quantization.

A program is a list of sketch-extrude units padded with EOS to ``MAX_LEN``
commands.  Every command carries 16 parameter slots laid out as::

    x y alpha f r theta phi gamma px py pz s e1 e2 b u
    0 1 2     3 4 5     6   7     8  9  10 11 12 13 14 15

Unused slots hold ``-1``.  Continuous slots store values already mapped to
[-1, 1] (see ``mambacad.geometry`` for how each slot decodes into geometry);
``f``, ``b`` and ``u`` are small integer enums.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAX_LEN = 128
N_SLOTS = 16
N_COMMANDS = 6
N_BINS = 256
UNUSED_BIN = N_BINS  # one extra class for "slot not used by this command"
N_CLASSES = N_BINS + 1
PAD = -1.0

SLOT_NAMES = (
    "x", "y", "alpha", "f", "r",
    "theta", "phi", "gamma", "px", "py", "pz", "s", "e1", "e2", "b", "u",
)
SLOT_INDEX = {name: i for i, name in enumerate(SLOT_NAMES)}


class CommandKind(IntEnum):
    SOL = 0
    LINE = 1
    ARC = 2
    CIRCLE = 3
    EXTRUDE = 4
    EOS = 5

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    CommandKind.SOL: "SOL",
    CommandKind.LINE: "Line",
    CommandKind.ARC: "Arc",
    CommandKind.CIRCLE: "Circle",
    CommandKind.EXTRUDE: "Extrude",
    CommandKind.EOS: "EOS",
}
KIND_BY_LABEL = {label: kind for kind, label in _LABELS.items() if kind != CommandKind.EOS}

USED_SLOTS: dict[CommandKind, tuple[int, ...]] = {
    CommandKind.SOL: (),
    CommandKind.LINE: (0, 1),
    CommandKind.ARC: (0, 1, 2, 3),
    CommandKind.CIRCLE: (0, 1, 4),
    CommandKind.EXTRUDE: tuple(range(5, 16)),
    CommandKind.EOS: (),
}

# slot index -> number of categories
DISCRETE_SLOTS = {3: 2, 14: 4, 15: 3}

SLOT_MASK = np.zeros((N_COMMANDS, N_SLOTS), dtype=bool)
for _kind, _slots in USED_SLOTS.items():
    SLOT_MASK[_kind, list(_slots)] = True

CONTINUOUS_MASK = SLOT_MASK.copy()
CONTINUOUS_MASK[:, list(DISCRETE_SLOTS)] = False


class BooleanOp(IntEnum):
    NEW = 0
    JOIN = 1
    CUT = 2
    INTERSECT = 3


class ExtentType(IntEnum):
    ONE_SIDED = 0
    SYMMETRIC = 1
    TWO_SIDED = 2


class CodecError(ValueError):
    pass


class MalformedRecord(CodecError):
    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} (command {position})")
        self.position = position


class GrammarError(CodecError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (command {position})")
        self.position = position


class NotNormalized(CodecError):
    pass


class DegenerateModel(CodecError):
    pass


@dataclass(frozen=True, eq=False)
class CadSequence:
    """Padded program: ``kinds`` (128,) ints and ``params`` (128, 16) floats."""

    kinds: np.ndarray
    params: np.ndarray
    raw_length: int

    def __post_init__(self):
        if self.kinds.shape != (MAX_LEN,) or self.params.shape != (MAX_LEN, N_SLOTS):
            raise ValueError("CadSequence arrays must be (128,) and (128, 16)")

    @classmethod
    def from_commands(cls, commands: Iterable[tuple[CommandKind, Mapping[str, float]]]) -> "CadSequence":
        """Build and validate a sequence from ``(kind, {slot: value})`` pairs."""
        commands = list(commands)
        if len(commands) > MAX_LEN:
            raise GrammarError(f"exceeds N={MAX_LEN}", MAX_LEN)
        kinds = np.full(MAX_LEN, CommandKind.EOS, dtype=np.int64)
        params = np.full((MAX_LEN, N_SLOTS), PAD)
        for t, (kind, values) in enumerate(commands):
            kind = CommandKind(kind)
            if kind == CommandKind.EOS:
                raise GrammarError("explicit EOS inside program", t)
            kinds[t] = kind
            params[t] = _slot_vector(kind, values, t)
        validate(kinds, len(commands))
        return cls(kinds, params, len(commands))

    @property
    def commands(self) -> list[tuple[CommandKind, np.ndarray]]:
        return [(CommandKind(int(k)), self.params[t]) for t, k in enumerate(self.kinds[: self.raw_length])]

    def units(self) -> list[tuple[int, int]]:
        """(start, extrude_index) span of every sketch-extrude unit."""
        spans, start = [], 0
        for t in range(self.raw_length):
            if self.kinds[t] == CommandKind.EXTRUDE:
                spans.append((start, t))
                start = t + 1
        return spans

    def with_params(self, params: np.ndarray) -> "CadSequence":
        return CadSequence(self.kinds.copy(), params, self.raw_length)

    def __eq__(self, other):
        if not isinstance(other, CadSequence):
            return NotImplemented
        return (
            self.raw_length == other.raw_length
            and np.array_equal(self.kinds, other.kinds)
            and np.array_equal(self.params, other.params)
        )


@dataclass(frozen=True, eq=False)
class QuantizedSequence:
    """Network tokens: command ids in [0, 6), parameter bins in [0, 257)."""

    command_ids: np.ndarray
    param_bins: np.ndarray
    raw_length: int

    @classmethod
    def from_arrays(cls, command_ids, param_bins, raw_length: int | None = None) -> "QuantizedSequence":
        command_ids = np.asarray(command_ids, dtype=np.int64).reshape(MAX_LEN)
        param_bins = np.asarray(param_bins, dtype=np.int64).reshape(MAX_LEN, N_SLOTS)
        if raw_length is None:
            raw_length = first_eos(command_ids)
        return cls(command_ids, param_bins, int(raw_length))

    def check(self) -> None:
        """Raise ValueError unless the sentinel/range invariants hold."""
        if self.command_ids.min() < 0 or self.command_ids.max() >= N_COMMANDS:
            raise ValueError("command id out of range")
        if self.param_bins.min() < 0 or self.param_bins.max() > UNUSED_BIN:
            raise ValueError("parameter bin out of range")
        used = SLOT_MASK[self.command_ids]
        if not np.array_equal(self.param_bins == UNUSED_BIN, ~used):
            raise ValueError("unused-slot sentinel does not match command masks")

    def key(self) -> bytes:
        return self.command_ids.astype(np.uint8).tobytes() + self.param_bins.astype("<u2").tobytes()

    def __eq__(self, other):
        if not isinstance(other, QuantizedSequence):
            return NotImplemented
        return np.array_equal(self.command_ids, other.command_ids) and np.array_equal(
            self.param_bins, other.param_bins
        )


def first_eos(command_ids: np.ndarray) -> int:
    hits = np.flatnonzero(np.asarray(command_ids) == CommandKind.EOS)
    return int(hits[0]) if hits.size else MAX_LEN


def _slot_vector(kind: CommandKind, values: Mapping[str, float], position: int) -> np.ndarray:
    row = np.full(N_SLOTS, PAD)
    used = USED_SLOTS[kind]
    for name, value in values.items():
        if name not in SLOT_INDEX:
            raise MalformedRecord(f"unknown parameter {name!r}", position)
        j = SLOT_INDEX[name]
        if j not in used:
            raise MalformedRecord(f"parameter {name!r} not used by {kind.label}", position)
        if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
            raise MalformedRecord(f"parameter {name!r} is not a number", position)
        value = float(value)
        if not math.isfinite(value):
            raise MalformedRecord(f"parameter {name!r} is not finite", position)
        if j in DISCRETE_SLOTS and (value != int(value) or not 0 <= value < DISCRETE_SLOTS[j]):
            raise MalformedRecord(f"parameter {name!r}={value} outside its enum", position)
        row[j] = value
    missing = [SLOT_NAMES[j] for j in used if row[j] == PAD and SLOT_NAMES[j] not in values]
    if missing:
        raise MalformedRecord(f"{kind.label} missing parameters {missing}", position)
    return row


def validate(kinds: np.ndarray, raw_length: int | None = None) -> int:
    """Single left-to-right pass over the command grammar.

    Returns the raw length (index of the first EOS).  Raises GrammarError at
    the first offending position.
    """
    kinds = np.asarray(kinds)
    n = len(kinds)
    if n > MAX_LEN:
        raise GrammarError(f"exceeds N={MAX_LEN}", MAX_LEN)
    length = first_eos(kinds) if raw_length is None else raw_length
    for t in range(length, n):
        if kinds[t] != CommandKind.EOS:
            raise GrammarError("command after EOS", t)

    # states: start, open (SOL seen), circle (loop closed), poly (curves seen), done (extrude)
    state = "start"
    for t in range(length):
        k = kinds[t]
        if k == CommandKind.SOL:
            if state == "open":
                raise GrammarError("empty loop", t)
            state = "open"
        elif k == CommandKind.CIRCLE:
            if state != "open":
                raise GrammarError("Circle must directly follow SOL", t)
            state = "circle"
        elif k in (CommandKind.LINE, CommandKind.ARC):
            if state not in ("open", "poly"):
                raise GrammarError(f"{CommandKind(k).label} outside a curve loop", t)
            state = "poly"
        elif k == CommandKind.EXTRUDE:
            if state not in ("circle", "poly"):
                raise GrammarError("Extrude without a preceding sketch", t)
            state = "done"
        else:
            raise GrammarError("unexpected command", t)
    if state not in ("start", "done"):
        raise GrammarError("program ends inside a sketch", length)
    return length


def parse_corpus_record(data: bytes | str | Mapping) -> tuple[str, CadSequence]:
    """Parse one corpus record; returns ``(id, sequence)``."""
    if isinstance(data, (bytes, str)):
        try:
            data = json.loads(data)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedRecord(f"invalid JSON: {exc}") from None
    if not isinstance(data, Mapping):
        raise MalformedRecord("record must be a JSON object")
    rid = data.get("id")
    commands = data.get("commands")
    if not isinstance(rid, str):
        raise MalformedRecord("record 'id' must be a string")
    if not isinstance(commands, list):
        raise MalformedRecord("record 'commands' must be a list")
    parsed = []
    for t, cmd in enumerate(commands):
        if not isinstance(cmd, Mapping):
            raise MalformedRecord("command must be an object", t)
        label = cmd.get("kind")
        if label not in KIND_BY_LABEL:
            raise MalformedRecord(f"unsupported command kind {label!r}", t)
        params = cmd.get("params", {})
        if not isinstance(params, Mapping):
            raise MalformedRecord("'params' must be an object", t)
        parsed.append((KIND_BY_LABEL[label], params))
    if len(parsed) > MAX_LEN:
        raise GrammarError(f"exceeds N={MAX_LEN}", MAX_LEN)
    return rid, CadSequence.from_commands(parsed)


def to_record(seq: CadSequence, rid: str, digits: int | None = None) -> dict:
    commands = []
    for kind, row in seq.commands:
        params = {}
        for j in USED_SLOTS[kind]:
            v = float(row[j])
            if j in DISCRETE_SLOTS:
                params[SLOT_NAMES[j]] = int(v)
            else:
                params[SLOT_NAMES[j]] = round(v, digits) if digits is not None else v
        commands.append({"kind": kind.label, "params": params})
    return {"id": rid, "commands": commands}


def normalize(seq: CadSequence) -> CadSequence:
    """Rescale a program so its solid fits [-1, 1]^3, touching along its longest axis.

    Sketch coordinates are first rescaled so each sketch's largest |x|, |y|, r
    equals one (the sketch scale compensates), then the world placement,
    scale and extents are mapped by the box-fitting similarity transform.
    """
    from mambacad import geometry

    if seq.raw_length == 0:
        raise DegenerateModel("empty program")
    params = seq.params.copy()
    for start, ext in seq.units():
        rows = slice(start, ext)
        kinds = seq.kinds[rows]
        sk = params[rows]
        mags = [np.abs(sk[kinds == k][:, list(USED_SLOTS[k][:2])]) for k in (CommandKind.LINE, CommandKind.ARC)]
        circles = sk[kinds == CommandKind.CIRCLE]
        mags.append(np.abs(circles[:, [0, 1, 4]]))
        m = max((float(a.max()) for a in mags if a.size), default=0.0)
        if m <= 0.0 or not math.isfinite(m):
            raise DegenerateModel(f"sketch of unit ending at {ext} has zero extent")
        for t in range(start, ext):
            k = CommandKind(int(seq.kinds[t]))
            for j in (0, 1, 4):
                if j in USED_SLOTS[k]:
                    params[t, j] /= m
        params[ext, 11] = geometry.decode_scale(params[ext, 11]) * m - 1.0

    canon = seq.with_params(params)
    lo, hi = geometry.build_scene(canon).bounds
    extent = hi - lo
    size = float(extent.max()) if np.all(np.isfinite(extent)) else math.nan
    if not math.isfinite(size) or size <= 1e-12:
        raise DegenerateModel("zero-extent bounding box")
    center = (lo + hi) / 2.0
    k = 2.0 / size
    for _, ext in seq.units():
        params[ext, 8:11] = k * (params[ext, 8:11] - center)
        params[ext, 11] = k * geometry.decode_scale(params[ext, 11]) - 1.0
        params[ext, 12:14] = k * params[ext, 12:14]
    return seq.with_params(params)


def quantize(seq: CadSequence) -> QuantizedSequence:
    ids = seq.kinds.astype(np.int64).copy()
    mask = SLOT_MASK[ids]
    cont = CONTINUOUS_MASK[ids]
    values = seq.params
    over = cont & ~(np.abs(values) <= 1.0 + 1e-6)
    if over.any():
        t, j = np.argwhere(over)[0]
        raise NotNormalized(f"slot {SLOT_NAMES[j]} of command {t} = {values[t, j]} outside [-1, 1]")
    bins = np.full((MAX_LEN, N_SLOTS), UNUSED_BIN, dtype=np.int64)
    # round half away from zero; the scaled value is never negative
    scaled = np.floor((np.clip(values, -1.0, 1.0) + 1.0) / 2.0 * (N_BINS - 1) + 0.5)
    bins[cont] = np.clip(scaled[cont], 0, N_BINS - 1).astype(np.int64)
    disc = mask & ~cont
    bins[disc] = np.rint(values[disc]).astype(np.int64)
    return QuantizedSequence(ids, bins, seq.raw_length)


def dequantize_value(bins) -> np.ndarray:
    return 2.0 * np.asarray(bins, dtype=np.float64) / (N_BINS - 1) - 1.0


def dequantize(q: QuantizedSequence) -> CadSequence:
    """Map tokens back to a sequence; unused-slot predictions are discarded.

    Raises GrammarError when the command ids break the grammar or a used slot
    holds the sentinel or an out-of-range enum.
    """
    ids = np.asarray(q.command_ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= N_COMMANDS:
        raise GrammarError("command id out of range", int(np.argmax((ids < 0) | (ids >= N_COMMANDS))))
    length = validate(ids)
    bins = np.asarray(q.param_bins, dtype=np.int64)
    mask = SLOT_MASK[ids]
    bad = mask & (bins == UNUSED_BIN)
    for j, ncat in DISCRETE_SLOTS.items():
        bad[:, j] |= mask[:, j] & (bins[:, j] >= ncat)
    if bad.any():
        t, j = np.argwhere(bad)[0]
        raise GrammarError(f"invalid value for slot {SLOT_NAMES[j]}", int(t))
    params = np.full((MAX_LEN, N_SLOTS), PAD)
    cont = CONTINUOUS_MASK[ids]
    params[cont] = dequantize_value(bins[cont])
    disc = mask & ~cont
    params[disc] = bins[disc]
    return CadSequence(ids.copy(), params, length)


def mask_positions(raw_length: int, ratio: float, rng_seed: int) -> np.ndarray:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    count = int(math.floor(ratio * raw_length + 1e-9))
    rng = np.random.default_rng(rng_seed)
    return np.sort(rng.choice(raw_length, size=count, replace=False))


def mask_sequence(seq: QuantizedSequence, ratio: float, rng_seed: int) -> QuantizedSequence:
    """Zero the command id and all bins at floor(ratio * raw_length) random positions."""
    pos = mask_positions(seq.raw_length, ratio, rng_seed)
    ids = seq.command_ids.copy()
    bins = seq.param_bins.copy()
    ids[pos] = 0
    bins[pos] = 0
    return QuantizedSequence(ids, bins, seq.raw_length)


# --- corpus files -----------------------------------------------------------

def read_corpus(path: str | Path) -> list[dict]:
    """Read a JSON-lines corpus, skipping provenance header lines."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if isinstance(obj, dict) and "provenance" in obj and "commands" not in obj:
                continue
            records.append(obj)
    return records


def write_corpus(path: str | Path, records: Iterable[Mapping], provenance: Mapping | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if provenance is not None:
            fh.write(json.dumps({"provenance": dict(provenance)}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


_MAGIC = b"MCAD1"


def write_tokens(path: str | Path, seqs: Iterable[QuantizedSequence]) -> int:
    """Flat little-endian token dump: magic, u32 count, then per record u8[128] + u16[128*16]."""
    seqs = list(seqs)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(seqs)))
        for q in seqs:
            fh.write(q.command_ids.astype(np.uint8).tobytes())
            fh.write(q.param_bins.astype("<u2").tobytes())
    return len(seqs)


def read_tokens(path: str | Path) -> list[QuantizedSequence]:
    blob = Path(path).read_bytes()
    if blob[:5] != _MAGIC:
        raise MalformedRecord("not an MCAD1 token file")
    (count,) = struct.unpack_from("<I", blob, 5)
    rec = MAX_LEN + MAX_LEN * N_SLOTS * 2
    if len(blob) != 9 + count * rec:
        raise MalformedRecord("token file truncated")
    out = []
    for i in range(count):
        off = 9 + i * rec
        ids = np.frombuffer(blob, np.uint8, MAX_LEN, off).astype(np.int64)
        bins = np.frombuffer(blob, "<u2", MAX_LEN * N_SLOTS, off + MAX_LEN).astype(np.int64)
        out.append(QuantizedSequence.from_arrays(ids, bins))
    return out
