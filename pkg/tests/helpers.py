"""Shared test utilities: random programs, a grammar mutator, finite differences."""

from __future__ import annotations

import numpy as np
import torch

from mambacad.codec import MAX_LEN, CadSequence, CommandKind

K = CommandKind


def random_commands(rng: np.random.Generator, max_len: int = MAX_LEN) -> list:
    """Grammar-valid (not necessarily buildable) program with values in [-1, 1]."""
    cmds: list = []
    while True:
        unit = []
        for _ in range(int(rng.integers(1, 4))):
            unit.append((K.SOL, {}))
            if rng.random() < 0.3:
                x, y, r = rng.uniform(-1, 1, 3)
                unit.append((K.CIRCLE, {"x": x, "y": y, "r": r}))
            else:
                for _ in range(int(rng.integers(1, 8))):
                    x, y = rng.uniform(-1, 1, 2)
                    if rng.random() < 0.4:
                        unit.append((K.ARC, {"x": x, "y": y, "alpha": rng.uniform(-1, 1), "f": int(rng.integers(2))}))
                    else:
                        unit.append((K.LINE, {"x": x, "y": y}))
        v = rng.uniform(-1, 1, 9)
        unit.append((K.EXTRUDE, {
            "theta": v[0], "phi": v[1], "gamma": v[2], "px": v[3], "py": v[4], "pz": v[5],
            "s": v[6], "e1": v[7], "e2": v[8], "b": int(rng.integers(4)), "u": int(rng.integers(3)),
        }))
        if len(cmds) + len(unit) > max_len:
            break
        cmds += unit
        if rng.random() < 0.35:
            break
    if not cmds:
        return random_commands(rng, max_len)
    return [(k, {n: float(v) if not isinstance(v, int) else v for n, v in p.items()}) for k, p in cmds]


def random_sequence(rng: np.random.Generator, max_len: int = MAX_LEN) -> CadSequence:
    return CadSequence.from_commands(random_commands(rng, max_len))


def mutate_kinds(kinds: list[int], rng: np.random.Generator) -> list[int]:
    """Random edit of a command-kind list: replace, delete, insert or swap."""
    kinds = list(kinds)
    op = rng.integers(4)
    i = int(rng.integers(len(kinds)))
    if op == 0:
        kinds[i] = int(rng.integers(5))
    elif op == 1 and len(kinds) > 1:
        del kinds[i]
    elif op == 2:
        kinds.insert(i, int(rng.integers(5)))
    else:
        j = int(rng.integers(len(kinds)))
        kinds[i], kinds[j] = kinds[j], kinds[i]
    return kinds


def reference_grammar(kinds: list[int]) -> bool:
    """Slow regular-expression form of the sketch-extrude grammar."""
    import re

    text = "".join("SLACE"[k] for k in kinds)
    return bool(re.fullmatch(r"((S(C|[LA]+))+E)*", text))


# --- finite differences --------------------------------------------------------

def fd_check(fn, tensors, eps: float = 1e-4, rtol: float = 1e-3, atol: float = 1e-7, max_entries: int = 40, seed: int = 0):
    """Central differences on a random scalar projection of ``fn(*)``.

    ``tensors`` are float64 leaves (inputs or parameters).  Up to
    ``max_entries`` coordinates per tensor are checked.  Returns the worst
    ``|a - n| / max(|a|, |n|)`` over coordinates with a gradient above 1e-6.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out = fn()
    weight = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (fn() * weight).sum()

    for t in tensors:
        t.grad = None
    scalar().backward()
    analytic = [t.grad.detach().clone() for t in tensors]
    worst = 0.0
    rng = np.random.default_rng(seed)
    for t, grad in zip(tensors, analytic):
        flat = t.data.view(-1)
        n = flat.numel()
        picks = range(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        for i in picks:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = scalar().item()
                flat[i] = old - eps
                down = scalar().item()
                flat[i] = old
            num = (up - down) / (2 * eps)
            a = grad.view(-1)[i].item()
            err, scale = abs(a - num), max(abs(a), abs(num))
            if scale > 1e-6:
                worst = max(worst, err / scale)
            if err > atol + rtol * scale:
                raise AssertionError(f"gradient mismatch at entry {i}: analytic {a:.8g}, numeric {num:.8g}")
    return worst
