"""Opt-in recorder of distances to non-smooth points.

Differentiable code reports, per kink kind, how far each kink argument sits
from its kink: ``"relu"`` (ReLU and hinge inputs), ``"clip"`` (distance to a
clip bound) and ``"norm"`` (the norm fed to an ``x / |x|`` normalization, which
is non-differentiable at zero). The gradient auditor rejects probes closer
than a per-kind margin. Recording is off unless a ``recording()`` block is
active.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Mapping

import torch

_active: list[list[tuple[str, torch.Tensor]]] = []


def enabled() -> bool:
    return bool(_active)


def record(kind: str, distance: torch.Tensor) -> None:
    if _active:
        _active[-1].append((kind, distance.detach().reshape(-1)))


@contextmanager
def recording():
    buf: list[tuple[str, torch.Tensor]] = []
    _active.append(buf)
    try:
        yield buf
    finally:
        _active.pop()


def min_distance(buf, kind: str | None = None) -> float:
    vals = [d for k, d in buf if kind is None or k == kind]
    vals = [d for d in vals if d.numel()]
    if not vals:
        return float("inf")
    return float(torch.cat(vals).abs().min())


def clear_of(buf, margins: Mapping[str, float]) -> bool:
    """True if every recorded distance is at least its kind's margin."""
    return all(min_distance(buf, kind) >= m for kind, m in margins.items())
