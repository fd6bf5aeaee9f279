"""Finite-difference audit of the analytic (autograd) gradients.

Each registered fragment builds a random float64 instance and returns a scalar
loss together with the tensors to differentiate. Probes whose forward pass
sits near a ReLU/clip kink or a vanishing normalization norm are resampled:
central differences straddling a kink measure the wrong slope, and close to
one the truncation error of a 1e-3 step swamps the comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch

from . import boundaries
from .cma import AttentionFactors, attend
from .errors import ConfigError
from .pipeline import MatchingHead, PipelineConfig
from .rar import AggregationRegulator, init_guidance, similarity_head, step_guidance
from .rcr import AlignmentEncoder, CorrespondenceRegulator, regulate


@dataclass
class ProbeSpec:
    d: int = 6
    m: int = 4
    K: int = 3
    L: int = 3
    probes: int = 50
    step: float = 1e-3
    tol: float = 1e-4
    seed: int = 0
    e_hidden: int = 8
    lam_hidden: int = 4
    margin: float = 0.02  # ReLU / clip arguments
    norm_margin: float = 0.1  # inputs of x / |x| normalizations
    retries: int = 50
    corrupt: str | None = None  # parameter whose analytic gradient is scaled by 1.1 (fault injection)


@dataclass
class GradCheckReport:
    fragment: str
    max_rel_error: float
    worst_parameter: str
    per_parameter: dict[str, float]
    probes: int
    resampled: int
    flagged: int
    tol: float
    errors: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.flagged == 0 and self.max_rel_error <= self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.fragment}: max rel err {self.max_rel_error:.3e} "
            f"(worst: {self.worst_parameter}) over {self.probes} probes, "
            f"{self.resampled} resampled, {self.flagged} flagged, tol {self.tol:g}"
        )


Fragment = Callable[[ProbeSpec, torch.Generator], tuple[Callable[[], torch.Tensor], dict[str, torch.Tensor]]]
FRAGMENTS: dict[str, Fragment] = {}


def register(name: str):
    def deco(fn):
        FRAGMENTS[name] = fn
        return fn

    return deco


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def _reinit(module: torch.nn.Module, g: torch.Generator, scale: float | None = None):
    """Redraw parameters: fan-in uniform like ``nn.Linear`` by default, else ``scale * N(0, 1)``."""
    module.double()
    with torch.no_grad():
        for p in module.parameters():
            if scale is not None:
                p.copy_(scale * _randn(g, *p.shape))
            else:
                bound = 1 / math.sqrt(p.shape[-1]) if p.ndim > 1 else 1 / math.sqrt(p.numel())
                p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)
    return module


def _leaf(t):
    return t.clone().requires_grad_(True)


@register("linear_head")
def _linear_head(spec, g):
    W_s = _leaf(_randn(g, spec.m))
    a = _leaf(_randn(g, spec.m))
    return (lambda: W_s @ a), {"W_s": W_s, "a_g": a}


@register("attend")
def _attend(spec, g):
    q = _leaf(_randn(g, spec.L, spec.d))
    k = _leaf(_randn(g, spec.K, spec.d))
    e = _leaf(torch.rand(spec.L, spec.d, generator=g, dtype=torch.float64) * 2 - 1)
    lam = _leaf(1 + 9 * torch.rand(spec.L, generator=g, dtype=torch.float64))
    w = _randn(g, spec.L, spec.d)

    def loss():
        return (attend(q, k, AttentionFactors(e, lam)).attended * w).sum()

    return loss, {"queries": q, "keys": k, "e": e, "lambda": lam}


@register("rcr")
def _rcr(spec, g):
    q = _leaf(_randn(g, spec.L, spec.d))
    k = _leaf(_randn(g, spec.K, spec.d))
    align = _reinit(AlignmentEncoder(spec.d, spec.m), g)
    reg = _reinit(CorrespondenceRegulator(spec.d, spec.m, spec.e_hidden, spec.lam_hidden), g)
    w = _randn(g, spec.L, spec.d)

    def loss():
        f0 = AttentionFactors.like(q)
        v0 = attend(q, k, f0).attended
        f1 = regulate(q, v0, f0, reg, align.proj)
        return (attend(q, k, f1).attended * w).sum()

    params = {"queries": q, "keys": k}
    params.update({f"W_a.{n}": p for n, p in align.named_parameters()})
    params.update({f"rcr.{n}": p for n, p in reg.named_parameters()})
    return loss, params


@register("rar")
def _rar(spec, g):
    A = _leaf(_randn(g, spec.L, spec.m))
    rar = _reinit(AggregationRegulator(spec.m), g)

    def loss():
        state = init_guidance(A)
        for _ in range(2):
            state = step_guidance(state, A, rar)
        return similarity_head(state.a_g, rar)

    params = {"alignments": A}
    params.update({f"rar.{n}": p for n, p in rar.named_parameters()})
    return loss, params


@register("rcar")
def _rcar(spec, g):
    cfg = PipelineConfig.for_mode("rcar", 2, d=spec.d, m=spec.m, e_hidden=spec.e_hidden, lam_hidden=spec.lam_hidden)
    head = _reinit(MatchingHead(cfg), g)
    V = _leaf(_randn(g, spec.K, spec.d))
    T = _leaf(_randn(g, spec.L, spec.d))

    def loss():
        return head(V, T)

    params = {"images": V, "captions": T}
    params.update({n: p for n, p in head.named_parameters()})
    return loss, params


def _rel_error(analytic: torch.Tensor, numeric: torch.Tensor, scale: float) -> float:
    return float(torch.linalg.vector_norm(analytic - numeric)) / scale


def _finite_difference(loss, p: torch.Tensor, h: float) -> torch.Tensor:
    out = torch.zeros_like(p)
    flat, grad = p.data.view(-1), out.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss().item()
            flat[i] = orig - h
            down = loss().item()
            flat[i] = orig
            grad[i] = (up - down) / (2 * h)
    return out


def grad_check(fragment: str, spec: ProbeSpec | None = None) -> GradCheckReport:
    """Compare autograd against central differences on ``spec.probes`` random instances."""
    spec = spec or ProbeSpec()
    if fragment not in FRAGMENTS:
        raise ConfigError(f"unknown fragment {fragment!r}; choose from {sorted(FRAGMENTS)}")
    g = torch.Generator().manual_seed(spec.seed)
    per_param: dict[str, float] = {}
    errors, resampled, flagged = [], 0, 0
    for _ in range(spec.probes):
        for attempt in range(spec.retries + 1):
            loss, params = FRAGMENTS[fragment](spec, g)
            with boundaries.recording() as buf:
                value = loss()
            if boundaries.clear_of(buf, {"relu": spec.margin, "clip": spec.margin, "norm": spec.norm_margin}):
                break
            resampled += 1
        else:
            flagged += 1
            continue
        grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
        analytic, numeric = {}, {}
        for (name, p), ga in zip(params.items(), grads):
            ga = torch.zeros_like(p) if ga is None else ga
            analytic[name] = ga * 1.1 if name == spec.corrupt else ga
            numeric[name] = _finite_difference(loss, p, spec.step)
        scale = max(
            float(torch.linalg.vector_norm(torch.cat([g.reshape(-1) for g in analytic.values()]))),
            float(torch.linalg.vector_norm(torch.cat([g.reshape(-1) for g in numeric.values()]))),
            1e-12,
        )
        total = 0.0
        for name in params:
            err = _rel_error(analytic[name], numeric[name], scale)
            per_param[name] = max(per_param.get(name, 0.0), err)
            total += err * err
        errors.append(math.sqrt(total))
    if spec.corrupt is not None and spec.corrupt not in per_param:
        raise ConfigError(f"fragment {fragment!r} has no parameter {spec.corrupt!r}")
    worst_name = max(per_param, key=per_param.get) if per_param else ""
    return GradCheckReport(
        fragment, max(errors, default=float("inf")), worst_name, per_param,
        len(errors), resampled, flagged, spec.tol, errors,
    )
