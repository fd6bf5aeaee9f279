"""Recurrent correspondence regulator.

Alignment vectors ``a = W_a (q - v)^2 / |W_a (q - v)^2|`` feed two small MLPs
that propose residual updates to each query's channel weights and temperature.
"""

from __future__ import annotations

import torch
from torch import nn

from . import boundaries
from .cma import DEFAULT_LAMBDA, AttentionFactors, AttentionResult, attend
from .errors import ConfigError

FACTOR_MODES = ("alignment", "query", "learnable", "fixed")


def hard_clip(x: torch.Tensor, lo: float = -1.0, hi: float = 1.0) -> torch.Tensor:
    """Clamp to ``[lo, hi]``; the gradient is 1 strictly inside and 0 on or beyond the bounds."""
    boundaries.record("clip", x - lo)
    boundaries.record("clip", hi - x)
    inside = (x > lo) & (x < hi)
    return torch.where(inside, x, x.detach().clamp(lo, hi))


def build_alignment(query: torch.Tensor, attended: torch.Tensor, W_a) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit-norm alignment vectors and a degeneracy flag.

    ``W_a`` is an ``[m, d]`` tensor or a bias-free ``nn.Linear``. Where the
    projected squared difference is exactly zero the output is the zero vector
    and the flag is set.
    """
    diff = query - attended
    sq = diff * diff
    z = W_a(sq) if isinstance(W_a, nn.Module) else sq @ W_a.transpose(-1, -2)
    energy = (z * z).sum(-1, keepdim=True)
    degenerate = energy == 0
    boundaries.record("norm", torch.sqrt(energy))
    a = z / torch.sqrt(torch.where(degenerate, torch.ones_like(energy), energy))
    return a, degenerate.squeeze(-1)


class AlignmentEncoder(nn.Module):
    """The ``W_a`` projection ``d -> m``.

    With ``bias`` the projection is affine, which keeps a fixed reference
    direction in the normalized output so that small and large mismatches with
    the same channel pattern stay distinguishable.
    """

    def __init__(self, d: int, m: int = 256, bias: bool = False):
        super().__init__()
        self.proj = nn.Linear(d, m, bias=bias)

    def forward(self, query: torch.Tensor, attended: torch.Tensor) -> torch.Tensor:
        return build_alignment(query, attended, self.proj)[0]


class _FactorMLPs(nn.Module):
    def __init__(self, in_dim: int, d: int, e_hidden: int, lam_hidden: int):
        super().__init__()
        self.mlp_e = nn.Sequential(nn.Linear(in_dim, e_hidden), nn.Tanh(), nn.Linear(e_hidden, d), nn.Tanh())
        self.mlp_lam = nn.Sequential(nn.Linear(in_dim, lam_hidden), nn.Tanh(), nn.Linear(lam_hidden, 1))


class CorrespondenceRegulator(nn.Module):
    """Learns per-query attention factors from alignment feedback.

    ``factor_mode`` selects the ablation variant: ``alignment`` (MLPs read the
    alignment vector), ``query`` (MLPs read the query feature), ``learnable``
    (one global trainable ``e``/``lambda`` pair, no per-query update) and
    ``fixed`` (factors never change).
    """

    def __init__(
        self,
        d: int,
        m: int = 256,
        e_hidden: int = 512,
        lam_hidden: int = 128,
        residual: bool = True,
        factor_mode: str = "alignment",
        per_step_params: bool = False,
        max_steps: int = 4,
        lambda0: float = DEFAULT_LAMBDA,
    ):
        super().__init__()
        if factor_mode not in FACTOR_MODES:
            raise ConfigError(f"factor_mode must be one of {FACTOR_MODES}, got {factor_mode!r}")
        self.d, self.m = d, m
        self.residual = residual
        self.factor_mode = factor_mode
        self.lambda0 = float(lambda0)
        self.per_step_params = per_step_params
        in_dim = d if factor_mode == "query" else m
        n_blocks = max_steps if per_step_params else 1
        if factor_mode in ("alignment", "query"):
            self.blocks = nn.ModuleList(_FactorMLPs(in_dim, d, e_hidden, lam_hidden) for _ in range(n_blocks))
        else:
            self.blocks = nn.ModuleList()
        if factor_mode == "learnable":
            self.e0 = nn.Parameter(torch.ones(d))
            self.lam0 = nn.Parameter(torch.tensor(self.lambda0))

    def zero_(self) -> "CorrespondenceRegulator":
        """Zero every MLP weight so each step returns its input factors unchanged."""
        with torch.no_grad():
            for p in self.blocks.parameters():
                p.zero_()
        return self

    def initial_factors(self, queries: torch.Tensor) -> AttentionFactors:
        f = AttentionFactors.like(queries, self.lambda0)
        if self.factor_mode == "learnable":
            e = hard_clip(self.e0).expand_as(f.e)
            lam = torch.relu(self.lam0).expand_as(f.lam)
            f = AttentionFactors(e, lam)
        return f

    def _block(self, step: int) -> _FactorMLPs:
        if self.per_step_params:
            if step >= len(self.blocks):
                raise ConfigError(f"regulation step {step} beyond the {len(self.blocks)} per-step parameter sets")
            return self.blocks[step]
        return self.blocks[0]

    def regulate(self, features: torch.Tensor, prev: AttentionFactors, step: int = 0) -> AttentionFactors:
        """One factor update from alignment vectors (or query features in ``query`` mode)."""
        if self.factor_mode in ("fixed", "learnable"):
            return prev
        block = self._block(step)
        de = block.mlp_e(features)
        dlam = block.mlp_lam(features).squeeze(-1)
        if self.residual:
            de = de + prev.e
            dlam = dlam + prev.lam
        boundaries.record("relu", dlam)
        return AttentionFactors(hard_clip(de), torch.relu(dlam))


def regulate(
    query: torch.Tensor,
    attended: torch.Tensor,
    prev: AttentionFactors,
    regulator: CorrespondenceRegulator,
    W_a,
    step: int = 0,
) -> AttentionFactors:
    """Alignment construction followed by one regulator update."""
    if regulator.factor_mode == "query":
        return regulator.regulate(query, prev, step)
    a, _ = build_alignment(query, attended, W_a)
    return regulator.regulate(a, prev, step)


def refine_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    prev_factors: AttentionFactors,
    regulator: CorrespondenceRegulator,
    W_a,
    prev_attended: torch.Tensor | None = None,
    key_mask: torch.Tensor | None = None,
    query_mask: torch.Tensor | None = None,
    step: int = 0,
) -> tuple[AttentionResult, AttentionFactors]:
    """Regulate the factors from the previous attended features, then attend again."""
    if prev_attended is None:
        prev_attended = attend(queries, keys, prev_factors, key_mask, query_mask).attended
    factors = regulate(queries, prev_attended, prev_factors, regulator, W_a, step)
    return attend(queries, keys, factors, key_mask, query_mask), factors
