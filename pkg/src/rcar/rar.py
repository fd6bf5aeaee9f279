"""Recurrent aggregation regulator: guidance-driven re-weighting of alignment vectors."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import DomainError


@dataclass
class GuidanceState:
    a_g: torch.Tensor  # [..., m]
    beta: torch.Tensor  # [..., L], nonnegative, sums to one over valid rows
    step: int = 0


class AggregationRegulator(nn.Module):
    """Holds ``W_g``, ``W_l`` (``m x m``), ``W_beta`` and the score head ``W_s`` (``m``)."""

    def __init__(self, m: int = 256, residual: bool = False):
        super().__init__()
        self.m = m
        self.residual = residual
        self.W_g = nn.Linear(m, m, bias=False)
        self.W_l = nn.Linear(m, m, bias=False)
        self.W_beta = nn.Linear(m, 1, bias=False)
        self.W_s = nn.Linear(m, 1, bias=False)

    def init_guidance(self, alignments, mask=None) -> GuidanceState:
        return init_guidance(alignments, mask)

    def step(self, state: GuidanceState, alignments, mask=None) -> GuidanceState:
        return step_guidance(state, alignments, self, mask)

    def head(self, a_g: torch.Tensor) -> torch.Tensor:
        return similarity_head(a_g, self)


def _pool(beta: torch.Tensor, alignments: torch.Tensor) -> torch.Tensor:
    # Shared by init and step so uniform weights reproduce the mean bit for bit.
    return (beta[..., None] * alignments).sum(-2)


def init_guidance(alignments: torch.Tensor, mask: torch.Tensor | None = None) -> GuidanceState:
    """Average pooling of the (valid) alignment rows."""
    if alignments.shape[-2] == 0:
        raise DomainError("guidance over an empty alignment set")
    if mask is None:
        mask = torch.ones(alignments.shape[:-1], dtype=torch.bool, device=alignments.device)
    counts = mask.sum(-1, keepdim=True)
    if (counts == 0).any():
        raise DomainError("guidance over an all-masked alignment set")
    beta = mask.to(alignments.dtype) / counts.to(alignments.dtype)
    return GuidanceState(_pool(beta, alignments), beta, 0)


def step_guidance(
    state: GuidanceState,
    alignments: torch.Tensor,
    params: AggregationRegulator,
    mask: torch.Tensor | None = None,
) -> GuidanceState:
    """``u_j = tanh(W_g a_g) * tanh(W_l a_j)``, ``beta = softmax(W_beta u)``, ``a_g' = sum beta_j a_j``."""
    gate = torch.tanh(params.W_g(state.a_g))[..., None, :]
    u = gate * torch.tanh(params.W_l(alignments))
    logits = params.W_beta(u).squeeze(-1)
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    beta = torch.softmax(logits, dim=-1)
    a_g = _pool(beta, alignments)
    if params.residual:
        a_g = (state.a_g + a_g) / 2
    return GuidanceState(a_g, beta, state.step + 1)


def similarity_head(a_g: torch.Tensor, params: AggregationRegulator) -> torch.Tensor:
    return torch.sigmoid(params.W_s(a_g).squeeze(-1))
