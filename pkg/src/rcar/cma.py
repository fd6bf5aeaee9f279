"""Cross-modal attention with per-query channel weights and softmax temperatures.

Shapes follow one convention in both directions: ``queries`` is ``[..., Q, d]``
(words for T2I, regions for I2T), ``keys`` is ``[..., K, d]``, and similarity /
weight matrices are laid out ``[..., K, Q]``. The clamped similarities are
L2-normalized along the query axis and the softmax runs along the key axis.
Leading batch dimensions broadcast, so all image-caption pairs of a batch can
be scored with ``keys[:, None]`` against ``queries[None, :]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import boundaries
from .errors import DomainError, ShapeError

EPS = 1e-8
DEFAULT_LAMBDA = 10.0


def safe_norm(x: torch.Tensor, dim: int = -1, keepdim: bool = False, eps: float = EPS) -> torch.Tensor:
    """L2 norm floored at ``eps`` with a zero (not NaN) gradient below the floor."""
    return torch.sqrt(torch.clamp_min((x * x).sum(dim=dim, keepdim=keepdim), eps * eps))


@dataclass
class AttentionFactors:
    """Per-query channel weights ``e`` (``[..., Q, d]``) and temperatures ``lam`` (``[..., Q]``)."""

    e: torch.Tensor
    lam: torch.Tensor

    @classmethod
    def initial(cls, n_queries: int, d: int, lambda0: float = DEFAULT_LAMBDA, batch_shape=(), dtype=None, device=None):
        e = torch.ones(*batch_shape, n_queries, d, dtype=dtype, device=device)
        lam = torch.full((*batch_shape, n_queries), float(lambda0), dtype=dtype, device=device)
        return cls(e, lam)

    @classmethod
    def like(cls, queries: torch.Tensor, lambda0: float = DEFAULT_LAMBDA):
        *batch, Q, d = queries.shape
        return cls.initial(Q, d, lambda0, tuple(batch), queries.dtype, queries.device)

    def check(self) -> None:
        if self.e.shape[:-1] != self.lam.shape:
            raise ShapeError(f"factor shapes disagree: e {tuple(self.e.shape)} vs lambda {tuple(self.lam.shape)}")
        if (self.e.abs() > 1).any():
            raise DomainError("channel weights outside [-1, 1]")
        if (self.lam < 0).any():
            raise DomainError("negative softmax temperature")


@dataclass
class AttentionResult:
    attended: torch.Tensor  # [..., Q, d]
    weights: torch.Tensor  # [..., K, Q], columns sum to one
    raw_sims: torch.Tensor  # [..., K, Q]


def weighted_cosine(v: torch.Tensor, t: torch.Tensor, e: torch.Tensor | None = None) -> torch.Tensor:
    """``v . (e * t) / (|v| |t|)``; plain cosine when ``e`` is all ones."""
    v_norm = torch.linalg.vector_norm(v)
    t_norm = torch.linalg.vector_norm(t)
    if v_norm == 0 or t_norm == 0:
        raise DomainError("weighted cosine of a zero-norm vector")
    te = t if e is None else e * t
    return (v * te).sum() / (v_norm * t_norm)


def attend(
    queries: torch.Tensor,
    keys: torch.Tensor,
    factors: AttentionFactors | None = None,
    key_mask: torch.Tensor | None = None,
    query_mask: torch.Tensor | None = None,
    lambda0: float = DEFAULT_LAMBDA,
) -> AttentionResult:
    """Attend every query over the keys.

    Masked keys get zero weight; masked queries get an all-zero weight column
    and a zero attended feature.
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeError(f"feature widths differ: queries {queries.shape[-1]}, keys {keys.shape[-1]}")
    if factors is None:
        factors = AttentionFactors.like(queries, lambda0)
    if key_mask is not None and not key_mask.any(dim=-1).all():
        raise DomainError("attention over an all-masked key set")

    q_norm = safe_norm(queries)
    k_norm = safe_norm(keys)
    raw = torch.matmul(keys, (factors.e * queries).transpose(-1, -2))
    raw = raw / (k_norm[..., :, None] * q_norm[..., None, :])

    pos = torch.relu(raw)
    if query_mask is not None:
        pos = pos * query_mask[..., None, :].to(pos.dtype)
    if boundaries.enabled():
        boundaries.record("relu", raw if query_mask is None else raw.masked_select(query_mask[..., None, :].expand_as(raw)))
        row_norms = pos.norm(dim=-1)
        boundaries.record("norm", row_norms[row_norms > 0])
    cbar = pos / safe_norm(pos, dim=-1, keepdim=True)

    logits = factors.lam[..., None, :] * cbar
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[..., :, None], float("-inf"))
    weights = torch.softmax(logits, dim=-2)
    if query_mask is not None:
        weights = weights * query_mask[..., None, :].to(weights.dtype)
    attended = torch.matmul(weights.transpose(-1, -2), keys)
    return AttentionResult(attended, weights, raw)


def attend_i2t(
    regions: torch.Tensor,
    words: torch.Tensor,
    factors: AttentionFactors | None = None,
    region_mask: torch.Tensor | None = None,
    word_mask: torch.Tensor | None = None,
    lambda0: float = DEFAULT_LAMBDA,
) -> AttentionResult:
    """Regions attend words; ``raw_sims`` is ``[L, K]``, the transpose of the T2I layout."""
    return attend(regions, words, factors, key_mask=word_mask, query_mask=region_mask, lambda0=lambda0)


def attend_t2i(
    words: torch.Tensor,
    regions: torch.Tensor,
    factors: AttentionFactors | None = None,
    word_mask: torch.Tensor | None = None,
    region_mask: torch.Tensor | None = None,
    lambda0: float = DEFAULT_LAMBDA,
) -> AttentionResult:
    return attend(words, regions, factors, key_mask=region_mask, query_mask=word_mask, lambda0=lambda0)


def query_cosines(queries: torch.Tensor, attended: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine between each query and its attended feature, ``[..., Q]``."""
    return (queries * attended).sum(-1) / (safe_norm(queries) * safe_norm(attended))
