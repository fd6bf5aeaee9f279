"""Scoring modes (baseline / RCR / RAR / RCAR), foreign-unit hosting and score files."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import torch
from torch import nn

from .cma import DEFAULT_LAMBDA, AttentionFactors, AttentionResult, attend, query_cosines, safe_norm
from .encoders import ImageProjector, TextEncoder
from .errors import AdapterError, ConfigError, DataError, FormatError
from .rar import AggregationRegulator, init_guidance, similarity_head, step_guidance
from .rcr import AlignmentEncoder, CorrespondenceRegulator, build_alignment

MODES = ("baseline", "rcr", "rar", "rcar")
DIRECTIONS = ("t2i", "i2t")
HEADS = ("cosine", "sigmoid")

# (queries [..., Q, d], keys [..., K, d], factors, key_mask=..., query_mask=...) -> attended [..., Q, d]
InteractionAdapter = Callable[..., "torch.Tensor | AttentionResult"]


@dataclass
class PipelineConfig:
    mode: str = "rcar"
    direction: str = "t2i"
    n_rar: int = 2
    n_rcr: int = 1
    lambda0: float = DEFAULT_LAMBDA
    residual_rcr: bool = True
    residual_rar: bool = False
    d: int = 1024
    m: int = 256
    e_hidden: int = 512
    lam_hidden: int = 128
    factor_mode: str = "alignment"
    per_step_rcr: bool = False
    share_alignment: bool = True
    rcr_every_step: bool = False
    head: str | None = None
    l2norm_features: bool = True
    alignment_bias: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.n_rar < 0 or self.n_rcr < 0:
            raise ConfigError("step counts must be >= 0")
        if self.lambda0 < 0:
            raise ConfigError("lambda0 must be >= 0")
        if self.d < 1 or self.m < 1:
            raise ConfigError("d and m must be >= 1")
        if self.mode == "rcar" and self.rcr_every_step:
            self.n_rcr = self.n_rar
        if self.mode == "baseline" and (self.n_rar or self.n_rcr):
            raise ConfigError("baseline mode runs no regulator steps")
        if self.mode == "rcr" and self.n_rar:
            raise ConfigError("rcr mode runs no RAR steps")
        if self.mode == "rar" and self.n_rcr:
            raise ConfigError("rar mode runs no RCR steps")
        if self.head is None:
            self.head = "sigmoid" if self.mode in ("rar", "rcar") else "cosine"
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head == "cosine" and self.n_rar:
            raise ConfigError("RAR steps need the sigmoid head")
        if self.mode == "rar" and self.head != "sigmoid":
            raise ConfigError("rar mode scores with the sigmoid head")

    @classmethod
    def for_mode(cls, mode: str, steps: int = 2, **kw) -> "PipelineConfig":
        """Default step schedule: RCAR(N) = N RAR steps + N-1 RCR steps."""
        counts = {
            "baseline": dict(n_rar=0, n_rcr=0),
            "rcr": dict(n_rar=0, n_rcr=steps),
            "rar": dict(n_rar=steps, n_rcr=0),
            "rcar": dict(n_rar=steps, n_rcr=max(steps - 1, 0)),
        }
        if mode not in counts:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        return cls(mode=mode, **{**counts[mode], **kw})

    @property
    def num_iterations(self) -> int:
        return max(self.n_rar, self.n_rcr)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


@dataclass
class ScoreTrace:
    """Per-step internals kept for diagnostics."""

    cosines: list[torch.Tensor] = field(default_factory=list)  # [..., Q] per attention pass
    betas: list[torch.Tensor] = field(default_factory=list)  # [..., Q] per guidance state (init first)
    lambdas: list[torch.Tensor] = field(default_factory=list)
    query_mask: torch.Tensor | None = None


class MatchingHead(nn.Module):
    """Everything between encoded features and the pair score.

    ``interaction`` replaces the built-in attention unit when given; it must
    consume the supplied factors and return attended features.
    """

    def __init__(self, config: PipelineConfig, interaction: InteractionAdapter | None = None):
        super().__init__()
        self.config = config
        self.interaction = interaction
        c = config
        self.align = AlignmentEncoder(c.d, c.m, c.alignment_bias)
        self.align_rar = None if c.share_alignment else AlignmentEncoder(c.d, c.m, c.alignment_bias)
        needs_rcr = c.n_rcr > 0 or c.factor_mode == "learnable"
        self.rcr = (
            CorrespondenceRegulator(
                c.d, c.m, c.e_hidden, c.lam_hidden, c.residual_rcr, c.factor_mode,
                per_step_params=c.per_step_rcr, max_steps=max(c.n_rcr, 1), lambda0=c.lambda0,
            )
            if needs_rcr
            else None
        )
        self.rar = AggregationRegulator(c.m, c.residual_rar) if c.head == "sigmoid" else None

    def _interact(self, q, k, factors, key_mask, query_mask, step):
        if self.interaction is None:
            return attend(q, k, factors, key_mask, query_mask).attended
        out = self.interaction(q, k, factors, key_mask=key_mask, query_mask=query_mask)
        if isinstance(out, AttentionResult):
            out = out.attended
        if out.shape != q.shape or not torch.isfinite(out).all():
            raise AdapterError(f"interaction unit returned invalid features at step {step}")
        return out

    def _rar_alignments(self, q, attended, shared):
        if self.align_rar is None:
            return shared if shared is not None else self.align(q, attended)
        return self.align_rar(q, attended)

    def forward(self, images, captions, image_mask=None, caption_mask=None, trace: ScoreTrace | None = None):
        """Score broadcastable batches ``images [..., K, d]`` against ``captions [..., L, d]``."""
        c = self.config
        if c.direction == "t2i":
            q, k, qm, km = captions, images, caption_mask, image_mask
        else:
            q, k, qm, km = images, captions, image_mask, caption_mask
        if qm is not None:
            qm = qm.expand(q.shape[:-1])
        if km is not None:
            km = km.expand(k.shape[:-1])

        factors = self.rcr.initial_factors(q) if self.rcr is not None else AttentionFactors.like(q, c.lambda0)
        attended = self._interact(q, k, factors, km, qm, 0)
        if trace is not None:
            trace.query_mask = qm
            trace.cosines.append(query_cosines(q, attended).detach())
            trace.lambdas.append(factors.lam.detach())

        uses_alignment_mlp = self.rcr is not None and self.rcr.factor_mode == "alignment"
        a = self.align(q, attended) if (self.rar is not None or uses_alignment_mlp) else None
        A = self._rar_alignments(q, attended, a) if self.rar is not None else None
        state = init_guidance(A, qm) if self.rar is not None else None
        if trace is not None and state is not None:
            trace.betas.append(state.beta.detach())

        for n in range(1, c.num_iterations + 1):
            if n <= c.n_rcr:
                feats = q if self.rcr.factor_mode == "query" else a
                factors = self.rcr.regulate(feats, factors, step=n - 1)
                attended = self._interact(q, k, factors, km, qm, n)
                if uses_alignment_mlp or self.rar is not None:
                    a = self.align(q, attended)
                if self.rar is not None:
                    A = self._rar_alignments(q, attended, a)
                if trace is not None:
                    trace.cosines.append(query_cosines(q, attended).detach())
                    trace.lambdas.append(factors.lam.detach())
            if n <= c.n_rar:
                state = step_guidance(state, A, self.rar, qm)
                if trace is not None:
                    trace.betas.append(state.beta.detach())

        if self.rar is not None:
            return similarity_head(state.a_g, self.rar)
        return mean_cosine(q, attended, qm)


def mean_cosine(queries, attended, query_mask=None) -> torch.Tensor:
    """Average of per-query cosines over valid queries."""
    cos = query_cosines(queries, attended)
    if query_mask is None:
        return cos.mean(-1)
    w = query_mask.to(cos.dtype)
    return (cos * w).sum(-1) / w.sum(-1)


def score_baseline(V, T, direction: str = "t2i", lambda0: float = DEFAULT_LAMBDA, image_mask=None, caption_mask=None):
    """Mean cosine between each query and its attended feature under fixed factors."""
    if direction == "t2i":
        q, k, qm, km = T, V, caption_mask, image_mask
    elif direction == "i2t":
        q, k, qm, km = V, T, image_mask, caption_mask
    else:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    res = attend(q, k, None, km, qm, lambda0)
    return mean_cosine(q, res.attended, qm)


def score_rcar(V, T, config: PipelineConfig, params: MatchingHead, image_mask=None, caption_mask=None, trace=None):
    if config.mode != "rcar":
        raise ConfigError(f"score_rcar needs mode='rcar', got {config.mode!r}")
    return params(V, T, image_mask, caption_mask, trace)


def host_foreign_unit(adapter: InteractionAdapter, config: PipelineConfig, params: MatchingHead | None = None) -> MatchingHead:
    """A scorer in which ``adapter`` replaces the built-in attention unit.

    When ``params`` is given its weights are reused.
    """
    head = MatchingHead(config, interaction=adapter)
    if params is not None:
        head.load_state_dict(params.state_dict())
    return head


class MatchingModel(nn.Module):
    """Region projector + text encoder + matching head."""

    def __init__(self, config: PipelineConfig, raw_dim: int, vocab_size: int, embed_dim: int = 300):
        super().__init__()
        self.config = config
        self.raw_dim, self.vocab_size, self.embed_dim = raw_dim, vocab_size, embed_dim
        self.image_encoder = ImageProjector(raw_dim, config.d)
        self.text_encoder = TextEncoder(vocab_size, config.d, embed_dim)
        self.head = MatchingHead(config)

    def snapshot(self) -> dict:
        return {**self.config.to_dict(), "raw_dim": self.raw_dim, "vocab_size": self.vocab_size, "embed_dim": self.embed_dim}

    @classmethod
    def from_snapshot(cls, snap: dict) -> "MatchingModel":
        return cls(PipelineConfig.from_dict(snap), int(snap["raw_dim"]), int(snap["vocab_size"]), int(snap["embed_dim"]))

    def encode(self, regions: torch.Tensor, tokens: torch.Tensor, lengths: torch.Tensor):
        V = self.image_encoder(regions)
        T, mask = self.text_encoder(tokens, lengths)
        if self.config.l2norm_features:
            V = V / safe_norm(V, keepdim=True)
            T = T / safe_norm(T, keepdim=True) * mask[..., None].to(T.dtype)
        return V, T, mask

    def similarity_matrix(self, V, T, caption_mask, chunk: int = 64, trace=None) -> torch.Tensor:
        """Scores of every image against every caption, ``[n_images, n_captions]``."""
        rows = []
        for i in range(0, V.shape[0], chunk):
            rows.append(self.head(V[i : i + chunk, None], T[None], None, caption_mask[None], trace))
        return torch.cat(rows, 0)

    def host_similarity_matrix(self, V, T, caption_mask, chunk: int = 64) -> torch.Tensor:
        """Scores from the plain attention unit with fixed factors, ignoring the regulators."""
        c = self.config
        rows = []
        for i in range(0, V.shape[0], chunk):
            rows.append(score_baseline(V[i : i + chunk, None], T[None], c.direction, c.lambda0, caption_mask=caption_mask[None]))
        return torch.cat(rows, 0)

    def forward(self, regions, tokens, lengths, host_only: bool = False):
        V, T, mask = self.encode(regions, tokens, lengths)
        if host_only:
            return self.host_similarity_matrix(V, T, mask)
        return self.similarity_matrix(V, T, mask)


# -- similarity records ---------------------------------------------------------


@dataclass(frozen=True)
class SimilarityRecord:
    image_id: str
    caption_id: str
    direction: str
    mode: str
    score: float


SCORE_COLUMNS = ("image_id", "caption_id", "direction", "mode", "score")


def format_score(x: float) -> str:
    return f"{x:.9g}"


def matrix_to_records(sims, image_ids: Sequence[str], caption_ids: Sequence[str], direction: str, mode: str) -> list[SimilarityRecord]:
    sims = sims.detach().cpu().double().numpy() if isinstance(sims, torch.Tensor) else sims
    return [
        SimilarityRecord(image_ids[i], caption_ids[j], direction, mode, float(sims[i, j]))
        for i in range(len(image_ids))
        for j in range(len(caption_ids))
    ]


def write_scores(path: str | os.PathLike, records: Iterable[SimilarityRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(SCORE_COLUMNS) + "\n")
        for r in records:
            fh.write(f"{r.image_id}\t{r.caption_id}\t{r.direction}\t{r.mode}\t{format_score(r.score)}\n")


def read_scores(path: str | os.PathLike) -> list[SimilarityRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != SCORE_COLUMNS:
            raise FormatError(f"{path}: expected header {SCORE_COLUMNS}")
        out = []
        for lineno, row in enumerate(reader, 2):
            if len(row) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 columns")
            try:
                score = float(row[4])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad score {row[4]!r}") from None
            out.append(SimilarityRecord(row[0], row[1], row[2], row[3], score))
    return out


def ensemble(scores_a: Sequence[SimilarityRecord], scores_b: Sequence[SimilarityRecord]) -> list[SimilarityRecord]:
    """Per-pair arithmetic mean of two score sets over identical pair ids."""
    b_by_pair = {}
    for r in scores_b:
        b_by_pair[(r.image_id, r.caption_id)] = r
    if len(b_by_pair) != len(scores_b):
        raise DataError("duplicate pair ids in second score set")
    keys_a = [(r.image_id, r.caption_id) for r in scores_a]
    if len(set(keys_a)) != len(keys_a):
        raise DataError("duplicate pair ids in first score set")
    if set(keys_a) != set(b_by_pair):
        raise DataError("score sets cover different image-caption pairs")
    out = []
    for r in scores_a:
        other = b_by_pair[(r.image_id, r.caption_id)]
        mode = r.mode if r.mode == other.mode else f"{r.mode}+{other.mode}"
        score = (r.score + other.score) / 2
        if not math.isfinite(score):
            raise DataError(f"non-finite ensemble score for pair {(r.image_id, r.caption_id)}")
        out.append(SimilarityRecord(r.image_id, r.caption_id, "ensemble", mode, score))
    return out


def records_to_matrix(records: Sequence[SimilarityRecord], image_ids: Sequence[str], caption_ids: Sequence[str]):
    import numpy as np

    ii = {x: i for i, x in enumerate(image_ids)}
    cc = {x: j for j, x in enumerate(caption_ids)}
    out = np.full((len(image_ids), len(caption_ids)), np.nan)
    for r in records:
        if r.image_id in ii and r.caption_id in cc:
            out[ii[r.image_id], cc[r.caption_id]] = r.score
    if np.isnan(out).any():
        raise DataError("score records do not cover every image-caption pair of the manifest")
    return out
