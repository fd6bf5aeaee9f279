"""Region projector and bidirectional GRU word encoder."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .datamodel import PAD, RegionSet, SentenceSet
from .errors import ConfigError, DataError


class ImageProjector(nn.Module):
    """Linear map from raw region features (``d_raw``) to the joint width ``d``."""

    def __init__(self, raw_dim: int = 2048, d: int = 1024):
        super().__init__()
        self.fc = nn.Linear(raw_dim, d)

    @property
    def raw_dim(self) -> int:
        return self.fc.in_features

    def forward(self, regions: torch.Tensor) -> torch.Tensor:
        if regions.shape[-1] != self.raw_dim:
            raise ConfigError(f"region width {regions.shape[-1]} != projector input {self.raw_dim}")
        return self.fc(regions)


class TextEncoder(nn.Module):
    """Word embedding followed by a BiGRU; word features average both directions."""

    def __init__(self, vocab_size: int, d: int = 1024, embed_dim: int = 300):
        super().__init__()
        self.vocab_size = vocab_size
        self.d = d
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD)
        self.gru = nn.GRU(embed_dim, d, batch_first=True, bidirectional=True)

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor, return_states: bool = False):
        """Encode a padded batch.

        Returns ``(features [B, L, d], mask [B, L])``, and with ``return_states``
        also the forward and backward hidden states.
        """
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise DataError(f"token id outside vocabulary of size {self.vocab_size}")
        lengths = torch.as_tensor(lengths, dtype=torch.int64).cpu()
        if (lengths < 1).any():
            raise DataError("every sequence needs at least one token")
        max_len = tokens.shape[1]
        packed = pack_padded_sequence(self.embed(tokens), lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=max_len)
        fwd, bwd = out[..., : self.d], out[..., self.d :]
        feats = (fwd + bwd) / 2
        mask = torch.arange(max_len)[None, :] < lengths[:, None]
        if return_states:
            return feats, mask, fwd, bwd
        return feats, mask


def stack_regions(regions: Sequence[RegionSet], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([r.features for r in regions])).to(dtype)


def collate_captions(sentences: Sequence[SentenceSet]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([s.length for s in sentences], dtype=torch.int64)
    tokens = torch.full((len(sentences), int(lengths.max())), PAD, dtype=torch.int64)
    for b, s in enumerate(sentences):
        tokens[b, : s.length] = torch.tensor(s.token_ids)
    return tokens, lengths


def encode_image(r: RegionSet, p: ImageProjector) -> torch.Tensor:
    """Project one image's regions to ``K x d``."""
    if r.raw_dim != p.raw_dim:
        raise ConfigError(f"image {r.image_id}: d_raw={r.raw_dim} but projector expects {p.raw_dim}")
    weight = p.fc.weight
    return p(torch.from_numpy(np.array(r.features)).to(weight.dtype))


def encode_text(s: SentenceSet, enc: TextEncoder) -> torch.Tensor:
    """Encode one caption to ``L x d``."""
    tokens, lengths = collate_captions([s])
    feats, _ = enc(tokens, lengths)
    return feats[0]
