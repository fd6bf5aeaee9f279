import numpy as np
import pytest
import torch

from rcar.datamodel import END, START, RegionSet, SentenceSet
from rcar.encoders import ImageProjector, TextEncoder, collate_captions, encode_image, encode_text, stack_regions
from rcar.errors import ConfigError, DataError


def test_projector_shapes_and_width_check():
    p = ImageProjector(5, 7)
    r = RegionSet(np.ones((3, 5)), "a")
    assert encode_image(r, p).shape == (3, 7)
    with pytest.raises(ConfigError):
        encode_image(RegionSet(np.ones((3, 4)), "b"), p)


def test_text_encoder_padding_does_not_leak():
    torch.manual_seed(0)
    enc = TextEncoder(12, 6, 5)
    short = SentenceSet((START, 5, END), "a", "i")
    long = SentenceSet((START, 6, 7, 8, 9, END), "b", "i")
    tokens, lengths = collate_captions([short, long])
    feats, mask = enc(tokens, lengths)
    assert feats.shape == (2, 6, 6)
    assert mask.tolist()[0] == [True] * 3 + [False] * 3
    alone = encode_text(short, enc)
    torch.testing.assert_close(feats[0, :3], alone, rtol=0, atol=1e-6)


def test_text_encoder_average_of_directions():
    torch.manual_seed(1)
    enc = TextEncoder(10, 4, 3)
    tokens, lengths = collate_captions([SentenceSet((START, 4, 5, END), "a", "i")])
    feats, _, fwd, bwd = enc(tokens, lengths, return_states=True)
    torch.testing.assert_close(feats, (fwd + bwd) / 2)


def test_text_encoder_rejects_out_of_vocab():
    enc = TextEncoder(5, 4, 3)
    with pytest.raises(DataError):
        enc(torch.tensor([[1, 9, 2]]), torch.tensor([3]))


def test_stack_regions():
    rs = [RegionSet(np.full((2, 3), i + 1.0), str(i)) for i in range(3)]
    assert stack_regions(rs).shape == (3, 2, 3)
