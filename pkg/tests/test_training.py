import torch
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcar import checkpoint as ckpt_io
from rcar.datamodel import SyntheticSpec, synthetic_dataset
from rcar.errors import ConfigError, ShapeError
from rcar.pipeline import MatchingModel, PipelineConfig
from rcar.training import LossConfig, TrainConfig, TrainSchedule, hinge_loss, model_from_checkpoint, score_dataset, train

SMALL = dict(d=16, m=8, e_hidden=8, lam_hidden=4)


def loop_loss(S, margin):
    n = len(S)
    total = 0.0
    for i in range(n):
        total += max([max(0.0, margin - S[i][i] + S[i][j]) for j in range(n) if j != i], default=0.0)
        total += max([max(0.0, margin - S[i][i] + S[j][i]) for j in range(n) if j != i], default=0.0)
    return total


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.lists(st.lists(st.floats(-1, 1), min_size=n, max_size=n), min_size=n, max_size=n)))
def test_hinge_matches_loops(S):
    got = hinge_loss(torch.tensor(S, dtype=torch.float64), 0.2).item()
    assert got == pytest.approx(loop_loss(S, 0.2), abs=1e-12)


def test_hinge_rejects_non_square():
    with pytest.raises(ShapeError):
        hinge_loss(torch.zeros(2, 3))


def test_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(margin=0)
    with pytest.raises(ConfigError):
        TrainSchedule(((1e-4, 2), (1e-3, 2)))
    assert TrainSchedule(((1e-3, 2), (1e-4, 1))).lr_at(2) == 1e-4


def _cfg(epochs, seed=0):
    return TrainConfig(PipelineConfig.for_mode("rcar", 2, **SMALL), LossConfig(0.2, 16), TrainSchedule(((1e-3, epochs),)), embed_dim=8, seed=seed)


@pytest.fixture(scope="module")
def data():
    return synthetic_dataset(SyntheticSpec(num_pairs=64, K=6, L=6, d=32, seed=0))


def test_same_seed_same_weights(data):
    a = train(_cfg(1), data)
    b = train(_cfg(1), data)
    assert a.checkpoint.equals(b.checkpoint)
    assert not a.checkpoint.equals(train(_cfg(1, seed=1), data).checkpoint)


def test_zero_epochs_is_initialisation(data):
    res = train(_cfg(0), data)
    torch.manual_seed(0)
    init = MatchingModel(_cfg(0).pipeline, data.regions[0].raw_dim, data.vocab_size, 8)
    assert res.checkpoint.equals(ckpt_io.from_module(init))


def test_loss_decreases(data):
    hist = train(_cfg(5), data).history
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_run_dir_outputs(tmp_path, data):
    res = train(_cfg(2), data, valid=data.subset(range(16)), run_dir=tmp_path)
    for name in ("epoch_000.npz", "epoch_001.npz", "final.npz", "best.npz", "train.log"):
        assert (tmp_path / name).exists()
    back = model_from_checkpoint(ckpt_io.load(tmp_path / "final.npz"))
    res.model.eval()
    torch.testing.assert_close(torch.from_numpy(score_dataset(back, data)), torch.from_numpy(score_dataset(res.model, data)))
