"""Named-tensor checkpoint archive shared by every trainable module.

Layout (a numpy ``.npz``): ``param/<name>`` float32 tensors, ``meta/config``
UTF-8 JSON of the config snapshot, ``meta/rng`` raw torch RNG state bytes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import FormatError


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    rng_state: bytes | None = None

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}

    def equals(self, other: "Checkpoint") -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)


def from_module(module: torch.nn.Module, config: dict | None = None, with_rng: bool = True) -> Checkpoint:
    tensors = {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in module.state_dict().items()}
    rng = torch.get_rng_state().numpy().tobytes() if with_rng else None
    return Checkpoint(tensors, dict(config or {}), rng)


def save(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    arrays = {f"param/{k}": np.asarray(v, dtype=np.float32) for k, v in ckpt.tensors.items()}
    arrays["meta/config"] = np.frombuffer(json.dumps(ckpt.config, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    if ckpt.rng_state is not None:
        arrays["meta/rng"] = np.frombuffer(ckpt.rng_state, dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load(path: str | os.PathLike) -> Checkpoint:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a checkpoint archive ({exc})") from None
    with archive:
        tensors = {k[len("param/"):]: archive[k] for k in archive.files if k.startswith("param/")}
        config = json.loads(archive["meta/config"].tobytes().decode("utf-8")) if "meta/config" in archive.files else {}
        rng = archive["meta/rng"].tobytes() if "meta/rng" in archive.files else None
    return Checkpoint(tensors, config, rng)
