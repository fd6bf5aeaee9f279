"""Inspect what the regulators do on a trained model.

Trains a small regulated model, then traces matched and mismatched pairs:
how much aggregation weight lands on concept words versus filler words at each
step, and how well per-word cosines separate matched from mismatched pairs
(Wasserstein distance between the two cosine distributions).
"""

import numpy as np
import torch

from rcar.datamodel import SyntheticSpec, synthetic_dataset
from rcar.encoders import collate_captions, stack_regions
from rcar.evaluation import diagnostics
from rcar.pipeline import PipelineConfig, ScoreTrace
from rcar.training import LossConfig, TrainConfig, TrainSchedule, train

torch.set_num_threads(1)

data = synthetic_dataset(SyntheticSpec(num_pairs=256, K=8, L=8, d=64, concepts=4, seed=1))
cfg = TrainConfig(
    PipelineConfig.for_mode("rcar", 3, d=64, m=32, e_hidden=64, lam_hidden=32),
    LossConfig(margin=0.2, batch_size=32),
    TrainSchedule(((2e-3, 25),)),
    embed_dim=64,
    seed=0,
    host_warmup_epochs=15,
)
model = train(cfg, data).model.eval()

n = 64
regions = stack_regions(data.regions[:n])
tokens, lengths = collate_captions(data.sentences[:n])
with torch.no_grad():
    V, T, mask = model.encode(regions, tokens, lengths)


def trace(images):
    tr = ScoreTrace()
    with torch.no_grad():
        model.head(images, T, caption_mask=mask, trace=tr)
    pad = ~mask.numpy()

    def masked(x):
        x = x.double().numpy().copy()
        x[pad] = np.nan
        return x

    return {"cosines": [masked(c) for c in tr.cosines], "betas": [masked(b) for b in tr.betas]}


positive = trace(V)
negative = trace(V.roll(1, dims=0))  # each caption against another pair's image
tags = [list(s.token_tags) for s in data.sentences[:n]]
bundle = diagnostics(positive, negative, tags)

print("aggregation weight per tag (matched pairs):")
for step, by_tag in enumerate(bundle.beta_by_tag["positive"]):
    print(f"  step {step}: " + "  ".join(f"{t}={v:.3f}" for t, v in by_tag.items()))
print("cosine separation, matched vs mismatched:")
for step, (dist, by_tag) in enumerate(zip(bundle.distances, bundle.distances_by_tag)):
    print(f"  attention pass {step}: all={dist:.3f}  " + "  ".join(f"{t}={v:.3f}" for t, v in by_tag.items()))
