"""How channel weights and temperatures reshape a word's attention.

Three words look over four regions. Clamped similarities are normalized across
the words of the caption before the softmax over regions, so a region that
matches many words counts for less with each of them. Only the first word is
printed. Its temperature controls how peaked its attention is, and its channel
weights ``e`` decide which feature channels count when matching.

Switching the nuisance channel off leaves the weights unchanged: region 1 is
matched by the first word alone, so after normalization across words its
similarity is 1 whatever its magnitude. Penalizing the channel turns that
similarity negative, the clamp removes it, and the word locks onto region 0.
"""

import torch

from rcar.cma import AttentionFactors, attend

torch.set_printoptions(precision=3, sci_mode=False)

regions = torch.tensor(
    [
        [1.0, 0.0, 0.2, 0.0],  # the region the first word is about
        [0.6, 0.0, 0.0, 0.8],  # shares channel 0, dominated by a nuisance channel
        [0.0, 1.0, 0.0, 0.1],
        [0.1, 0.0, 1.0, 0.0],
    ]
)
words = torch.tensor(
    [
        [0.7, 0.0, 0.1, 0.7],  # picks up the nuisance channel
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.1, 1.0, 0.0],
    ]
)


def show(label, e=None, lam=10.0):
    e = torch.ones(3, 4) if e is None else e
    res = attend(words, regions, AttentionFactors(e, torch.tensor([lam, 10.0, 10.0])))
    print(f"{label:32s} {res.weights[:, 0]}")


print(f"{'first word, weight per region':32s}")
show("default (e = 1, lambda = 10)")
show("cool (lambda = 1)", lam=1.0)
show("sharp (lambda = 40)", lam=40.0)

e = torch.ones(3, 4)
e[0, 3] = 0.0
show("nuisance channel switched off", e)
e[0, 3] = -1.0
show("nuisance channel penalized", e)
