"""Recall@K retrieval evaluation, the 5-fold protocol and regulator diagnostics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import wasserstein_distance

from .errors import ConfigError, DataError

DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    direction: str
    recalls: dict[int, float]
    folds: list["RetrievalReport"] = field(default_factory=list)

    def __post_init__(self):
        prev = -1.0
        for k in sorted(self.recalls):
            r = self.recalls[k]
            if not 0.0 <= r <= 1.0 or r < prev:
                raise DataError(f"inconsistent recalls {self.recalls}")
            prev = r

    def __getitem__(self, k: int) -> float:
        return self.recalls[k]

    @property
    def rsum(self) -> float:
        return float(sum(self.recalls.values()))

    def to_dict(self) -> dict:
        out = {"direction": self.direction, **{f"R@{k}": v for k, v in sorted(self.recalls.items())}}
        if self.folds:
            out["folds"] = [f.to_dict() for f in self.folds]
        return out


def gt_ranks(sims: np.ndarray, ground_truth: Sequence[Sequence[int]]) -> np.ndarray:
    """0-based rank of the best-ranked ground-truth item per query.

    Ties are broken by gallery index: an item outranks the target if it scores
    higher, or scores equal and sits at a smaller index.
    """
    sims = np.asarray(sims)
    ranks = np.empty(sims.shape[0], dtype=np.int64)
    cols = np.arange(sims.shape[1])
    for q in range(sims.shape[0]):
        gts = np.atleast_1d(np.asarray(ground_truth[q], dtype=np.int64))
        if gts.size == 0:
            raise DataError(f"query {q} has no ground-truth item")
        row = sims[q]
        best = None
        for g in gts:
            r = int(np.count_nonzero(row > row[g]) + np.count_nonzero((row == row[g]) & (cols < g)))
            best = r if best is None else min(best, r)
        ranks[q] = best
    return ranks


def recall_at_k(sims, ground_truth, ks: Sequence[int] = DEFAULT_KS, direction: str = "query") -> RetrievalReport:
    """Fraction of queries (rows) whose ground truth ranks in the top ``k`` columns."""
    sims = np.asarray(sims)
    if sims.ndim != 2 or sims.shape[0] != len(ground_truth):
        raise DataError("ground truth must list one entry per query row")
    for k in ks:
        if k < 1 or k > sims.shape[1]:
            raise ConfigError(f"k={k} outside 1..{sims.shape[1]}")
    ranks = gt_ranks(sims, ground_truth)
    return RetrievalReport(direction, {int(k): float(np.mean(ranks < k)) for k in ks})


def bidirectional_recall(sims, caption_targets, ks: Sequence[int] = DEFAULT_KS) -> dict[str, RetrievalReport]:
    """Both retrieval directions from an ``[n_images, n_captions]`` score matrix.

    Image-to-text counts a hit if any paired caption is in the top ``k``.
    """
    sims = np.asarray(sims)
    caption_targets = np.asarray(caption_targets)
    per_image = [np.flatnonzero(caption_targets == i) for i in range(sims.shape[0])]
    return {
        "image_to_text": recall_at_k(sims, per_image, ks, "image_to_text"),
        "text_to_image": recall_at_k(sims.T, [[t] for t in caption_targets], ks, "text_to_image"),
    }


def _mean_report(direction: str, reports: list[RetrievalReport]) -> RetrievalReport:
    ks = reports[0].recalls.keys()
    means = {k: sum(r.recalls[k] for r in reports) / len(reports) for k in ks}
    return RetrievalReport(direction, means, list(reports))


@dataclass
class FoldedEvaluation:
    mean: dict[str, RetrievalReport]
    full: dict[str, RetrievalReport]

    def to_dict(self) -> dict:
        return {"mean": {k: v.to_dict() for k, v in self.mean.items()}, "full": {k: v.to_dict() for k, v in self.full.items()}}


def five_fold_eval(sims, captions_per_image: int = 5, n_folds: int = 5, ks: Sequence[int] = DEFAULT_KS) -> FoldedEvaluation:
    """Average recalls over consecutive image folds, plus the full-split recalls.

    ``sims`` is ``[n_images, n_images * captions_per_image]`` with captions
    grouped by image in order.
    """
    sims = np.asarray(sims)
    n_img = sims.shape[0]
    if sims.shape[1] != n_img * captions_per_image:
        raise ConfigError(f"{sims.shape[1]} captions for {n_img} images x {captions_per_image}")
    if n_folds < 1 or n_img % n_folds:
        raise ConfigError(f"{n_img} images do not split into {n_folds} folds")
    size = n_img // n_folds
    targets = np.repeat(np.arange(n_img), captions_per_image)
    folds = []
    for f in range(n_folds):
        lo, hi = f * size, (f + 1) * size
        block = sims[lo:hi, lo * captions_per_image : hi * captions_per_image]
        folds.append(bidirectional_recall(block, targets[lo * captions_per_image : hi * captions_per_image] - lo, ks))
    mean = {d: _mean_report(d, [f[d] for f in folds]) for d in folds[0]}
    return FoldedEvaluation(mean, bidirectional_recall(sims, targets, ks))


# -- diagnostics ---------------------------------------------------------------


@dataclass
class DiagnosticsBundle:
    # step -> tag -> mean aggregation weight mass assigned to that tag per sentence
    beta_by_tag: dict[str, list[dict[str, float]]]
    # step -> Wasserstein distance between positive- and negative-pair query cosines
    distances: list[float]
    # step -> tag -> distance restricted to queries with that tag
    distances_by_tag: list[dict[str, float]]

    @property
    def mean_tag_distance(self) -> list[float]:
        return [float(np.mean(list(d.values()))) if d else float("nan") for d in self.distances_by_tag]

    def to_dict(self) -> dict:
        return {
            "beta_by_tag": self.beta_by_tag,
            "distances": self.distances,
            "distances_by_tag": self.distances_by_tag,
            "mean_tag_distance": self.mean_tag_distance,
        }


def distribution_distance(a, b) -> float:
    """1-D Wasserstein distance between two empirical samples."""
    return float(wasserstein_distance(np.ravel(a), np.ravel(b)))


def _grouped_beta(betas: np.ndarray, tags: Sequence[Sequence[str]]) -> dict[str, float]:
    sums: dict[str, list[float]] = defaultdict(list)
    for row, row_tags in zip(betas, tags):
        totals: dict[str, float] = defaultdict(float)
        for w, t in zip(row, row_tags):
            totals[t] += float(w)
        for t, v in totals.items():
            sums[t].append(v)
    return {t: float(np.mean(v)) for t, v in sorted(sums.items())}


def diagnostics(
    positive: dict,
    negative: dict,
    token_tags: Sequence[Sequence[str]] | None = None,
) -> DiagnosticsBundle:
    """Summarize recorded traces of matched and unmatched pairs.

    ``positive`` / ``negative`` hold ``"betas"`` (list over steps of
    ``[n_sentences, L]`` arrays) and ``"cosines"`` (list over steps of
    ``[n_sentences, L]`` arrays), padded with NaN past each sentence's length.
    ``token_tags`` gives one tag per valid position; untagged runs group every
    position under ``"all"``.
    """
    for name, tr in (("positive", positive), ("negative", negative)):
        if not tr.get("cosines"):
            raise DataError(f"{name} trace has no per-query cosines")
    pos_cos = [np.asarray(c, dtype=np.float64) for c in positive["cosines"]]
    neg_cos = [np.asarray(c, dtype=np.float64) for c in negative["cosines"]]
    if len(pos_cos) != len(neg_cos):
        raise DataError("positive and negative traces have different step counts")
    n_sent, max_len = pos_cos[0].shape
    if token_tags is None:
        token_tags = [["all"] * int(np.count_nonzero(~np.isnan(row))) for row in pos_cos[0]]
    if len(token_tags) != n_sent:
        raise DataError(f"{len(token_tags)} tag rows for {n_sent} sentences")

    tag_values = sorted({t for row in token_tags for t in row})
    distances, by_tag = [], []
    for pc, nc in zip(pos_cos, neg_cos):
        distances.append(distribution_distance(pc[~np.isnan(pc)], nc[~np.isnan(nc)]))
        per_tag = {}
        for tag in tag_values:
            sel = np.zeros_like(pc, dtype=bool)
            for i, row in enumerate(token_tags):
                sel[i, : len(row)] = [t == tag for t in row]
            p, n = pc[sel], nc[sel]
            p, n = p[~np.isnan(p)], n[~np.isnan(n)]
            if p.size and n.size:
                per_tag[tag] = distribution_distance(p, n)
        by_tag.append(per_tag)

    beta_by_tag = {}
    for name, tr in (("positive", positive), ("negative", negative)):
        steps = []
        for b in tr.get("betas", []):
            b = np.nan_to_num(np.asarray(b, dtype=np.float64), nan=0.0)
            steps.append(_grouped_beta(b, token_tags))
        beta_by_tag[name] = steps
    return DiagnosticsBundle(beta_by_tag, distances, by_tag)
