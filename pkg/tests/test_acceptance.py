"""Acceptance criteria, one check per criterion.

Each ``criterion_N`` returns ``(passed, detail)``. Under pytest every criterion
prints a single ``[criterion N] PASS|FAIL ...`` line to the terminal and then
asserts; ``python tests/test_acceptance.py`` prints the same lines without
pytest.
"""

from __future__ import annotations

import math
import os
import sys
import tempfile
import time

import numpy as np
import pytest
import torch

from rcar.cma import AttentionFactors, attend
from rcar.datamodel import SyntheticSpec, synthetic_dataset
from rcar.evaluation import five_fold_eval, recall_at_k
from rcar.gradcheck import ProbeSpec, grad_check
from rcar.pipeline import (
    MatchingHead,
    PipelineConfig,
    SimilarityRecord,
    ensemble,
    format_score,
    read_scores,
    write_scores,
)
from rcar.rar import AggregationRegulator, init_guidance, similarity_head, step_guidance
from rcar.rcr import CorrespondenceRegulator
from rcar.training import LossConfig, TrainConfig, TrainSchedule, evaluate, hinge_loss, train

torch.set_num_threads(1)


# -- 1 --------------------------------------------------------------------------


def _attend_oracle(V, T, e, lam, eps=1e-8):
    """Straight-line loops: words attend regions."""
    K, L = V.shape[0], T.shape[0]
    c = np.zeros((K, L))
    for i in range(K):
        for j in range(L):
            c[i, j] = np.dot(V[i], e[j] * T[j]) / (np.linalg.norm(V[i]) * np.linalg.norm(T[j]))
    cbar = np.zeros((K, L))
    for i in range(K):
        denom = math.sqrt(sum(max(c[i, jj], 0.0) ** 2 for jj in range(L)))
        denom = max(denom, eps)
        for j in range(L):
            cbar[i, j] = max(c[i, j], 0.0) / denom
    alpha = np.zeros((K, L))
    out = np.zeros_like(T)
    for j in range(L):
        z = np.array([math.exp(lam[j] * cbar[i, j]) for i in range(K)])
        alpha[:, j] = z / z.sum()
        for i in range(K):
            out[j] += alpha[i, j] * V[i]
    return out, alpha


def criterion_1():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst, worst_col = 0.0, 0.0
    for _ in range(1000):
        K, L, d = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 33)
        V, T = rng.standard_normal((K, d)), rng.standard_normal((L, d))
        e = rng.uniform(-1, 1, (L, d))
        lam = rng.uniform(0, 20, L)
        ref, ref_alpha = _attend_oracle(V, T, e, lam)
        res = attend(torch.from_numpy(T), torch.from_numpy(V), AttentionFactors(torch.from_numpy(e), torch.from_numpy(lam)))
        worst = max(worst, np.abs(res.attended.numpy() - ref).max(), np.abs(res.weights.numpy() - ref_alpha).max())
        worst_col = max(worst_col, np.abs(res.weights.sum(0).numpy() - 1).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and worst_col <= 1e-6 and elapsed < 10
    return ok, f"max |attend - oracle| {worst:.2e}, max |colsum - 1| {worst_col:.2e}, {elapsed:.1f}s (limit 10s)"


# -- 2 --------------------------------------------------------------------------


def criterion_2():
    torch.manual_seed(2)
    details = []
    ok = True
    for N in (1, 2, 3):
        cfg = PipelineConfig.for_mode("rcar", N, d=16, m=8, e_hidden=12, lam_hidden=6)
        head = MatchingHead(cfg).double()
        if head.rcr is not None:
            head.rcr.zero_()
        with torch.no_grad():
            head.rar.W_beta.weight.zero_()
        V = torch.randn(5, 7, 16, dtype=torch.float64)
        T = torch.randn(5, 6, 16, dtype=torch.float64)
        got = head(V[:, None], T[None])
        # baseline attention, mean alignment, sigmoid head
        res = attend(T[None].expand(5, 5, 6, 16), V[:, None].expand(5, 5, 7, 16))
        a = head.align(T[None].expand(5, 5, 6, 16), res.attended)
        want = similarity_head(init_guidance(a).a_g, head.rar)
        same = torch.equal(got, want)
        ok &= same
        details.append(f"N={N}: {'exact' if same else f'max diff {(got - want).abs().max():.2e}'}")
    return ok, "; ".join(details)


# -- 3 --------------------------------------------------------------------------


def criterion_3():
    torch.manual_seed(3)
    d, m, Q = 8, 6, 5
    violations = 0
    steps = 0
    for chain in range(100):
        reg = CorrespondenceRegulator(d, m, 16, 8, residual=chain % 4 != 0, max_steps=1).double()
        scale = float(torch.empty(()).uniform_(0.5, 20))
        with torch.no_grad():
            for p in reg.parameters():
                p.copy_(scale * torch.randn_like(p))
        f = AttentionFactors(torch.empty(Q, d, dtype=torch.float64).uniform_(-1, 1), 20 * torch.rand(Q, dtype=torch.float64))
        for _ in range(100):
            feats = torch.randn(Q, m, dtype=torch.float64) * float(torch.empty(()).uniform_(0.1, 50))
            with torch.no_grad():
                f = reg.regulate(feats, f)
            violations += int((f.e.abs() > 1).sum()) + int((f.lam < 0).sum())
            steps += 1
    return violations == 0, f"{steps} fuzzed steps, {violations} violations"


# -- 4 --------------------------------------------------------------------------


def criterion_4():
    torch.manual_seed(4)
    worst_mean, worst_sum, worst_rec, neg = 0.0, 0.0, 0.0, 0
    for _ in range(200):
        L, m = int(torch.randint(1, 12, ())), int(torch.randint(1, 16, ()))
        A = torch.randn(3, L, m, dtype=torch.float64)
        A = A / A.norm(dim=-1, keepdim=True)
        params = AggregationRegulator(m).double()
        with torch.no_grad():
            for p in params.parameters():
                p.mul_(float(torch.empty(()).uniform_(0.1, 10)))
        with torch.no_grad():
            state = init_guidance(A)
            states = [step_guidance(state, A, params)]
            for _ in range(3):
                states.append(step_guidance(states[-1], A, params))
        worst_mean = max(worst_mean, float((state.a_g - A.mean(-2)).abs().max()))
        for state in states:
            worst_sum = max(worst_sum, float((state.beta.sum(-1) - 1).abs().max()))
            neg += int((state.beta < 0).sum())
            rebuilt = (state.beta[..., None] * A).sum(-2)
            worst_rec = max(worst_rec, float((rebuilt - state.a_g).abs().max()))
    ok = worst_mean <= 1e-9 and worst_sum <= 1e-6 and worst_rec <= 1e-12 and neg == 0
    return ok, f"|init - mean| {worst_mean:.1e}, |sum beta - 1| {worst_sum:.1e}, hull reconstruction {worst_rec:.1e}, negative betas {neg}"


# -- 5 --------------------------------------------------------------------------


def criterion_5():
    t0 = time.perf_counter()
    spec = ProbeSpec(d=6, m=4, K=3, L=3, probes=50, step=1e-3, tol=1e-4)
    reports = [grad_check(name, spec) for name in ("attend", "rcr", "rar", "rcar")]
    elapsed = time.perf_counter() - t0
    ok = all(r.passed for r in reports) and elapsed < 120
    parts = [f"{r.fragment} {r.max_rel_error:.1e}" for r in reports]
    return ok, f"max rel err: {', '.join(parts)} (tol 1e-4), {elapsed:.0f}s (limit 120s)"


# -- 6 --------------------------------------------------------------------------


def _hinge_oracle(S: torch.Tensor, margin: float) -> torch.Tensor:
    n = S.shape[0]
    row_max, col_max = [], []
    for i in range(n):
        best = torch.zeros((), dtype=S.dtype)
        for j in range(n):
            if j != i:
                best = torch.maximum(best, torch.relu(margin - (S[i, i] - S[i, j])))
        row_max.append(best)
    for j in range(n):
        best = torch.zeros((), dtype=S.dtype)
        for i in range(n):
            if i != j:
                best = torch.maximum(best, torch.relu(margin - (S[j, j] - S[i, j])))
        col_max.append(best)
    return torch.stack(row_max).sum() + torch.stack(col_max).sum()


def criterion_6():
    torch.manual_seed(6)
    mismatches = 0
    for _ in range(200):
        S = torch.rand(8, 8, dtype=torch.float64)
        if not torch.equal(hinge_loss(S, 0.2), _hinge_oracle(S, 0.2)):
            mismatches += 1
    satisfied = torch.full((8, 8), 0.1, dtype=torch.float64)
    satisfied.fill_diagonal_(0.9)
    violated = satisfied.clone()
    violated[2, 5] = 0.75
    zero_ok = float(hinge_loss(satisfied, 0.2)) == 0.0
    nonzero_ok = float(hinge_loss(violated, 0.2)) > 0.0
    ok = mismatches == 0 and zero_ok and nonzero_ok
    return ok, f"{mismatches}/200 mismatches vs enumeration; satisfied case zero={zero_ok}, violated case positive={nonzero_ok}"


# -- 7 --------------------------------------------------------------------------


def criterion_7():
    rng = np.random.default_rng(7)
    mismatches, nonmono = 0, 0
    ks = (1, 5, 10)
    for trial in range(100):
        S = rng.integers(0, 6, (20, 20)).astype(float) if trial % 2 else rng.standard_normal((20, 20))
        gt = rng.integers(0, 20, 20)
        report = recall_at_k(S, [[g] for g in gt], ks)
        for k in ks:
            hits = 0
            for q in range(20):
                order = np.argsort(-S[q], kind="stable")
                hits += int(gt[q] in order[:k])
            if report[k] != hits / 20:
                mismatches += 1
        vals = [report[k] for k in ks]
        nonmono += int(any(b < a for a, b in zip(vals, vals[1:])))
    return mismatches == 0 and nonmono == 0, f"{mismatches} mismatches vs full-sort oracle, {nonmono} non-monotone reports"


# -- 8 --------------------------------------------------------------------------


def criterion_8():
    # fold f: the first f+1 of its 5 items rank their match first, the rest rank it last
    S = np.full((25, 25), -10.0)
    for f in range(5):
        block = np.zeros((5, 5))
        for i in range(5):
            block[i, i] = 1.0 if i <= f else -1.0
        S[5 * f : 5 * f + 5, 5 * f : 5 * f + 5] = block
    res = five_fold_eval(S, captions_per_image=1, n_folds=5, ks=(1, 3, 5))
    hand = {1: (0.2 + 0.4 + 0.6 + 0.8 + 1.0) / 5, 3: (0.2 + 0.4 + 0.6 + 0.8 + 1.0) / 5, 5: (1.0 + 1.0 + 1.0 + 1.0 + 1.0) / 5}
    ok = True
    for direction in ("image_to_text", "text_to_image"):
        report = res.mean[direction]
        ok &= report.recalls == hand
        folds = report.folds
        ok &= all(report.recalls[k] == sum(fr.recalls[k] for fr in folds) / len(folds) for k in (1, 3, 5))
    return ok, f"fold means {res.mean['image_to_text'].recalls} vs hand {hand}"


# -- 9 --------------------------------------------------------------------------

OVERFIT_SPEC = SyntheticSpec(num_pairs=64, K=8, L=6, d=64, noise_scale=0.1, seed=0)


def criterion_9():
    data = synthetic_dataset(OVERFIT_SPEC)
    cfg = TrainConfig(
        PipelineConfig.for_mode("rcar", 2, d=64, m=32, e_hidden=64, lam_hidden=32),
        LossConfig(margin=0.2, batch_size=32),
        TrainSchedule(((1e-3, 200),)),
        embed_dim=64,
        seed=0,
    )
    reached = {}
    t0 = time.perf_counter()

    class Done(Exception):
        pass

    def check(epoch, model):
        r = evaluate(model, data, ks=(1,))
        reached.update(epoch=epoch, i2t=r["image_to_text"][1], t2i=r["text_to_image"][1])
        if reached["i2t"] >= 0.95 and reached["t2i"] >= 0.95:
            raise Done

    try:
        train(cfg, data, on_epoch=check)
    except Done:
        pass
    elapsed = time.perf_counter() - t0
    ok = reached["i2t"] >= 0.95 and reached["t2i"] >= 0.95 and elapsed < 300
    return ok, f"R@1 i2t {reached['i2t']:.3f} / t2i {reached['t2i']:.3f} after {reached['epoch'] + 1} epochs, {elapsed:.0f}s (limits 200 epochs, 300s)"


# -- 10 -------------------------------------------------------------------------

TREND_SEEDS = (0, 1, 2, 3, 4)
TREND_EPOCHS = 30
TREND_HOST_WARMUP = 20


def trend_run(mode: str, seed: int) -> tuple[float, float]:
    """Test R@1 (i2t, t2i) of one seed; both modes get the same epoch budget."""
    spec = SyntheticSpec(num_pairs=640, K=8, L=8, d=64, noise_scale=0.1, concepts=4, seed=seed)
    data = synthetic_dataset(spec)
    train_set, test_set = data.subset(range(512)), data.subset(range(512, 640))
    cfg = TrainConfig(
        PipelineConfig.for_mode(mode, 2, d=64, m=32, e_hidden=64, lam_hidden=32),
        LossConfig(margin=0.2, batch_size=32),
        TrainSchedule(((2e-3, TREND_EPOCHS),)),
        embed_dim=64,
        seed=seed,
        host_warmup_epochs=0 if mode == "baseline" else TREND_HOST_WARMUP,
    )
    r = evaluate(train(cfg, train_set).model, test_set, ks=(1,))
    return r["image_to_text"][1], r["text_to_image"][1]


def criterion_10():
    runs = {mode: np.array([trend_run(mode, s) for s in TREND_SEEDS]) for mode in ("baseline", "rcar")}
    med = {mode: np.median(v, axis=0) for mode, v in runs.items()}
    ok = bool((med["rcar"] >= med["baseline"]).all())
    per_seed = ", ".join(f"s{s} {runs['rcar'][i].round(3).tolist()} vs {runs['baseline'][i].round(3).tolist()}" for i, s in enumerate(TREND_SEEDS))
    return ok, (
        f"median R@1 (i2t, t2i): rcar {med['rcar'].round(4).tolist()} vs baseline {med['baseline'].round(4).tolist()}; "
        f"per seed rcar vs baseline: {per_seed}"
    )


# -- 11 -------------------------------------------------------------------------


def criterion_11():
    rng = np.random.default_rng(11)
    a = [SimilarityRecord(f"i{i}", f"c{j}", "t2i", "rcar", float(rng.random())) for i in range(12) for j in range(12)]
    b = [SimilarityRecord(f"i{i}", f"c{j}", "i2t", "rcar", float(rng.standard_normal())) for i in range(12) for j in range(12)]
    rng.shuffle(b)
    with tempfile.TemporaryDirectory() as tmp:
        pa, pb, pc = (os.path.join(tmp, n) for n in ("a.tsv", "b.tsv", "c.tsv"))
        write_scores(pa, a)
        write_scores(pb, b)
        ra, rb = read_scores(pa), read_scores(pb)
        write_scores(pc, ensemble(ra, rb))
        with open(pc, encoding="utf-8") as fh:
            lines = fh.read().splitlines()[1:]
    lookup = {(r.image_id, r.caption_id): r.score for r in rb}
    want = [format_score((r.score + lookup[(r.image_id, r.caption_id)]) / 2) for r in ra]
    got = [line.split("\t")[4] for line in lines]
    bad = sum(g != w for g, w in zip(got, want)) + abs(len(got) - len(want))
    return bad == 0, f"{len(got)} ensembled pairs, {bad} differ from the formatted per-pair mean"


# -- 12 -------------------------------------------------------------------------


def criterion_12():
    torch.manual_seed(12)
    bad_rar, bad_rcr = 0, 0
    for _ in range(100):
        d, m = int(torch.randint(2, 12, ())), int(torch.randint(2, 8, ()))
        K, L, B = int(torch.randint(1, 7, ())), int(torch.randint(1, 7, ())), int(torch.randint(1, 4, ()))
        steps = int(torch.randint(1, 4, ()))
        kw = dict(d=d, m=m, e_hidden=6, lam_hidden=4)
        V = torch.randn(B, 1, K, d, dtype=torch.float64)
        T = torch.randn(1, B, L, d, dtype=torch.float64)

        rar = MatchingHead(PipelineConfig(mode="rar", n_rar=steps, n_rcr=0, **kw)).double()
        rcar = MatchingHead(PipelineConfig(mode="rcar", n_rar=steps, n_rcr=0, **kw)).double()
        rcar.load_state_dict(rar.state_dict())
        bad_rar += int(not torch.equal(rar(V, T), rcar(V, T)))

        rcr = MatchingHead(PipelineConfig(mode="rcr", n_rar=0, n_rcr=steps, **kw)).double()
        rcar2 = MatchingHead(PipelineConfig(mode="rcar", n_rar=0, n_rcr=steps, head="cosine", **kw)).double()
        rcar2.load_state_dict(rcr.state_dict())
        bad_rcr += int(not torch.equal(rcr(V, T), rcar2(V, T)))
    return bad_rar == 0 and bad_rcr == 0, f"100 instances: rcar(n_rcr=0) vs rar {bad_rar} mismatches, rcar(n_rar=0, cosine) vs rcr {bad_rcr} mismatches"


CRITERIA = {
    1: ("attention correctness", criterion_1),
    2: ("identity cascade", criterion_2),
    3: ("factor safety", criterion_3),
    4: ("RAR init equivalence", criterion_4),
    5: ("gradient audit", criterion_5),
    6: ("loss oracle", criterion_6),
    7: ("recall oracle", criterion_7),
    8: ("five-fold arithmetic", criterion_8),
    9: ("overfit convergence", criterion_9),
    10: ("regulator benefit trend", criterion_10),
    11: ("ensemble exactness", criterion_11),
    12: ("mode degeneracy", criterion_12),
}


def run_criterion(n: int) -> tuple[bool, str]:
    name, fn = CRITERIA[n]
    passed, detail = fn()
    line = f"[criterion {n:2d}] {'PASS' if passed else 'FAIL'} {name}: {detail}"
    return passed, line


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, capsys):
    passed, line = run_criterion(n)
    with capsys.disabled():
        print("\n" + line)
    assert passed, line


if __name__ == "__main__":
    results = []
    for n in sorted(CRITERIA):
        passed, line = run_criterion(n)
        print(line, flush=True)
        results.append(passed)
    sys.exit(0 if all(results) else 1)
