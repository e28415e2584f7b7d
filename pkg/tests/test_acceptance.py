"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines.

Run with ``pytest tests/test_acceptance.py`` (the summary prints at the end).
"""
import time

import numpy as np
import pytest
import sympy

from mlnet.evaluate import ccr_fpr_curve, decide, h_score
from mlnet.memory import (MemoryBank, adaptive_neighborhood, brute_force_neighbors, build_neighbor_sets,
                          knn_neighborhood, relative_neighbor_ratio)
from mlnet.model import Network, closed_probs, open_scores
from mlnet.nn_core import finite_diff_grad
from mlnet.objectives import LossWeights, ObjectiveContext, loss_total, term_coefficients
from mlnet.scenario import ScenarioSpec, known_mixup_probability
from mlnet.training import RunConfig, train_run, write_trace_csv

GRAD_REL_TOL = 1e-4


def _detail(request, text):
    request.node.user_properties.append(("detail", text))


def _rel_err(analytic, numeric):
    a = np.concatenate([v.ravel() for v in analytic])
    n = np.concatenate([v.ravel() for v in numeric])
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6))


TERMS = ["cls", "ova", "oem", "nil", "cmm", "cc", "total"]


def _objective_draw(seed, term):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    net = Network.init(int(rng.integers(3, 6)), k, hidden=(5,), feat_dim=4, seed=seed)
    b = int(rng.integers(2, 5))
    xs = rng.normal(size=(b, net.in_dim))
    ys = rng.integers(0, k, size=b)
    xt = rng.normal(size=(b, net.in_dim))
    n_mem = b + 8
    idx = rng.choice(n_mem, size=b, replace=False)
    bank = MemoryBank.from_features(rng.normal(size=(n_mem, 4)), epsilon=float(rng.uniform(0.3, 0.9)))
    bank.update(idx, net.extractor_forward(xt)[-1])
    coefs = term_coefficients(LossWeights(), 2) if term == "total" else {term: 1.0}
    ctx = ObjectiveContext(coefs, lambdas=rng.uniform(size=b), smm_partner=rng.permutation(b), bank=bank,
                           neighbors=build_neighbor_sets(bank, idx))
    return net, xs, ys, xt, idx, ctx


@pytest.mark.criterion(1, "gradient suite: backprop vs central differences, 10 draws per objective")
def test_gradient_suite(request):
    start = time.perf_counter()
    worst = {}
    for term in TERMS:
        errs = []
        for seed in range(10):
            net, xs, ys, xt, idx, ctx = _objective_draw(seed, term)
            _, grads = loss_total(net, xs, ys, xt, idx, ctx)
            if term in ("cc", "total"):
                # the stop-gradient rule equals differentiating with closed probabilities held fixed
                ctx.cc_coefficients = closed_probs(net, net.extractor_forward(xt)[-1])
            fd = finite_diff_grad(lambda p: loss_total(net, xs, ys, xt, idx, ctx, with_grad=False)[0].total,
                                  net.params)
            names = sorted(net.params)
            errs.append(_rel_err([grads[n] for n in names], [fd[n] for n in names]))
        worst[term] = max(errs)
    elapsed = time.perf_counter() - start
    _detail(request, "max rel err " + " ".join(f"{t}={e:.1e}" for t, e in worst.items()) + f", {elapsed:.1f}s")
    assert all(e < GRAD_REL_TOL for e in worst.values()), worst
    assert elapsed < 60


@pytest.mark.criterion(2, "neighborhood search equals the brute-force oracle on 200 random banks")
def test_neighborhood_oracle(request):
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(200):
        n, d = int(rng.integers(2, 257)), int(rng.integers(2, 33))
        feats = rng.normal(size=(n, d)) * rng.uniform(0.1, 10.0, size=(n, 1))
        if rng.uniform() < 0.25:
            # duplicated rows force exact similarity ties
            dup = rng.integers(0, n, size=max(1, n // 4))
            feats[rng.integers(0, n, size=dup.size)] = feats[dup]
        eps = float(rng.uniform(0.05, 1.0))
        k = int(rng.integers(1, min(n - 1, 10) + 1))
        bank = MemoryBank.from_features(feats, epsilon=eps, k=k)
        for j in rng.choice(n, size=min(n, 6), replace=False):
            j = int(j)
            assert set(adaptive_neighborhood(bank, j).tolist()) == brute_force_neighbors(feats, j, epsilon=eps)
            assert set(knn_neighborhood(bank, j).tolist()) == brute_force_neighbors(feats, j, k=k)
            checked += 1
    _detail(request, f"{checked} queries exact")


@pytest.mark.criterion(3, "Monte-Carlo shared-class mixup frequency within 3 sigma")
def test_mixup_probability(request):
    rng = np.random.default_rng(19)
    n = 200_000
    notes = []
    for k, kp, ks in [(20, 21, 10), (9, 9, 6)]:
        ys = rng.integers(0, k, size=n)
        yt = rng.integers(0, kp, size=n)
        # target ids: shared first, then target-private ids past the source range
        yt = np.where(yt < ks, yt, yt + (k - ks))
        freq = np.mean((ys == yt) & (ys < ks))
        p = known_mixup_probability(k, kp, ks)
        sigma = np.sqrt(p * (1 - p) / n)
        notes.append(f"({k},{kp},{ks}) p={p:.4f} mc={freq:.4f} z={(freq - p) / sigma:+.2f}")
        assert abs(freq - p) <= 3 * sigma
    assert known_mixup_probability(20, 21, 10) == 10 / 420
    assert round(10 / 420, 3) == 0.024
    _detail(request, "; ".join(notes))


def _two_cluster_bank(seed):
    rng = np.random.default_rng(seed)
    d = 32
    centers = np.linalg.qr(rng.normal(size=(d, 2)))[0].T
    labels = np.array([0] * 100 + [1] * 20)
    feats = centers[labels] + 0.15 * rng.normal(size=(labels.size, d))
    return MemoryBank.from_features(feats), labels


@pytest.mark.criterion(4, "adaptive neighborhoods balance the imbalanced two-cluster bank better than 5-NN")
def test_balance_property(request):
    wins = 0
    for seed in range(20):
        bank, labels = _two_cluster_bank(seed)
        g_adaptive = relative_neighbor_ratio(bank, labels, 0, 1, "adaptive")
        g_knn = relative_neighbor_ratio(bank, labels, 0, 1, "knn", k=5)
        wins += abs(g_adaptive - 1) < abs(g_knn - 1)
    _detail(request, f"{wins}/20 wins")
    assert wins >= 18


@pytest.mark.criterion(5, "decision rule on hand-built cases")
def test_decision_rule(request):
    cases = [
        ([0.7, 0.3], [0.9, 0.1], 0),
        ([0.7, 0.3], [0.4, 0.9], 2),  # only the selected head is consulted
        ([0.7, 0.3], [0.5, 0.0], 0),  # boundary counts as known
        ([0.7, 0.3], [np.nextafter(0.5, 0.0), 1.0], 2),
        ([0.2, 0.8], [1.0, 0.49], 2),
        ([0.2, 0.8], [0.0, 0.51], 1),
        ([0.5, 0.5], [0.6, 0.0], 0),  # exact tie keeps the lowest index
    ]
    for pc, po, expected in cases:
        assert decide([pc], [po]).predicted.tolist() == [expected], (pc, po)
    _detail(request, f"{len(cases)} cases exact")


@pytest.mark.criterion(6, "metric identities: H-score cases, curve monotonicity, ideal UCR")
def test_metric_identities(request):
    tol = 1e-12
    assert abs(h_score([0, 1, 2], [0, 1, 2], 2)[0] - 1.0) <= tol
    assert abs(h_score([0, 1, 0], [0, 1, 2], 2)[0]) <= tol
    h, a_k, a_u = h_score([0, 0, 2], [0, 1, 2], 2)
    assert a_k == 0.5 and a_u == 1.0 and abs(h - 2 / 3) <= tol
    assert h_score([2, 2, 0], [0, 1, 2], 2)[0] == 0.0

    rng = np.random.default_rng(6)
    for _ in range(50):
        n = int(rng.integers(5, 60))
        true = rng.integers(0, 4, size=n)
        true[0] = 3
        argmax = rng.integers(0, 3, size=n)
        score = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))
        points, ucr = ccr_fpr_curve(argmax, score, true, 3)
        arr = np.array(points)
        assert np.all(np.diff(arr[:, 1]) <= 0) and np.all(np.diff(arr[:, 2]) <= 0)
        assert 0.0 <= ucr <= 1.0
        t0 = arr[arr[:, 0] == 0.0][0]
        known = true < 3
        assert abs(t0[1] - np.mean(argmax[known] == true[known])) <= tol and t0[2] == 1.0
        assert arr[-1, 1] == 0.0 and arr[-1, 2] == 0.0

    argmax = np.array([0, 1, 2, 0, 1])
    true = np.array([0, 1, 2, 3, 3])
    score = np.array([0.9, 0.8, 0.75, 0.3, 0.1])
    _, ucr = ccr_fpr_curve(argmax, score, true, 3)
    assert abs(ucr - 1.0) <= tol
    _detail(request, "exact to 1e-12")


@pytest.mark.criterion(7, "synthetic 6/3/3 run: full >= baseline H and w/o CC loses known accuracy, 5 seeds")
def test_end_to_end_opda(request):
    h_wins, cc_wins, rows = 0, 0, []
    slowest = 0.0
    for seed in range(5):
        scenario = ScenarioSpec(6, 3, 3, dim=16, samples_per_class_source=100,
                                samples_per_class_target=100, seed=seed)
        base = RunConfig(scenario=scenario, seed=seed)
        start = time.perf_counter()
        full = train_run(base).report
        baseline = train_run(base.replace(beta1=0.0, beta2=0.0, eta=0.0)).report
        no_cc = train_run(base.replace(eta=0.0)).report
        slowest = max(slowest, time.perf_counter() - start)
        h_wins += full.h_score >= baseline.h_score
        cc_wins += no_cc.a_known < full.a_known
        rows.append(f"s{seed}: H {full.h_score:.3f}/{baseline.h_score:.3f} "
                    f"a_k {full.a_known:.3f}/{no_cc.a_known:.3f}")
    _detail(request, f"H wins {h_wins}/5, CC wins {cc_wins}/5, slowest seed {slowest:.0f}s; " + "; ".join(rows))
    assert h_wins >= 4
    assert cc_wins >= 4
    assert slowest < 300


@pytest.mark.criterion(8, "consistency-loss gradient on open scores is -p_c/K, checked symbolically")
def test_cc_gradient_law(request):
    rng = np.random.default_rng(8)
    worst = 0.0
    for k in (2, 3, 5):
        pc_sym = sympy.symbols(f"c0:{k}")
        po_sym = sympy.symbols(f"o0:{k}")
        l_cc = -sum(c * o for c, o in zip(pc_sym, po_sym)) / k
        net = Network.init(4, k, hidden=(6,), feat_dim=5, seed=k)
        x = rng.normal(size=(1, 4))
        _, grads = loss_total(net, x, [0], x, [0], ObjectiveContext({"cc": 1.0}))
        z = net.extractor_forward(x)[-1]
        pc, po = closed_probs(net, z)[0], open_scores(net, z)[0]
        subs = {**dict(zip(pc_sym, pc)), **dict(zip(po_sym, po))}
        for l in range(k):
            symbolic = float(sympy.diff(l_cc, po_sym[l]).subs(subs))
            # the positive-logit bias moves the score with slope p(1 - p)
            autograd = grads["open.bias"][l, 0] / (po[l] * (1 - po[l]))
            assert abs(symbolic - (-pc[l] / k)) <= 1e-15
            worst = max(worst, abs(autograd - symbolic))
    _detail(request, f"max |autograd - symbolic| = {worst:.1e}")
    assert worst <= 1e-10


@pytest.mark.criterion(9, "identical seeded runs write byte-identical loss traces")
def test_determinism(request, tmp_path):
    scenario = ScenarioSpec(6, 3, 3, dim=16, samples_per_class_source=40, samples_per_class_target=40, seed=3)
    paths = []
    for name in ("a", "b"):
        arts = train_run(RunConfig(scenario=scenario, seed=3, epochs=4))
        path = tmp_path / f"{name}.csv"
        write_trace_csv(path, arts.trace)
        paths.append(path)
    a, b = (p.read_bytes() for p in paths)
    _detail(request, f"{len(a)} bytes, {len(a.splitlines()) - 1} rows")
    assert a == b


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
