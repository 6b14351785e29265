"""End-to-end acceptance checks, one test per criterion, each with its runtime budget."""
from __future__ import annotations

import time

import numpy as np
import pytest

from oracles import brute_force_assignment, brute_force_idtp, naive_overlap, random_graph

from topomot.assoc import Models, TrackerConfig, greedy_match, hungarian_match
from topomot.benchmark import run_ablation
from topomot.graphcon import DistanceThreshold, build_graph, default_edge_layer
from topomot.motio.metrics import evaluate
from topomot.motio.records import MotRecord, read_mot, write_records
from topomot.numkit import Adam, FeedForwardLayer, central_difference, ff_forward, ff_backward, make_rng, relative_error
from topomot.pipeline import fit_gnn, fit_providers, init_providers, scenario_eval, track_scenario
from topomot.providers import (AppearanceMatcher, FrameObservations, MotionScorer, Providers, normalize,
                               window_loss)
from topomot.simgen import ScenarioConfig, generate
from topomot.topognn import (AugmentConfig, GcnStack, GnnLossConfig, adaptivity_loss, augment, gcn_forward,
                             reconstruction_loss, topo_similarity, train_gnn)


@pytest.fixture(scope="module")
def ablation():
    return run_ablation()


def test_ablation_gain(ablation, criterion):
    gain = 100 * (ablation.mean(2) - ablation.mean(0))
    ok = gain >= 1.0 and ablation.seconds <= 600
    criterion(1, ok, f"2-layer IDF1 {100 * ablation.mean(2):.2f} vs no-topology {100 * ablation.mean(0):.2f} "
                     f"(gain {gain:+.2f} points, {ablation.seconds:.0f} s)")
    print(ablation.summary())
    assert ablation.seconds <= 600
    assert gain >= 1.0


def test_layer_ordering(ablation, criterion):
    m1, m2, m3 = (100 * ablation.mean(L) for L in (1, 2, 3))
    ok = m2 >= m1 and m3 <= m2 + 0.5
    criterion(2, ok, f"IDF1 L=1 {m1:.2f}, L=2 {m2:.2f}, L=3 {m3:.2f}")
    assert m2 >= m1
    assert m3 <= m2 + 0.5


def test_normalization_suite(criterion):
    start = time.perf_counter()
    rng = make_rng(3)
    worst_shift = 0.0
    for k in range(1000):
        n, m = rng.integers(1, 11, size=2)
        if k % 4 == 0:
            m = n
        x = rng.normal(scale=rng.uniform(0.1, 5.0), size=(n, m))
        if k % 4 == 0:
            x = 0.5 * (x + x.T)
        f = normalize(x).values
        assert np.all(f > 0) and np.all(f <= 1.0)
        assert np.all(f.sum(axis=0) <= 1 + 1e-9) and np.all(f.sum(axis=1) <= 1 + 1e-9)
        c = rng.uniform(-50, 50)
        worst_shift = max(worst_shift, float(np.abs(normalize(x + c).values - f).max()))
        assert worst_shift <= 1e-9
        if k % 4 == 0:
            assert np.allclose(f, f.T, rtol=0, atol=1e-12)
    elapsed = time.perf_counter() - start
    criterion(3, elapsed < 10, f"1000 matrices, max shift deviation {worst_shift:.1e}, {elapsed:.2f} s")
    assert elapsed < 10


def _stack_grad_check(loss_fn, stack: GcnStack) -> float:
    _, grads = loss_fn()
    params = stack.params()
    numeric = [central_difference(lambda: loss_fn()[0], params[k]) for k in sorted(params)]
    analytic = [grads[k] for k in sorted(params)]
    return relative_error(np.concatenate([a.ravel() for a in analytic]),
                          np.concatenate([b.ravel() for b in numeric]))


def _small_window(rng, n_obj: int, length: int, dim: int):
    boxes = np.column_stack([rng.uniform(0.2, 0.8, size=(n_obj, 2)), np.full((n_obj, 2), 0.03)])
    base = rng.normal(size=(n_obj, dim))
    window = []
    for _ in range(length):
        boxes = boxes.copy()
        boxes[:, :2] += rng.normal(scale=0.004, size=(n_obj, 2))
        window.append(FrameObservations(boxes, base + 0.1 * rng.normal(size=base.shape)))
    return window


def _provider_grad_check(rng) -> float:
    dim = 3
    providers = Providers(AppearanceMatcher.init(dim, rng, hidden_dim=4), MotionScorer.init(rng, hidden_dim=4))
    window = _small_window(rng, int(rng.integers(2, 9)), int(rng.integers(2, 5)), dim)
    _, grads, _ = window_loss(providers, window, v_max=0.05)
    params = providers.params()
    f = lambda: window_loss(providers, window, v_max=0.05, with_grads=False)[0]
    keys = sorted(params)
    numeric = [central_difference(f, params[k]) for k in keys]
    return relative_error(np.concatenate([grads[k].ravel() for k in keys]),
                          np.concatenate([g.ravel() for g in numeric]))


def test_gradient_suite(criterion):
    start = time.perf_counter()
    rng = make_rng(11)
    worst = {"J_r": 0.0, "J_a": 0.0, "J_1": 0.0, "feed-forward": 0.0}
    for k in range(50):
        n = int(rng.integers(2, 9))
        dim = int(rng.integers(2, 5))
        g = random_graph(rng, n, dim)
        stack = GcnStack.init(dim, [3, 2], rng, use_nonlinearity=bool(k % 2))
        worst["J_r"] = max(worst["J_r"], _stack_grad_check(lambda: reconstruction_loss(stack, g), stack))
        g_aug, corr = augment(g, AugmentConfig(0.3, 0.3, 0.5, 0.05), rng)
        worst["J_a"] = max(worst["J_a"], _stack_grad_check(lambda: adaptivity_loss(stack, g, g_aug, corr), stack))
        worst["J_1"] = max(worst["J_1"], _provider_grad_check(rng))

        act = ("identity", "relu", "sigmoid")[k % 3]
        layer = FeedForwardLayer.init(dim, int(rng.integers(1, 6)), rng, activation=act)
        x = rng.normal(size=(n, dim))
        up = rng.normal(size=(n, layer.n_out))
        grads, dx = ff_backward(layer, x, up)
        f = lambda: float((ff_forward(layer, x) * up).sum())
        num = [central_difference(f, layer.weight), central_difference(f, layer.bias), central_difference(f, x)]
        ana = [grads["weight"], grads["bias"], dx]
        worst["feed-forward"] = max(worst["feed-forward"], relative_error(
            np.concatenate([a.ravel() for a in ana]), np.concatenate([b.ravel() for b in num])))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 120
    criterion(4, ok, "50 instances each, worst relative error "
              + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f} s")
    for name, err in worst.items():
        assert err <= 1e-4, name
    assert elapsed < 120


def test_assignment_oracle(criterion):
    start = time.perf_counter()
    rng = make_rng(5)
    worst_ratio = np.inf
    for k in range(1000):
        n, m = rng.integers(1, 7, size=2)
        if k % 3 == 0:
            s = rng.integers(0, 5, size=(n, m)).astype(np.float64)
        else:
            s = rng.uniform(-0.5, 1.0, size=(n, m)) if k % 3 == 1 else rng.random((n, m))
        tau = 0.0 if k % 2 else float(rng.uniform(-0.2, 0.6))
        h = hungarian_match(s, tau)
        opt = brute_force_assignment(s, tau)
        assert h.total == opt, (s, tau)
        for res in (h, greedy_match(s, tau)):
            rows = [mt.detection for mt in res.matches]
            cols = [mt.track_id for mt in res.matches]
            assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
            assert all(mt.score >= tau for mt in res.matches)
        if np.all(s >= 0) and tau <= 0:
            gtot = greedy_match(s, 0.0).total
            assert gtot >= 0.5 * opt - 1e-12
            if opt > 0:
                worst_ratio = min(worst_ratio, gtot / opt)
    elapsed = time.perf_counter() - start
    criterion(5, elapsed < 30, f"1000 matrices up to 6x6, Hungarian exact, worst greedy/optimal "
                               f"{worst_ratio:.3f}, {elapsed:.1f} s")
    assert elapsed < 30


def _fixed_graph_training():
    scenario = generate(ScenarioConfig(num_agents=10, num_frames=1, seed=3))
    rng = make_rng(0)
    edge = default_edge_layer(scenario.config.descriptor_dim, rng)
    g = build_graph(scenario.frames[0], DistanceThreshold(0.1), edge)
    stack = GcnStack.init(scenario.config.descriptor_dim, [16, 16], rng)
    before, _ = reconstruction_loss(stack, g)
    stack, history = train_gnn(stack, [g], AugmentConfig(), GnnLossConfig(gamma=0.8), Adam(lr=1e-2), 500, rng, edge)
    after, _ = reconstruction_loss(stack, g)
    return g, before, after, history


def test_gnn_training(criterion):
    start = time.perf_counter()
    g, before, after, history = _fixed_graph_training()
    _, _, _, again = _fixed_graph_training()
    elapsed = time.perf_counter() - start
    drop = 1 - after / before
    identical = history == again
    ok = g.n == 10 and drop >= 0.5 and identical and elapsed < 60
    criterion(6, ok, f"J_r {before:.3f} -> {after:.3f} ({100 * drop:.1f}% lower), "
                     f"traces identical: {identical}, {elapsed:.1f} s")
    assert g.n == 10
    assert drop >= 0.5
    assert identical
    assert elapsed < 60


def test_noiseless_end_to_end(criterion):
    start = time.perf_counter()
    clean = ScenarioConfig(num_agents=10, num_frames=100, occlusion_corruption=0.0)
    train = [generate(clean.replace(seed=s)) for s in range(100, 104)]
    rng = make_rng(0)
    providers, _ = fit_providers(init_providers(16, rng), train, rng, 2000, 1e-3)
    stack, edge, _ = fit_gnn(16, train, [16, 16], DistanceThreshold(0.1), rng, 500, 1e-2)
    scenario = generate(clean.replace(seed=7))
    report = scenario_eval(scenario, track_scenario(scenario, Models(providers, stack, edge), TrackerConfig()))
    elapsed = time.perf_counter() - start
    ok = report.IDSW == 0 and report.IDF1 == 1.0 and elapsed < 30
    criterion(7, ok, f"IDSW {report.IDSW}, IDF1 {report.IDF1:.4f}, MOTA {report.MOTA:.4f}, {elapsed:.1f} s")
    assert report.IDSW == 0
    assert report.IDF1 == 1.0
    assert elapsed < 30


def _rec(frame, tid, x, y=0.0, w=10.0, h=20.0):
    return MotRecord(frame, tid, x, y, w, h, 1.0)


def mota_toy():
    """GT = 10 boxes; prediction has 1 false positive, 2 misses and 1 identity switch."""
    gt = [_rec(f, 1, 0.0) for f in range(1, 6)] + [_rec(f, 2, 100.0) for f in range(1, 6)]
    pred = ([_rec(f, 11, 0.0) for f in (1, 2)] + [_rec(f, 13, 0.0) for f in (3, 4, 5)]
            + [_rec(f, 12, 100.0) for f in (1, 2, 3)] + [_rec(3, 14, 500.0)])
    return gt, pred


def test_metric_correctness(criterion):
    start = time.perf_counter()
    gt = [_rec(f, 1, 0.0) for f in range(1, 5)]
    pred = [_rec(f, 7, 0.0) for f in range(1, 4)]
    r = evaluate(gt, pred)
    assert (r.IDTP, r.IDFN, r.IDFP) == (3, 1, 0)
    assert r.IDF1 == pytest.approx(6 / 7, abs=1e-15)

    g2, p2 = mota_toy()
    r2 = evaluate(g2, p2)
    assert (r2.GT, r2.FP, r2.FN, r2.IDSW) == (10, 1, 2, 1)
    assert r2.MOTA == pytest.approx(0.6, abs=1e-15)

    rng = make_rng(8)
    for _ in range(200):
        gt, pred = random_track_instance(rng)
        report = evaluate(gt, pred)
        overlap = naive_overlap(gt, pred, 0.5)
        idtp = brute_force_idtp(overlap)
        expected = 2 * idtp / (len(gt) + len(pred))
        assert report.IDTP == idtp
        assert report.IDF1 == pytest.approx(expected, abs=1e-12)

    base = generate(ScenarioConfig(num_agents=8, num_frames=40, seed=2))
    gt_rec = [MotRecord(g.frame, g.track_id, *g.box.tlwh()) for g in base.ground_truth]
    same = evaluate(gt_rec, gt_rec)
    assert (same.IDF1, same.MOTA, same.IDSW) == (1.0, 1.0, 0)
    elapsed = time.perf_counter() - start
    criterion(8, elapsed < 10, f"IDF1 toy {r.IDF1:.4f}, MOTA toy {r2.MOTA:.2f}, 200 brute-force instances, "
                               f"gt vs gt ({same.IDF1}, {same.MOTA}, {same.IDSW}), {elapsed:.1f} s")
    assert elapsed < 10


def random_track_instance(rng, max_tracks: int = 5, frames: int = 8):
    """Up to five gt tracks on a coarse grid and predictions that copy, swap, drop or shift them."""
    n_gt = int(rng.integers(1, max_tracks + 1))
    gt, pred = [], []
    slots = rng.permutation(8)[:n_gt]
    n_pred = int(rng.integers(1, max_tracks + 1))
    for f in range(1, frames + 1):
        for k, slot in enumerate(slots):
            if rng.random() < 0.85:
                gt.append(_rec(f, k + 1, 40.0 * slot))
        for slot in slots:
            if rng.random() < 0.75:
                x = 40.0 * slot + (rng.choice([0.0, 3.0, 12.0]))
                pred.append((f, x))
        if rng.random() < 0.3:
            pred.append((f, float(rng.uniform(0, 400))))
    out, used = [], set()
    for f, x in pred:
        tid = int(rng.integers(1, n_pred + 1))
        if (f, tid) in used:
            continue
        used.add((f, tid))
        out.append(_rec(f, tid + 100, x))
    return gt, out


def test_gcn_equivariance(criterion):
    start = time.perf_counter()
    rng = make_rng(21)
    worst_perm, worst_scale = 0.0, 0.0
    for _ in range(100):
        n = int(rng.integers(2, 12))
        g = random_graph(rng, n, 4)
        stack = GcnStack.init(4, [5, 3, 2], rng, use_nonlinearity=bool(rng.integers(2)))
        perm = rng.permutation(n)
        base = gcn_forward(stack, g)
        moved = gcn_forward(stack, g.permuted(perm))
        for h, hp in zip(base.layers, moved.layers):
            worst_perm = max(worst_perm, float(np.abs(h[perm] - hp).max() / max(1.0, np.abs(h).max())))
        trk = rng.normal(size=(int(rng.integers(1, 6)), 5))
        s = topo_similarity(base, trk, layer=1)
        for c in (1e-6, 1e-3, 7.5, 1e4):
            worst_scale = max(worst_scale, float(np.abs(topo_similarity(c * base[1], c * trk) - s).max()))
    elapsed = time.perf_counter() - start
    ok = worst_perm <= 1e-12 and worst_scale <= 1e-9 and elapsed < 10
    criterion(9, ok, f"100 graphs, permutation deviation {worst_perm:.1e}, rescaling deviation "
                     f"{worst_scale:.1e}, {elapsed:.2f} s")
    assert worst_perm <= 1e-12
    assert worst_scale <= 1e-9
    assert elapsed < 10


def test_format_fidelity(tmp_path, criterion):
    start = time.perf_counter()
    rng = make_rng(4)
    records = []
    for f in range(1, 31):
        for tid in rng.permutation(12)[: rng.integers(1, 9)]:
            l, t = np.round(rng.uniform(0, 1800, size=2), 2)
            w, h = np.round(rng.uniform(5, 200, size=2), 2)
            records.append(MotRecord(f, int(tid) + 1, float(l), float(t), float(w), float(h), 1.0))
    records.sort(key=lambda r: (r.frame, r.id))
    path = write_records(tmp_path / "a.txt", records)
    back = read_mot(path, "tracks")
    assert back == records
    write_records(tmp_path / "b.txt", back)
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    scenario = generate(ScenarioConfig(num_agents=10, num_frames=60, seed=5, miss_rate=0.1))
    gt = [MotRecord(g.frame, g.track_id, *g.box.tlwh()) for g in scenario.ground_truth]
    noisy = [MotRecord(r.frame, r.id if rng.random() > 0.05 else r.id + 50, r.left + rng.normal(scale=2.0),
                       r.top, r.width, r.height) for r in gt if rng.random() > 0.1]
    noisy = list({(r.frame, r.id): r for r in noisy}.values())
    ref = evaluate(gt, noisy)
    ids = sorted({r.id for r in noisy})
    for _ in range(5):
        relabel = dict(zip(ids, (rng.permutation(len(ids)) * 3 + 1000).tolist()))
        renamed = [MotRecord(r.frame, relabel[r.id], *r.tlwh, r.conf) for r in noisy]
        rep = evaluate(gt, renamed)
        assert (rep.IDF1, rep.MOTA, rep.IDSW) == (ref.IDF1, ref.MOTA, ref.IDSW)
    elapsed = time.perf_counter() - start
    criterion(10, elapsed < 10, f"{len(records)}-record round trip identical, relabeling invariant "
                                f"(IDF1 {ref.IDF1:.4f}, IDSW {ref.IDSW}), {elapsed:.2f} s")
    assert elapsed < 10
