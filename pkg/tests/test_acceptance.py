"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary block is written
to the terminal after the module finishes.
"""

import csv
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from fewshot_ssl import tensor as T
from fewshot_ssl.augment import AugmentSpec, rotate90, sample_rotations
from fewshot_ssl.data import LabeledDataset, generate_toy_corpus, ingest
from fewshot_ssl.episodic import EpisodeSpec, confidence_interval, evaluate, sample_episode
from fewshot_ssl.model import (
    AugmentSet,
    MultiTaskModel,
    byol_loss,
    byol_pair_loss,
    rotation_loss,
    supervised_loss,
    total_loss,
)
from fewshot_ssl.nn import EncoderConfig
from fewshot_ssl.rng import stream
from fewshot_ssl.trainer import (
    SGD,
    CsvMetricsSink,
    NonFiniteLossError,
    TrainConfig,
    epoch_batches,
    train,
    train_step,
)

RESULTS: dict[int, str] = {}


@contextmanager
def criterion(n: int, title: str):
    info: dict[str, str] = {}
    try:
        yield info
    except BaseException as exc:
        detail = info.get("measured", "")
        RESULTS[n] = f"criterion {n:2d} FAIL  {title}  {detail}  ({type(exc).__name__}: {str(exc).splitlines()[0][:120]})"
        raise
    RESULTS[n] = f"criterion {n:2d} PASS  {title}  {info.get('measured', '')}"


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    rep = request.config.pluginmanager.getplugin("terminalreporter")
    lines = [RESULTS.get(n, f"criterion {n:2d} NOT RUN") for n in range(1, 11)]
    text = "\n".join(["", "acceptance summary", *lines])
    if rep is not None:
        rep.write_line(text)
    else:
        print(text)


# -- 1. gradient oracle --------------------------------------------------------


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    # biases feeding batch norm have an exactly zero gradient; the floor keeps
    # central-difference round-off (~1e-11) from reading as a mismatch there
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / denom)


def numeric(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        hi = f()
        x[i] = old - h
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * h)
    return g


def check(build, inputs) -> float:
    """Largest relative error between analytic and central-difference grads."""
    assert sum(t.size for t in inputs) <= 10_000
    for t in inputs:
        t.grad = None
    T.backward(build())
    worst = 0.0
    for t in inputs:
        num = numeric(lambda: float(build().data), t.data)
        assert t.grad is not None
        worst = max(worst, rel_err(t.grad, num))
    return worst


def op_cases(r):
    def leaf(*shape):
        return T.Tensor(r.standard_normal(shape), requires_grad=True)

    def probe(shape):
        return T.Tensor(r.standard_normal(shape))

    a, b, v = leaf(3, 4), leaf(3, 4), leaf(4)
    m1, m2 = leaf(3, 5), leaf(5, 2)
    x4, w4, b4 = leaf(2, 2, 5, 5), leaf(3, 2, 3, 3), leaf(3)
    p4 = leaf(2, 2, 4, 6)
    bn_x, bn_g, bn_b = leaf(3, 2, 3, 3), leaf(2), leaf(2)
    z, y = leaf(5, 4), np.array([0, 3, 1, 1, 2])
    pc = probe((2, 3, 3, 3))
    pp = probe((2, 2, 2, 3))
    pb = probe((3, 2, 3, 3))
    pl = probe((3, 4))
    pr = probe((6, 2))
    return {
        "add": (lambda: T.sum(T.add(a, v) * b), [a, b, v]),
        "sub": (lambda: T.sum(T.sub(a, v) * b), [a, b, v]),
        "mul": (lambda: T.sum(T.mul(a, b) * a), [a, b]),
        "neg": (lambda: T.sum(T.neg(a) * b), [a, b]),
        "div_const": (lambda: T.sum(a / 3.0 * b), [a, b]),
        "matmul": (lambda: T.sum(T.matmul(m1, m2) * T.matmul(m1, m2)), [m1, m2]),
        "transpose": (lambda: T.sum(T.transpose(a) @ b), [a, b]),
        "reshape": (lambda: T.sum(T.reshape(a, (6, 2)) * pr), [a]),
        "concat": (lambda: T.sum(T.concat([a, b], axis=1) * T.concat([b, a], axis=1)), [a, b]),
        "sum": (lambda: T.sum(T.sum(a, axis=0) * T.sum(b, axis=0)), [a, b]),
        "mean": (lambda: T.sum(T.mean(a, axis=1, keepdims=True) * b), [a, b]),
        "relu": (lambda: T.sum(T.relu(a) * b), [a, b]),
        "conv2d": (lambda: T.sum(T.conv2d(x4, w4, b4, stride=2, padding=1) * pc), [x4, w4, b4]),
        "max_pool2d": (lambda: T.sum(T.max_pool2d(p4, 2) * pp), [p4]),
        "avg_pool2d": (lambda: T.sum(T.avg_pool2d(p4, 2) * pp), [p4]),
        "batch_norm": (lambda: T.sum(T.batch_norm(bn_x, bn_g, bn_b, np.zeros(2), np.ones(2), True) * pb),
                       [bn_x, bn_g, bn_b]),
        "log_softmax": (lambda: T.sum(T.log_softmax(z) * T.Tensor(np.arange(20.0).reshape(5, 4))), [z]),
        "softmax_cross_entropy": (lambda: T.softmax_cross_entropy(z, y), [z]),
        "l2_normalize": (lambda: T.sum(T.l2_normalize(a, axis=1) * pl), [a]),
        "mse": (lambda: T.mse(a, b), [a, b]),
    }


def test_criterion_01_gradient_oracle():
    with criterion(1, "analytic gradients match central differences (rel err <= 1e-3, < 1 min)") as info:
        t0 = time.perf_counter()
        worst = {}
        with T.default_dtype(np.float64):
            for name, (build, inputs) in op_cases(np.random.default_rng(0)).items():
                worst[name] = check(build, inputs)
            x = stream(0, "gc").random((4, 3, 8, 8))
            y = np.array([0, 1, 2, 0])
            for kind in ("plain_conv", "residual"):
                m = MultiTaskModel(EncoderConfig(3, 8, (4, 8), kind, 8), 3, seed=0)
                flipped = x[:, :, ::-1, :].copy()
                losses = {
                    "supervised": lambda: supervised_loss(m, x, y),
                    "rotation": lambda: rotation_loss(m, x, stream(0, "rot"))[0],
                    "byol": lambda: byol_loss(m, x, flipped),
                }
                for task, build in losses.items():
                    params = list(m.online_parameters([task]).values())
                    worst[f"{kind} {task}"] = check(build, params)
        elapsed = time.perf_counter() - t0
        top = max(worst, key=worst.get)
        info["measured"] = f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} checks in {elapsed:.1f}s"
        assert all(e <= 1e-3 for e in worst.values()), worst
        assert elapsed < 60


# -- 2. BYOL loss identity -----------------------------------------------------


def test_criterion_02_byol_identity():
    with criterion(2, "BYOL per-pair loss = 2 - 2 cos, bounded, no target gradient") as info:
        r = stream(2, "pairs")
        p, z = r.standard_normal((1000, 16)), r.standard_normal((1000, 16))
        z[:10] = 5.0 * p[:10]  # aligned
        z[10:20] = -p[10:20]  # opposite
        with T.default_dtype(np.float64):
            got = byol_pair_loss(T.Tensor(p), T.Tensor(z)).data
        cos = (p * z).sum(1) / (np.linalg.norm(p, axis=1) * np.linalg.norm(z, axis=1))
        err = float(np.max(np.abs(got - (2 - 2 * cos))))
        assert err <= 1e-6
        assert got.min() >= 0.0 and got.max() <= 4.0

        m = MultiTaskModel(EncoderConfig(3, 8, (4, 8), "plain_conv", 8), 3, seed=0)
        x = stream(2, "img").random((6, 3, 8, 8)).astype(np.float32)
        T.backward(byol_loss(m, x, x[:, :, :, ::-1].copy()))
        target_norm = math.sqrt(sum(0.0 if q.grad is None else float(np.sum(q.grad**2))
                                    for q in m.target_parameters().values()))
        online_norm = math.sqrt(sum(float(np.sum(q.grad**2)) for q in m.encoder.parameters()))
        info["measured"] = f"max |err| {err:.1e}, range [{got.min():.3f}, {got.max():.3f}], target grad norm {target_norm}"
        assert target_norm == 0.0 and online_norm > 0.0


# -- 3. EMA exactness ----------------------------------------------------------


def ema_after_one_step(tau: float):
    r = stream(3, "data")
    data = LabeledDataset(r.random((16, 3, 8, 8)), np.arange(16) % 4, [f"c{i}" for i in range(4)])
    m = MultiTaskModel(EncoderConfig(3, 8, (4, 8), "plain_conv", 8), 4, tau=tau, seed=3)
    old = {n: p.data.copy() for n, p in m.target_parameters().items()}
    cfg = TrainConfig(epochs=1, batch_size=16, decay_epochs=(), active_tasks="sup,byol", tau=tau, seed=3)
    res = train(cfg, data, m, augment=AugmentSet.standard(8, 1))
    assert len(res.steps) == 1
    online = dict(m.encoder.named_parameters("target_encoder."))
    online.update(m.projector.named_parameters("target_projector."))
    return old, {n: p.data.copy() for n, p in m.target_parameters().items()}, {n: p.data for n, p in online.items()}


def test_criterion_03_ema_exactness():
    with criterion(3, "EMA target = tau*old + (1-tau)*online, bitwise; tau=0 copies") as info:
        old, new, online = ema_after_one_step(0.99)
        for n in new:
            expect = (0.99 * old[n] + (1 - 0.99) * online[n]).astype(new[n].dtype)
            np.testing.assert_array_equal(new[n], expect)
        _, again, _ = ema_after_one_step(0.99)
        for n in new:
            np.testing.assert_array_equal(new[n], again[n])
        moved = max(float(np.max(np.abs(new[n] - old[n]))) for n in new)
        _, copy, online0 = ema_after_one_step(0.0)
        for n in copy:
            np.testing.assert_array_equal(copy[n], online0[n])
        info["measured"] = f"{len(new)} target tensors bitwise equal to the formula (max move {moved:.2e}); tau=0 exact copy"


# -- 4. additivity -------------------------------------------------------------


def test_criterion_04_additivity():
    with criterion(4, "total = sum of task losses (1e-7); encoder grad = sum of task grads (1e-6)") as info:
        cfg = EncoderConfig(3, 8, (4, 8), "plain_conv", 8)
        x = stream(4, "img").random((8, 3, 8, 8))
        y = np.arange(8) % 4
        aug = AugmentSet.standard(8, 1)
        tasks = ("supervised", "rotation", "byol")

        def run(active):
            m = MultiTaskModel(cfg, 4, seed=4)
            out = total_loss(m, x, y, active, "separate", aug, seed=4, epoch=1, step=2)
            T.backward(out.total)
            return float(out.total.data), {n: p.grad.copy() for n, p in m.encoder.named_parameters()}

        with T.default_dtype(np.float64):
            joint, g_joint = run(set(tasks))
            parts = [run({t}) for t in tasks]
        loss_err = abs(joint - sum(p[0] for p in parts))
        grad_err = max(float(np.max(np.abs(g_joint[n] - sum(p[1][n] for p in parts)))) for n in g_joint)
        info["measured"] = f"loss diff {loss_err:.1e}, max encoder grad diff {grad_err:.1e}"
        assert loss_err <= 1e-7
        assert grad_err <= 1e-6


# -- 5. episodic protocol ------------------------------------------------------


def test_criterion_05_episodic_protocol(tmp_path):
    with criterion(5, "10k episodes: disjoint, 25/75, class frequency 0.25 +- 0.01, CI formula") as info:
        t0 = time.perf_counter()
        manifest = generate_toy_corpus(tmp_path, n_classes=20, per_class=20, size=8, split=(0, 0, 20), seed=5)
        ds = ingest(manifest)["test"]
        assert ds.num_classes == 20
        spec = EpisodeSpec(5, 5, 15)
        by_class = ds.indices_by_class()
        counts = np.zeros(20)
        overlaps = 0
        for i in range(10_000):
            ep = sample_episode(ds, spec, stream(5, "episode", i), by_class)
            overlaps += len(np.intersect1d(ep.support, ep.query))
            assert ep.support.size == 25 and ep.query.size == 75
            assert np.all(np.bincount(ep.support_labels, minlength=5) == 5)
            assert np.all(np.bincount(ep.query_labels, minlength=5) == 15)
            assert np.all(ds.labels[ep.support] == ep.class_map[ep.support_labels])
            assert np.all(ds.labels[ep.query] == ep.class_map[ep.query_labels])
            counts[ep.class_map] += 1
        freq = counts / 10_000
        accs = [80.0, 90.0, 100.0, 72.5, 64.0]
        by_hand = 1.96 * math.sqrt(sum((a - 81.3) ** 2 for a in accs) / 4) / math.sqrt(5)
        ci_err = abs(confidence_interval(accs) - by_hand)
        elapsed = time.perf_counter() - t0
        info["measured"] = (f"overlaps {overlaps}, freq [{freq.min():.4f}, {freq.max():.4f}], "
                            f"CI err {ci_err:.1e}, {elapsed:.1f}s")
        assert overlaps == 0
        assert np.all(np.abs(freq - 0.25) <= 0.01)
        assert ci_err <= 1e-9
        assert elapsed < 60


# -- 6 and 7. chance baseline and end-to-end learning signal ------------------

E2E_ENCODER = EncoderConfig(3, 32, (16, 32, 64, 64), "plain_conv", 64)
E2E_EPOCHS = 60
E2E_EPISODES = EpisodeSpec(5, 5, 15, 250, seed=1)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_toy")
    manifest = generate_toy_corpus(root, n_classes=15, per_class=60, size=32, split=(8, 2, 5), seed=0)
    return ingest(manifest)


def e2e_train(data, tasks: str, policy: str):
    model = MultiTaskModel(E2E_ENCODER, data["train"].num_classes, seed=0)
    cfg = TrainConfig(epochs=E2E_EPOCHS, batch_size=64, lr=0.05, decay_epochs=(42,), active_tasks=tasks,
                      view_policy=policy, seed=0)
    t0 = time.perf_counter()
    res = train(cfg, data["train"], model, augment=AugmentSet.standard(32, 4))
    wall = time.perf_counter() - t0
    report = evaluate(model.encoder, data["test"], E2E_EPISODES, data["train"].class_names)
    return res, wall, report


def interleaved_step_ratio(data, pairs: int = 24) -> float:
    """Median step time of sup+BYOL (shared views) over supervised alone.

    Steps of the two set-ups alternate on the same batches, so machine load
    affects both alike.
    """
    runs = []
    for tasks, policy in (("sup", "separate"), ("sup,byol", "shared")):
        cfg = TrainConfig(epochs=1, batch_size=64, decay_epochs=(), active_tasks=tasks, view_policy=policy, seed=0)
        model = MultiTaskModel(E2E_ENCODER, data.num_classes, seed=0)
        opt = SGD(model.online_parameters(cfg.active_tasks), cfg.lr, cfg.momentum, cfg.weight_decay)
        runs.append((model, opt, cfg, []))
    aug = AugmentSet.standard(32, 4)
    batches = epoch_batches(len(data), 64, 0, 0)
    for i in range(pairs + 2):
        for model, opt, cfg, times in runs:
            rec = train_step(model, opt, cfg, data, batches[i % len(batches)], 0, i, aug)
            if i >= 2:  # warm-up
                times.append(rec.seconds)
    return float(np.median(runs[1][3]) / np.median(runs[0][3]))


@pytest.fixture(scope="module")
def supervised_run(toy):
    return e2e_train(toy, "sup", "separate")


def test_criterion_06_chance_baseline(toy):
    with criterion(6, "fresh encoder, 250 5-way episodes: |mean - 20| <= CI95") as info:
        fresh = MultiTaskModel(E2E_ENCODER, toy["train"].num_classes, seed=0)
        rep = evaluate(fresh.encoder, toy["test"], E2E_EPISODES, toy["train"].class_names)
        info["measured"] = f"{rep.mean_accuracy:.2f}% +- {rep.ci95:.2f}"
        assert abs(rep.mean_accuracy - 20.0) <= rep.ci95


def test_criterion_07_learning_signal(toy, supervised_run):
    with criterion(7, "supervised >= 60% in <= 10 min; sup+BYOL shared <= 1.6x step time, drop <= CI") as info:
        res, wall, sup = supervised_run
        byol_res, _, byol = e2e_train(toy, "sup,byol", "shared")
        ratio = interleaved_step_ratio(toy["train"])
        drop = sup.mean_accuracy - byol.mean_accuracy
        info["measured"] = (f"sup {sup.mean_accuracy:.2f}% +- {sup.ci95:.2f} in {wall:.0f}s; "
                            f"sup+byol {byol.mean_accuracy:.2f}% +- {byol.ci95:.2f}; "
                            f"step ratio {ratio:.2f}; drop {drop:.2f}")
        assert wall <= 600
        assert sup.mean_accuracy >= 60.0
        assert ratio <= 1.6
        assert drop <= byol.ci95
        assert all(math.isfinite(v) for v in byol_res.loss_curve("byol"))


# -- 8. rotation group ---------------------------------------------------------


def test_criterion_08_rotation_group():
    with criterion(8, "rotate90 composition = mod-4 addition; label frequencies in [0.24, 0.26]") as info:
        for seed in range(5):
            x = stream(8, "img", seed).random((3, 7, 7))
            for a in range(4):
                for b in range(4):
                    np.testing.assert_array_equal(rotate90(rotate90(x, a), b), rotate90(x, (a + b) % 4))
        labels = sample_rotations(stream(8, "rotation"), 40_000)
        freq = np.bincount(labels, minlength=4) / labels.size
        info["measured"] = f"80 compositions exact; frequencies {np.round(freq, 4).tolist()}"
        assert labels.min() >= 0 and labels.max() <= 3
        assert np.all((freq >= 0.24) & (freq <= 0.26))


# -- 9. determinism ------------------------------------------------------------


def test_criterion_09_determinism(tmp_path, toy):
    with criterion(9, "identical seeds reproduce loss curves, checkpoints and EvalReports bitwise") as info:
        cfg_enc = EncoderConfig(3, 32, (8, 16, 16, 16), "plain_conv", 16)

        def run(out):
            m = MultiTaskModel(cfg_enc, toy["train"].num_classes, seed=9)
            cfg = TrainConfig(epochs=2, batch_size=64, decay_epochs=(1,), active_tasks="sup,rot,byol",
                              view_policy="separate", seed=9)
            res = train(cfg, toy["train"], m, augment=AugmentSet.standard(32, 4), output_dir=out)
            rep = evaluate(m.encoder, toy["test"], EpisodeSpec(5, 5, 15, 20, seed=9), toy["train"].class_names,
                           checkpoint_id="final")
            return res, rep

        (ra, ea), (rb, eb) = run(tmp_path / "a"), run(tmp_path / "b")
        curves = all(ra.loss_curve(t) == rb.loss_curve(t) for t in ("total", "supervised", "rotation", "byol"))
        ck = (tmp_path / "a/checkpoint_final.bin").read_bytes() == (tmp_path / "b/checkpoint_final.bin").read_bytes()
        info["measured"] = f"curves equal {curves}, checkpoints equal {ck}, reports equal {ea.to_json() == eb.to_json()}"
        assert curves and ck
        assert ea == eb and ea.to_json() == eb.to_json()


# -- 10. supervised without augmentation plus BYOL ----------------------------


def test_criterion_10_unaugmented_supervised_with_byol(tmp_path, toy):
    with criterion(10, "no-augmentation supervised + BYOL: both curves logged, finite or aborted") as info:
        aug = AugmentSet(AugmentSpec.none(), AugmentSpec.default(32, 4), AugmentSpec.hard(32))
        m = MultiTaskModel(E2E_ENCODER, toy["train"].num_classes, seed=10)
        epochs = 8
        cfg = TrainConfig(epochs=epochs, batch_size=64, decay_epochs=(6,), active_tasks="sup,byol",
                          view_policy="separate", seed=10)
        sink = CsvMetricsSink(tmp_path / "metrics.csv")
        try:
            train(cfg, toy["train"], m, sink=sink, augment=aug)
            aborted = None
        except NonFiniteLossError as exc:
            aborted = exc
        rows = list(csv.DictReader((tmp_path / "metrics.csv").read_text().splitlines()[1:]))
        sup = [float(r["loss_sup"]) for r in rows]
        byol = [float(r["loss_byol"]) for r in rows]
        if aborted is None:
            assert len(rows) == epochs
            assert all(math.isfinite(v) for v in sup + byol)
        else:
            assert aborted.epoch == len(rows)
        info["measured"] = f"{len(rows)} epochs logged" + (" then aborted" if aborted else "")
        if rows:
            info["measured"] += f"; sup {sup[0]:.3f}->{sup[-1]:.3f}, byol {byol[0]:.3f}->{byol[-1]:.3f}"
