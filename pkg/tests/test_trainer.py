import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fewshot_ssl.trainer as trainer_mod
from fewshot_ssl.augment import AugmentSpec
from fewshot_ssl.data import LabeledDataset
from fewshot_ssl.model import AugmentSet, MultiTaskModel
from fewshot_ssl.nn import EncoderConfig
from fewshot_ssl.rng import stream
from fewshot_ssl.tensor import Parameter
from fewshot_ssl.trainer import (
    CSV_HEADER,
    SGD,
    CsvMetricsSink,
    MissingGradientError,
    NonFiniteLossError,
    TrainConfig,
    decayed_parameter_names,
    epoch_batches,
    merge_meta_training,
    train,
)

CFG = EncoderConfig(3, 8, (4, 8), "plain_conv", 8)
NO_AUG = AugmentSet(AugmentSpec.none(), AugmentSpec.none(), AugmentSpec.hard(8))


def dataset(n=32, classes=4, seed=0, names=None):
    r = stream(seed, "ds")
    return LabeledDataset(r.random((n, 3, 8, 8)), np.arange(n) % classes,
                          names or [f"c{i}" for i in range(classes)], split="train")


def param(value, name="w"):
    p = Parameter(np.array([value], dtype=np.float64), name=name)
    return p


# -- SGD -----------------------------------------------------------------------


def test_vanilla_sgd_step():
    p = param(1.0)
    p.grad = np.array([1.0])
    SGD({"w": p}, lr=0.1, momentum=0.0, weight_decay=0.0).step()
    np.testing.assert_allclose(p.data, [0.9])
    assert p.grad is None


def test_zero_lr_keeps_parameters():
    p = Parameter(np.ones((2, 2)))
    opt = SGD({"fc.weight": p}, lr=0.0)
    p.grad = np.ones((2, 2))
    opt.step()
    np.testing.assert_array_equal(p.data, 1.0)


def test_momentum_unrolled_two_steps():
    p = param(0.0)
    opt = SGD({"w": p}, lr=0.1, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        p.grad = np.array([2.0])
        opt.step()
    np.testing.assert_allclose(p.data, [-0.1 * 2.0 * (1 + 1.9)])


def test_weight_decay_enters_velocity():
    p = Parameter(np.full((1, 1), 2.0))
    opt = SGD({"fc.weight": p}, lr=0.5, momentum=0.0, weight_decay=0.1)
    p.grad = np.zeros((1, 1))
    opt.step()
    np.testing.assert_allclose(p.data, [[2.0 - 0.5 * 0.2]])


def test_missing_gradient_is_an_error():
    p = param(1.0)
    with pytest.raises(MissingGradientError):
        SGD({"w": p}, lr=0.1).step()


def test_weight_decay_exclusion_set():
    m = MultiTaskModel(CFG, 4)
    params = m.online_parameters()
    decayed = decayed_parameter_names(params)
    excluded = set(params) - decayed
    assert decayed == {n for n in params if n.endswith(".weight") and params[n].ndim >= 2}
    assert all(params[n].ndim == 1 for n in excluded)
    assert "encoder.stage0.bn.weight" in excluded and "encoder.stage0.bn.bias" in excluded
    assert "classifier.bias" in excluded and "projector.bn0.weight" in excluded
    assert "encoder.stage0.conv.weight" in decayed and "classifier.weight" in decayed


# -- config and schedule -------------------------------------------------------


def test_step_schedule():
    cfg = TrainConfig(epochs=5, lr=0.05, decay_epochs=(2,), decay_factor=0.1)
    assert [cfg.lr_at(e) for e in (0, 1)] == [0.05, 0.05]
    assert cfg.lr_at(3) == 0.1 * 0.05
    three = TrainConfig(epochs=90, lr=0.05, decay_epochs=(45, 60, 75))
    assert three.lr_at(75) == 0.05 * 0.1**3


def test_presets():
    assert TrainConfig.preset("cifar_fs").decay_epochs == (45, 60, 75)
    byol = TrainConfig.preset("cifar_fs_byol")
    assert (byol.epochs, byol.decay_epochs, byol.tau, byol.batch_size) == (90, (60, 80), 0.99, 128)
    assert TrainConfig.preset("miniimagenet").epochs == 100
    with pytest.raises(ValueError):
        TrainConfig.preset("imagenet")


@pytest.mark.parametrize("bad", [
    dict(decay_epochs=(5, 3)), dict(decay_epochs=(10,)), dict(lr=0.0), dict(batch_size=1),
    dict(tau=1.0), dict(active_tasks="sup,jigsaw"), dict(view_policy="mixed"), dict(epochs=0),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**{"epochs": 10, **bad})


# -- merging and batching ------------------------------------------------------


def test_merge_disjoint_sets():
    a = dataset(9, 3, seed=1, names=["a0", "a1", "a2"])
    b = dataset(6, 3, seed=2, names=["b0", "b1", "b2"])
    m = merge_meta_training([a, b])
    assert m.num_classes == 6 and len(m) == 15
    np.testing.assert_array_equal(m.images[:9], a.images)
    assert [m.class_names[k] for k in m.labels[9:]] == [b.class_names[k] for k in b.labels]


def test_merge_single_is_identity():
    a = dataset(8, 4)
    m = merge_meta_training([a])
    np.testing.assert_array_equal(m.images, a.images)
    np.testing.assert_array_equal(m.labels, a.labels)
    assert m.class_names == a.class_names


def test_merge_shared_names_share_index():
    a = dataset(4, 2, names=["cat", "dog"])
    b = dataset(4, 2, names=["dog", "eel"])
    m = merge_meta_training([a, b])
    assert m.class_names == ["cat", "dog", "eel"]
    dog = m.class_names.index("dog")
    assert np.all(m.labels[[1, 3]] == dog) and np.all(m.labels[[4, 6]] == dog)


def test_merge_shape_mismatch():
    a = dataset(4, 2)
    b = LabeledDataset(np.zeros((2, 3, 4, 4)), [0, 1], ["x", "y"])
    with pytest.raises(ValueError, match="shape"):
        merge_meta_training([a, b])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(2, 64), st.integers(0, 99), st.integers(0, 9))
def test_epoch_batches_partition(n, bs, seed, epoch):
    batches = epoch_batches(n, bs, seed, epoch)
    allidx = np.concatenate(batches)
    assert len(batches) == -(-n // bs)
    np.testing.assert_array_equal(np.sort(allidx), np.arange(n))
    sizes = [len(b) for b in batches]
    assert max(sizes) - min(sizes) <= 1 and max(sizes) <= bs
    np.testing.assert_array_equal(allidx, np.concatenate(epoch_batches(n, bs, seed, epoch)))


# -- training loop -------------------------------------------------------------


def test_memorises_tiny_set():
    data = dataset(32, 4)
    model = MultiTaskModel(CFG, 4, seed=0)
    cfg = TrainConfig(epochs=200, batch_size=32, lr=0.05, decay_epochs=())
    res = train(cfg, data, model, augment=NO_AUG)
    assert res.records[-1].loss_total < 0.01
    assert res.records[-1].steps == 1


def test_training_is_deterministic(tmp_path):
    def run(out):
        cfg = TrainConfig(epochs=2, batch_size=8, decay_epochs=(1,), active_tasks="sup,rot,byol", seed=5)
        res = train(cfg, dataset(20, 4), MultiTaskModel(CFG, 4, seed=5), augment=AugmentSet.standard(8, 1),
                    output_dir=out)
        return res

    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    assert a.loss_curve() == b.loss_curve()
    assert a.loss_curve("byol") == b.loss_curve("byol")
    assert (tmp_path / "a/checkpoint_final.bin").read_bytes() == (tmp_path / "b/checkpoint_final.bin").read_bytes()


def test_ema_once_per_step_iff_byol(monkeypatch):
    calls = []
    real = trainer_mod.ema_update
    monkeypatch.setattr(trainer_mod, "ema_update", lambda m: calls.append(m.step) or real(m))
    data = dataset(20, 4)
    cfg = TrainConfig(epochs=2, batch_size=8, decay_epochs=(), active_tasks="sup,byol", view_policy="shared")
    res = train(cfg, data, MultiTaskModel(CFG, 4), augment=AugmentSet.standard(8, 1))
    assert calls == list(range(len(res.steps))) and len(res.steps) == 6
    calls.clear()
    train(TrainConfig(epochs=1, batch_size=8, decay_epochs=()), data, MultiTaskModel(CFG, 4))
    assert calls == []


def test_ema_follows_sgd_step():
    model = MultiTaskModel(CFG, 4)
    cfg = TrainConfig(epochs=1, batch_size=32, decay_epochs=(), tau=0.0, active_tasks="byol")
    train(cfg, dataset(32, 4), model, augment=AugmentSet.standard(8, 1))
    for (_, t), (_, o) in zip(model.target_encoder.named_parameters(), model.encoder.named_parameters()):
        np.testing.assert_array_equal(t.data, o.data)


def test_inactive_heads_untouched():
    model = MultiTaskModel(CFG, 4)
    before = model.rotation_head.state_dict()
    train(TrainConfig(epochs=1, batch_size=8, decay_epochs=()), dataset(16, 4), model)
    for k, v in model.rotation_head.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_view_counts_in_trace():
    data = dataset(16, 4)
    for policy, expect in (("shared", 2), ("separate", 3)):
        trace = []
        cfg = TrainConfig(epochs=1, batch_size=8, decay_epochs=(), active_tasks="sup,byol", view_policy=policy)
        train(cfg, data, MultiTaskModel(CFG, 4), augment=AugmentSet.standard(8, 1), trace=trace)
        assert {s.n_views for s in trace} == {expect}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    model = MultiTaskModel(CFG, 4)
    model.classifier.weight.data[0, 0] = np.inf
    cfg = TrainConfig(epochs=3, batch_size=8, decay_epochs=())
    with pytest.raises(NonFiniteLossError) as info:
        train(cfg, dataset(16, 4), model)
    err = info.value
    assert (err.epoch, err.step) == (0, 0)
    assert "supervised" in err.losses and "epoch 0, step 0" in str(err)


def test_csv_metrics_and_checkpoints(tmp_path):
    sink = CsvMetricsSink(tmp_path / "m.csv")
    cfg = TrainConfig(epochs=2, batch_size=8, decay_epochs=(1,), checkpoint_every=1, active_tasks="sup,rot")
    train(cfg, dataset(16, 4), MultiTaskModel(CFG, 4), sink=sink, output_dir=tmp_path)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "# fewshot-ssl train metrics v1"
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == CSV_HEADER
    assert [r[0] for r in rows[1:]] == ["0", "1"]
    assert float(rows[2][1]) == pytest.approx(0.005)
    assert rows[1][5] == "" and rows[1][4] != ""
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["epoch_0001.bin", "epoch_0002.bin"]
    assert (tmp_path / "checkpoint_final.bin").exists()


def test_class_count_mismatch():
    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1, decay_epochs=()), dataset(8, 4), MultiTaskModel(CFG, 5))
