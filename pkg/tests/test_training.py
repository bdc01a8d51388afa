import csv

import numpy as np
import pytest

from uncspan import data, nn, training
from uncspan.attacks import AttackConfig
from uncspan.errors import ConfigError, InputError, TrainingDiverged
from uncspan.nn import ModelParams
from uncspan.training import TrainConfig


@pytest.fixture(scope="module")
def overlap_train():
    return data.sample(data.default_spec(), 2000, seed=1)


def test_zero_learning_rate_returns_init(overlap_train):
    init = nn.init_params([2, 8, 2], seed=3)
    params, log = training.train(init, overlap_train, TrainConfig(epochs=3, learning_rate=0.0))
    assert params == init
    assert len(log) == 3


def test_zero_epochs(overlap_train):
    init = nn.init_params([2, 8, 2], seed=3)
    params, log = training.train(init, overlap_train, TrainConfig(epochs=0))
    assert params == init and log == []


def test_init_not_mutated(overlap_train):
    init = nn.init_params([2, 8, 2], seed=3)
    snapshot = init.flat().copy()
    training.train(init, overlap_train, TrainConfig(epochs=2))
    np.testing.assert_array_equal(init.flat(), snapshot)


def test_separable_blobs_fit():
    spec = data.blob_spec(separation=3.0, sigma=0.1)
    ds = data.sample(spec, 2000, seed=0)
    params, _ = training.train(nn.init_params([2, 16, 2], seed=1), ds, TrainConfig(epochs=20, seed=2))
    test = data.sample(spec, 1000, seed=5)
    assert training.accuracy(params, test) >= 0.99


def test_adversarial_zero_budget_equals_standard(overlap_train):
    init = nn.init_params([2, 8, 8, 2], seed=4)
    std, log_s = training.train(init, overlap_train, TrainConfig(epochs=3, seed=9))
    adv_cfg = TrainConfig(epochs=3, seed=9, mode="adversarial", inner_attack=training.inner_attack_config(0.0))
    adv, log_a = training.train(init, overlap_train, adv_cfg)
    assert adv == std
    assert log_a == log_s


def test_deterministic(overlap_train):
    init = nn.init_params([2, 8, 2], seed=4)
    cfg = TrainConfig(epochs=2, seed=1, mode="adversarial", inner_attack=training.inner_attack_config(0.1, 3))
    assert training.train(init, overlap_train, cfg)[0] == training.train(init, overlap_train, cfg)[0]


def test_adversarial_changes_solution(overlap_train):
    init = nn.init_params([2, 8, 2], seed=4)
    std, _ = training.train(init, overlap_train, TrainConfig(epochs=2, seed=1))
    adv_cfg = TrainConfig(epochs=2, seed=1, mode="adversarial", inner_attack=training.inner_attack_config(0.25))
    adv, _ = training.train(init, overlap_train, adv_cfg)
    assert adv != std


def test_accuracies():
    const = ModelParams(((np.zeros((2, 2)), np.zeros(2)),), ())
    # ties go to class 0, so a constant model scores the class-0 frequency
    ds = data.LabeledDataset(np.zeros((10, 2)), [0, 1] * 5, 2)
    assert training.accuracy(const, ds) == 0.5
    m = nn.init_params([2, 8, 2], seed=0)
    test = data.sample(data.default_spec(), 300, seed=2)
    clean = training.accuracy(m, test)
    assert training.robust_accuracy(m, test, AttackConfig(0.0)) == clean
    assert training.robust_accuracy(m, test, AttackConfig(0.25, steps=10)) <= clean


def test_divergence(overlap_train):
    init = nn.init_params([2, 8, 2], seed=4)
    with pytest.raises(TrainingDiverged) as info:
        training.train(init, overlap_train, TrainConfig(epochs=50, learning_rate=1e300, momentum=0.0))
    assert info.value.epoch >= 1


def test_log_csv(tmp_path, overlap_train):
    _, log = training.train(nn.init_params([2, 4, 2], seed=0), overlap_train, TrainConfig(epochs=4))
    training.write_log(log, tmp_path / "log.csv")
    with open(tmp_path / "log.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "mean_loss", "clean_acc"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
    assert all(isinstance(e["mean_loss"], float) for e in log)
    assert float(rows[1][1]) == log[0]["mean_loss"]


def test_loss_decreases(overlap_train):
    _, log = training.train(nn.init_params([2, 16, 2], seed=0), overlap_train, TrainConfig(epochs=10))
    assert log[-1]["mean_loss"] < log[0]["mean_loss"]


@pytest.mark.parametrize(
    "kwargs, field",
    [
        ({"mode": "robust"}, "mode"),
        ({"mode": "adversarial"}, "inner_attack"),
        ({"batch_size": 0}, "batch_size"),
        ({"momentum": 1.0}, "momentum"),
        ({"learning_rate": -1.0}, "learning_rate"),
    ],
)
def test_config_validation(kwargs, field):
    with pytest.raises(ConfigError, match=field):
        TrainConfig(**kwargs)


def test_label_range():
    ds = data.LabeledDataset(np.zeros((2, 2)), [0, 2], 3)
    with pytest.raises(InputError):
        training.train(nn.init_params([2, 2]), ds, TrainConfig(epochs=1))
