import logging
from types import SimpleNamespace

import numpy as np
import pytest
from pydantic import ValidationError

from services import training
from services.datasets import Dataset, synth_dataset
from services.errors import ConfigError, DivergenceError
from services.models import build_model
from services.tensor_core import Tensor
from services.training import TrainConfig, evaluate, load_datasets, make_model, train


def test_zero_learning_rate_keeps_loss_constant():
    cfg = TrainConfig(lr=0.0, epochs=3, shuffle=False, samples=64)
    history = train(cfg, dtype="float64").history
    assert len(history) == 3
    assert history[0].loss == history[1].loss == history[2].loss


def test_zero_learning_rate_with_shuffling_keeps_weights():
    # с перемешиванием меняется только состав батчей, сами веса стоят на месте
    cfg = TrainConfig(lr=0.0, epochs=2, samples=64)
    trained = train(cfg, dtype="float64").model
    fresh = make_model(cfg, 4)
    for after, before in zip(trained.parameters(), fresh.parameters()):
        np.testing.assert_array_equal(after.data, before.data)


def test_single_sample_tail_batch_is_skipped(caplog):
    caplog.set_level(logging.DEBUG, logger="services.training")
    result = train(TrainConfig(epochs=1, samples=33, batch_size=32, eval_samples=8), dtype="float64")
    assert len(result.history) == 1
    assert "последний батч из 1 образца пропущен" in caplog.text


def test_bridge_attention_network_fits_synthetic_set():
    cfg = TrainConfig(model="toy3", attention="bav2", lr=0.01, epochs=50, samples=256, classes=4)
    result = train(cfg, dtype="float64")
    assert result.train_accuracy >= 0.99
    assert np.isfinite(result.history[-1].loss)


def test_bypassed_attention_still_converges():
    cfg = TrainConfig(model="toy3", attention="bav2", bypass_attention=True, lr=0.01, epochs=50)
    result = train(cfg, dtype="float64")
    assert result.train_accuracy >= 0.95
    assert result.history[-1].loss < result.history[0].loss


def test_training_is_deterministic():
    cfg = TrainConfig(model="toy2", epochs=2, samples=64, seed=3)
    first = train(cfg, dtype="float64").history
    second = train(cfg, dtype="float64").history
    assert first == second


def test_adam_reduces_loss():
    cfg = TrainConfig(model="toy2", optimizer="adam", lr=0.01, epochs=5, samples=64)
    history = train(cfg, dtype="float64").history
    assert history[-1].loss < history[0].loss


def test_transformer_trains_on_larger_images():
    cfg = TrainConfig(model="toyvit", integration="ba_block", image_size=16, epochs=2, samples=32, eval_samples=8)
    result = train(cfg, dtype="float64")
    assert len(result.history) == 2
    assert 0.0 <= result.eval_accuracy <= 1.0


def test_transformer_baseline_has_no_attention():
    model = make_model(TrainConfig(model="toyvit", attention="none", integration="ba_mlp"), 4)
    assert all(block.attention is None for block in model.stage.blocks)
    assert model.stage.bridges == []


def test_nan_inputs_abort_training(monkeypatch):
    def poisoned(*args):
        dataset = synth_dataset(*args)
        dataset.images[0, 0, 0, 0] = np.nan
        return dataset

    monkeypatch.setattr(training, "synth_dataset", poisoned)
    with pytest.raises(DivergenceError):
        train(TrainConfig(epochs=1, samples=32, shuffle=False), dtype="float64")


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.1)
    with pytest.raises(ValidationError):
        TrainConfig(lr=-1.0)
    path = tmp_path / "train.json"
    path.write_text('{"model": "toy4", "attention": "se", "epochs": 3}', encoding="utf-8")
    cfg = TrainConfig.from_json(path)
    assert (cfg.model, cfg.attention, cfg.epochs) == ("toy4", "se", 3)
    assert cfg.attention_config().variant == "se"
    assert TrainConfig(attention="none").attention_config() is None


def test_cifar_dataset_needs_path():
    with pytest.raises(ConfigError):
        load_datasets(TrainConfig(dataset="cifar10"))


class ConstantModel:
    def __init__(self, classes):
        self.classes = classes

    def __call__(self, x):
        return np.zeros((x.shape[0], self.classes))


class LabelReader:
    """
    Читает метку из первого пикселя изображения
    """

    def __call__(self, x):
        return np.eye(4)[x.data[:, 0, 0, 0].astype(int)]


def test_constant_logits_give_chance_accuracy():
    dataset = synth_dataset(seed=0, n=64, classes=4)
    assert evaluate(ConstantModel(4), dataset) == 0.25


def test_memorizing_model_scores_perfectly():
    labels = np.arange(20) % 4
    images = np.zeros((20, 3, 2, 2))
    images[:, 0, 0, 0] = labels
    assert evaluate(LabelReader(), Dataset(images, labels, 4), batch_size=6) == 1.0


def test_evaluate_matches_per_sample_loop():
    model = build_model("toy2", seed=5)
    dataset = synth_dataset(seed=5, n=40)
    model.eval()
    correct = sum(
        int(np.argmax(model(Tensor(dataset.images[i:i + 1])).data[0]) == dataset.labels[i])
        for i in range(len(dataset))
    )
    assert evaluate(model, dataset, batch_size=7) == correct / len(dataset)


def test_evaluate_rejects_empty_dataset():
    empty = SimpleNamespace(images=np.zeros((0, 3, 8, 8)), labels=np.zeros(0, dtype=np.int64))
    with pytest.raises(ConfigError):
        evaluate(ConstantModel(4), empty)
