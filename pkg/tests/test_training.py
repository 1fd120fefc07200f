# tests/test_training.py

import numpy as np
import pytest

from scene_text_pipeline.config import ModelConfig, PipelineConfig, TrainConfig
from scene_text_pipeline.metrics_logging.metrics_logger import read_loss_log
from scene_text_pipeline.nn.checkpoint import load_checkpoint
from scene_text_pipeline.nn.gradcheck import TINY_MODEL
from scene_text_pipeline.nn.model import CRNN
from scene_text_pipeline.services import imaging
from scene_text_pipeline.services.errors import NonFiniteValue, OutOfAlphabet, UsageError
from scene_text_pipeline.services.recognizer import Recognizer
from scene_text_pipeline.services.synthgen import LabelMap, RenderSpec, load_label_map, render_word
from scene_text_pipeline.services.training import Trainer, TrainingSample, load_samples
from scene_text_pipeline.tools.toy_benchmark import DEFAULT_CONFIG

OVERFIT_WORDS = ("cab", "bad", "hold", "rope", "text", "dial", "kiln", "zone")


@pytest.fixture
def dataset_labels(small_dataset):
    return load_label_map(small_dataset.root / "labels.tsv")


@pytest.fixture
def dataset_model(tiny_config, dataset_labels):
    config = tiny_config.model_copy(update={"num_classes": dataset_labels.num_classes})
    return CRNN.initialize(config, seed=2)


def test_load_samples(small_dataset, dataset_labels, tiny_config):
    samples = load_samples(small_dataset, dataset_labels, 16, tiny_config.min_width)
    assert len(samples) == 6
    assert all(s.image.shape[0] == 16 for s in samples)
    assert [dataset_labels.decode(s.target) for s in samples] == small_dataset.texts


def test_load_samples_rejects_unknown_characters(small_dataset):
    with pytest.raises(OutOfAlphabet):
        load_samples(small_dataset, LabelMap(("a",)), 16)


def test_overfits_a_single_word(f64, atlas):
    labels = LabelMap(("a", "b", "c"))
    config = ModelConfig(**{**TINY_MODEL, "batchnorm_after": [], "blstm_size": 8, "num_classes": labels.num_classes})
    image, target = render_word("cab", RenderSpec(), atlas, label_map=labels)
    image = imaging.resize_fixed_height(image, config.input_height)
    batch = [TrainingSample(image, target, "cab")] * 4

    model = CRNN.initialize(config, seed=0)
    trainer = Trainer(model, labels, TrainConfig(batch_size=4, eps=1e-3), seed=0)
    losses = [trainer.train_step(batch) for _ in range(400)]
    assert losses[-1] < 0.1 * losses[0]
    assert Recognizer(model, labels).recognize(image) == "cab"


@pytest.mark.slow
def test_overfits_one_batch_of_distinct_words(atlas):
    labels = LabelMap(tuple(sorted(set("".join(OVERFIT_WORDS)))))
    config = PipelineConfig.load(DEFAULT_CONFIG).model.model_copy(update={"num_classes": labels.num_classes})
    batch = []
    for word in OVERFIT_WORDS:
        image, target = render_word(word, RenderSpec(), atlas, label_map=labels)
        batch.append(TrainingSample(imaging.resize_fixed_height(image, config.input_height), target, word))

    trainer = Trainer(CRNN.initialize(config, seed=0), labels, TrainConfig(batch_size=8), seed=0)
    assert (trainer.config.rho, trainer.config.eps) == (0.95, 1e-6)
    losses = [trainer.train_step(batch) for _ in range(200)]
    assert None not in losses
    assert losses[-1] < 0.1 * losses[0]


def test_resume_is_bit_exact(tmp_path, small_dataset, dataset_labels, tiny_config):
    config = tiny_config.model_copy(update={"num_classes": dataset_labels.num_classes})
    samples = load_samples(small_dataset, dataset_labels, 16, config.min_width)
    train = TrainConfig(batch_size=2, epochs=2)

    straight = Trainer(CRNN.initialize(config, seed=9), dataset_labels, train, seed=3, out_dir=tmp_path / "a")
    summary = straight.run(samples)
    assert summary.batches == 6

    first = Trainer(CRNN.initialize(config, seed=9), dataset_labels, train.model_copy(update={"max_batches": 2}),
                    seed=3, out_dir=tmp_path / "b")
    assert first.run(samples).batches == 2
    checkpoint = load_checkpoint(tmp_path / "b" / "latest.ckpt")
    assert (checkpoint.get_int("train.epoch"), checkpoint.get_int("train.next_batch")) == (0, 2)

    resumed = Trainer(checkpoint.build_model(), checkpoint.label_map, train, seed=checkpoint.get_int("train.seed"),
                      state=checkpoint.optimizer_state(), out_dir=tmp_path / "b")
    resumed.run(samples, checkpoint.get_int("train.epoch"), checkpoint.get_int("train.next_batch"))

    assert read_loss_log(tmp_path / "b" / "loss_log.tsv") == read_loss_log(tmp_path / "a" / "loss_log.tsv")
    final_a = load_checkpoint(tmp_path / "a" / "latest.ckpt")
    final_b = load_checkpoint(tmp_path / "b" / "latest.ckpt")
    for name, tensor in final_a.tensors.items():
        np.testing.assert_array_equal(final_b.tensors[name], tensor)


def test_epoch_checkpoints(tmp_path, small_dataset, dataset_labels, dataset_model):
    samples = load_samples(small_dataset, dataset_labels, 16, dataset_model.config.min_width)
    trainer = Trainer(dataset_model, dataset_labels, TrainConfig(batch_size=3, epochs=2), seed=1, out_dir=tmp_path)
    summary = trainer.run(samples)
    assert [p.name for p in summary.checkpoints] == ["epoch_000.ckpt", "latest.ckpt", "epoch_001.ckpt", "latest.ckpt"]
    assert load_checkpoint(tmp_path / "latest.ckpt").get_int("train.epoch") == 2
    assert len(read_loss_log(tmp_path / "loss_log.tsv")) == 4


def test_epoch_order_is_seeded(dataset_model, dataset_labels):
    a = Trainer(dataset_model, dataset_labels, TrainConfig(), seed=5)
    b = Trainer(dataset_model, dataset_labels, TrainConfig(), seed=5)
    np.testing.assert_array_equal(a.epoch_order(3, 50), b.epoch_order(3, 50))
    assert not np.array_equal(a.epoch_order(0, 50), a.epoch_order(1, 50))
    assert sorted(a.epoch_order(2, 50)) == list(range(50))


def test_infeasible_targets_are_skipped(dataset_model, dataset_labels, rng):
    trainer = Trainer(dataset_model, dataset_labels, TrainConfig(), seed=0)
    narrow = TrainingSample(rng.uniform(size=(16, 8)), [1, 1, 1], "aaa")
    fine = TrainingSample(rng.uniform(size=(16, 40)), [1, 2], "ab")
    assert trainer.train_step([narrow]) is None
    assert trainer.skipped == 1
    assert trainer.train_step([narrow, fine]) is not None
    assert trainer.skipped == 2


def test_rnn_only_variant_trains(rng, dataset_labels):
    config = ModelConfig(variant="rnn-only", input_height=16, blstm_size=8, num_classes=dataset_labels.num_classes)
    trainer = Trainer(CRNN.initialize(config, seed=0), dataset_labels, TrainConfig(), seed=0)
    batch = [TrainingSample(rng.uniform(size=(16, 12)), [1, 2, 3], "abc")]
    assert np.isfinite(trainer.train_step(batch))


def test_non_finite_parameters_abort(dataset_model, dataset_labels, rng):
    dataset_model.params["conv1.weight"][0, 0, 0, 0] = np.nan
    trainer = Trainer(dataset_model, dataset_labels, TrainConfig(), seed=0)
    with pytest.raises(NonFiniteValue):
        trainer.train_step([TrainingSample(rng.uniform(size=(16, 30)), [1], "a")])


def test_label_count_must_match_model(dataset_model):
    with pytest.raises(UsageError):
        Trainer(dataset_model, LabelMap(("a",)), TrainConfig(), seed=0)


def test_no_samples(dataset_model, dataset_labels, tmp_path):
    with pytest.raises(UsageError):
        Trainer(dataset_model, dataset_labels, TrainConfig(), seed=0, out_dir=tmp_path).run([])
