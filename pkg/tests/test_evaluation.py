"""Change metrics, the toy detector and the zero-shot harness."""

import csv
import io
import json
import random

import numpy as np
import pytest
import torch

from pychangen.datagen import generate_dataset
from pychangen.errors import CheckpointError, DimensionError, LeakageError, ParameterError
from pychangen.evaluation import (
    BinaryChangeMetrics,
    SweepResult,
    SweepRow,
    _augment,
    compute_batch_metrics,
    compute_metrics,
    d4_transform,
    dataset_coherence,
    evaluate_detector,
    lambda_sweep,
    load_detector,
    load_pairs,
    pretrain_detector,
    random_baselines,
    save_detector,
    unchanged_region_mae,
    zero_shot_eval,
)
from pychangen.events import EventSpec
from pychangen.models.detector import DetectorConfig, SiameseChangeDetector
from pychangen.procedural import SceneSpec
from pychangen.sampler import GuidanceConfig
from pychangen.scene import ChangeMask

SCENES = SceneSpec(height=16, width=16, num_classes=2, object_count_range=(1, 3),
                   object_size_range=(3, 6))
EVENTS = [EventSpec.remove(0.5), EventSpec.create(0.5)]
SMALL_DETECTOR = DetectorConfig(width=4, depth=1, steps=3, batch_size=2, log_every=1)


@pytest.fixture
def datasets(tmp_path, semantic_checkpoint):
    """Two-sample training set and a one-sample held-out set with disjoint scene seeds."""
    guidance = GuidanceConfig(0.5, 4)
    train = generate_dataset(tmp_path, 2, SCENES, EVENTS, guidance, semantic_checkpoint,
                             name="train")
    heldout = generate_dataset(tmp_path, 1, SCENES, EVENTS, guidance, semantic_checkpoint,
                               scene_seed_offset=2, root_seed=1, name="heldout")
    return tmp_path / train.name, tmp_path / heldout.name


class TestMetrics:
    def test_worked_example(self):
        pred = np.array([[1, 0], [0, 0]])
        truth = np.array([[1, 1], [0, 0]])
        m = compute_metrics(pred, truth)
        assert (m.tp, m.fp, m.fn, m.tn) == (1, 0, 1, 2)
        assert m.precision == 1.0
        assert m.recall == 0.5
        assert m.f1 == pytest.approx(2 / 3)
        assert m.iou == pytest.approx(0.5)

    def test_f1_iou_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pred = rng.random((8, 8)) < 0.4
            truth = rng.random((8, 8)) < 0.3
            m = compute_metrics(pred, truth)
            if m.tp:
                assert m.f1 == pytest.approx(2 * m.iou / (1 + m.iou))

    def test_no_positives(self):
        m = compute_metrics(np.zeros((3, 3)), np.zeros((3, 3)))
        assert m.f1 == m.precision == m.recall == m.iou == 0.0
        assert m.tn == 9

    def test_accepts_change_masks(self):
        truth = ChangeMask(np.eye(4, dtype=np.uint8))
        assert compute_metrics(truth, truth).f1 == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            compute_metrics(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_micro_average_pools_counts(self):
        a = (np.array([[1, 1]]), np.array([[1, 1]]))
        b = (np.array([[0, 0, 0, 0]]), np.array([[1, 1, 1, 1]]))
        pooled = compute_batch_metrics([a, b])
        assert pooled == BinaryChangeMetrics(tp=2, fp=0, fn=4, tn=0)
        assert pooled.f1 == pytest.approx(0.5)

    def test_order_invariant(self):
        rng = np.random.default_rng(1)
        pairs = [(rng.random((6, 6)) < 0.5, rng.random((6, 6)) < 0.2) for _ in range(10)]
        shuffled = list(pairs)
        random.Random(0).shuffle(shuffled)
        assert compute_batch_metrics(pairs) == compute_batch_metrics(shuffled)

    def test_random_baselines(self):
        truths = [np.zeros((10, 10)) for _ in range(4)]
        truths[0][:5, :4] = 1
        out = random_baselines(truths)
        p = 20 / 400
        assert out["prevalence"] == pytest.approx(p)
        assert out["all_ones_f1"] == pytest.approx(2 * p / (1 + p))
        assert 0.0 <= out["bernoulli_f1"] <= 1.0

    def test_unchanged_region_mae(self):
        pre = np.zeros((2, 2, 3), dtype=np.uint8)
        post = np.full((2, 2, 3), 10, dtype=np.uint8)
        change = np.array([[1, 0], [0, 0]])
        total, count = unchanged_region_mae(pre, post, change)
        assert (total, count) == (90.0, 9)


class TestAugmentation:
    def test_d4_elements_distinct(self):
        x = torch.arange(16.0).reshape(1, 4, 4)
        images = [d4_transform(x, k) for k in range(8)]
        assert len({tuple(im.flatten().tolist()) for im in images}) == 8
        assert torch.equal(images[0], x)

    def test_labels_follow_images(self):
        gen = torch.Generator().manual_seed(0)
        t0 = torch.randn(6, 3, 8, 8, generator=gen)
        t1 = torch.randn(6, 3, 8, 8, generator=gen)
        label = (t1[:, :1] > t0[:, :1]).float()
        a0, a1, al = _augment(t0, t1, label, gen)
        assert torch.equal(al, (a1[:, :1] > a0[:, :1]).float())

    def test_non_square_keeps_shape(self):
        gen = torch.Generator().manual_seed(1)
        t = torch.randn(4, 3, 8, 12)
        a0, _, al = _augment(t, t, t[:, :1], gen)
        assert a0.shape == t.shape
        assert al.shape == (4, 1, 8, 12)


class TestDetector:
    def test_output_shape(self):
        model = SiameseChangeDetector(DetectorConfig(width=4, depth=2))
        out = model(torch.zeros(2, 3, 16, 16), torch.zeros(2, 3, 16, 16))
        assert out.shape == (2, 1, 16, 16)

    def test_depth_zero(self):
        model = SiameseChangeDetector(DetectorConfig(width=4, depth=0))
        assert model(torch.zeros(1, 3, 5, 7), torch.zeros(1, 3, 5, 7)).shape == (1, 1, 5, 7)

    def test_rejects_indivisible(self):
        model = SiameseChangeDetector(DetectorConfig(width=4, depth=2))
        with pytest.raises(DimensionError):
            model(torch.zeros(1, 3, 10, 10), torch.zeros(1, 3, 10, 10))
        with pytest.raises(DimensionError):
            model(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 16, 16))

    def test_save_load(self, tmp_path):
        torch.manual_seed(0)
        model = SiameseChangeDetector(DetectorConfig(width=4, depth=1)).eval()
        save_detector(tmp_path / "d.pt", model, {"scene_seeds": [1, 2]})
        loaded, extra = load_detector(tmp_path / "d.pt")
        x = torch.randn(1, 3, 8, 8)
        assert torch.equal(model(x, -x), loaded(x, -x))
        assert extra == {"scene_seeds": [1, 2]}

    def test_load_rejects_foreign_file(self, tmp_path):
        torch.save({"header": "something-else"}, tmp_path / "d.pt")
        with pytest.raises(CheckpointError):
            load_detector(tmp_path / "d.pt")
        with pytest.raises(CheckpointError):
            load_detector(tmp_path / "missing.pt")


class TestHarness:
    def test_load_pairs(self, datasets):
        pairs, manifest = load_pairs(datasets[0])
        assert len(pairs) == 2
        assert pairs.t0.shape == (2, 3, 16, 16)
        assert set(pairs.labels.unique().tolist()) <= {0.0, 1.0}
        assert manifest.name == "train"

    def test_pretrain_writes_artifacts(self, datasets, tmp_path):
        result = pretrain_detector(datasets[0], SMALL_DETECTOR, out_dir=tmp_path / "det")
        assert [s for s, _ in result.losses] == [0, 1, 2]
        assert (tmp_path / "det" / "detector.pt").exists()
        assert (tmp_path / "det" / "loss.png").exists()
        curve = json.loads((tmp_path / "det" / "loss.json").read_text())
        assert len(curve) == 3
        _, extra = load_detector(tmp_path / "det" / "detector.pt")
        assert extra["scene_seeds"] == [0, 1]

    def test_zero_shot(self, datasets, tmp_path):
        train_dir, heldout_dir = datasets
        pretrain_detector(train_dir, SMALL_DETECTOR, out_dir=tmp_path / "det")
        report = zero_shot_eval(tmp_path / "det" / "detector.pt", heldout_dir)
        assert report.dataset == "heldout"
        assert 0.0 <= report.metrics.f1 <= 1.0
        assert report.metrics.tp + report.metrics.fp + report.metrics.fn + report.metrics.tn \
            == 16 * 16
        assert "Zero-shot on heldout" in report.get_summary()
        assert set(report.to_dict()) == {"dataset", "metrics", "baselines"}

    def test_leak_guard(self, datasets):
        train_dir, heldout_dir = datasets
        model = pretrain_detector(train_dir, SMALL_DETECTOR).model
        with pytest.raises(LeakageError):
            zero_shot_eval(model, train_dir, train_dir=train_dir)
        with pytest.raises(LeakageError):
            zero_shot_eval(model, heldout_dir, train_seeds=[2])
        zero_shot_eval(model, heldout_dir, train_dir=train_dir)

    def test_leak_guard_needs_training_seeds(self, datasets):
        model = SiameseChangeDetector(SMALL_DETECTOR)
        with pytest.raises(ParameterError):
            zero_shot_eval(model, datasets[1])
        zero_shot_eval(model, datasets[1], train_seeds=[0, 1])

    def test_coherence_is_finite(self, datasets):
        assert np.isfinite(dataset_coherence(datasets[0]))


class TestSweepResult:
    def rows(self, f1s):
        return SweepResult([SweepRow(r, 1.0 - r, f, f"d{r}") for r, f in zip((0.0, 0.5, 1.0), f1s)])

    def test_csv(self):
        text = self.rows([0.3, 0.2, 0.1]).to_csv()
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["guidance_ratio", "coherence_mae", "f1", "dataset"]
        assert len(rows) == 4

    def test_trend(self):
        assert self.rows([0.3, 0.2, 0.1]).f1_prefers_small_ratio()
        assert not self.rows([0.1, 0.2, 0.3]).f1_prefers_small_ratio()

    def test_save(self, tmp_path):
        self.rows([0.3, 0.2, 0.1]).save(tmp_path)
        assert (tmp_path / "sweep.csv").exists()
        assert (tmp_path / "sweep.png").exists()

    def test_rejects_bad_ratios(self, tmp_path, semantic_checkpoint):
        with pytest.raises(ParameterError):
            lambda_sweep(semantic_checkpoint, [], tmp_path, 1, SCENES, EVENTS, 4)
        with pytest.raises(ParameterError):
            lambda_sweep(semantic_checkpoint, [1.5], tmp_path, 1, SCENES, EVENTS, 4)


@pytest.mark.slow
def test_detector_loss_decreases(datasets):
    config = DetectorConfig(width=8, depth=1, steps=300, batch_size=2, log_every=50)
    result = pretrain_detector(datasets[0], config)
    assert result.losses[-1][1] < 0.6 * result.losses[0][1]


@pytest.mark.slow
def test_detector_overfits_one_sample(tmp_path, semantic_checkpoint):
    manifest = generate_dataset(tmp_path, 1, SCENES, [EventSpec.remove(1.0)],
                                GuidanceConfig(1.0, 4), semantic_checkpoint, name="single")
    config = DetectorConfig(width=8, depth=1, steps=400, batch_size=2, learning_rate=5e-3,
                            d4_augment=False)
    result = pretrain_detector(tmp_path / manifest.name, config)
    pairs, _ = load_pairs(tmp_path / manifest.name)
    assert pairs.labels.sum() > 0
    assert evaluate_detector(result.model, pairs).f1 > 0.95


@pytest.fixture(scope="module")
def trained_split(tmp_path_factory, trained_checkpoint):
    """16 training pairs and 4 held-out pairs rendered by the trained denoiser."""
    root = tmp_path_factory.mktemp("split")
    guidance = GuidanceConfig(1.0, 10)
    events = [EventSpec.remove(1.0), EventSpec.create(1.0)]
    train = generate_dataset(root, 16, SCENES, events, guidance, trained_checkpoint)
    heldout = generate_dataset(root / "heldout", 4, SCENES, events, guidance, trained_checkpoint,
                               scene_seed_offset=16, root_seed=1)
    return root / train.name, root / "heldout" / heldout.name


@pytest.mark.slow
def test_zero_shot_beats_baselines(trained_split, tmp_path):
    train_dir, heldout_dir = trained_split
    config = DetectorConfig(width=8, depth=1, steps=400, batch_size=4, learning_rate=5e-3)
    pretrain_detector(train_dir, config, out_dir=tmp_path)
    report = zero_shot_eval(tmp_path / "detector.pt", heldout_dir)
    assert report.baselines["prevalence"] > 0
    assert report.metrics.f1 >= report.baselines["bernoulli_f1"] + 0.2
    assert report.metrics.f1 > report.baselines["all_ones_f1"]


@pytest.mark.slow
def test_untrained_detector_stays_near_baselines(trained_split):
    _, heldout_dir = trained_split
    pairs, _ = load_pairs(heldout_dir)
    baselines = random_baselines([t[0].numpy() for t in pairs.labels])
    f1s = []
    for seed in range(8):
        torch.manual_seed(seed)
        model = SiameseChangeDetector(DetectorConfig(width=8, depth=1)).eval()
        f1s.append(evaluate_detector(model, pairs).f1)
    assert float(np.mean(f1s)) <= baselines["all_ones_f1"] + 0.15


@pytest.mark.slow
def test_lambda_sweep_end_to_end(tmp_path, semantic_checkpoint):
    result = lambda_sweep(semantic_checkpoint, [0.0, 1.0], tmp_path, 2, SCENES, EVENTS, 4,
                          detector_config=SMALL_DETECTOR, heldout_count=1)
    assert [r.guidance_ratio for r in result.rows] == [0.0, 1.0]
    assert (tmp_path / "sweep.csv").exists()
    assert (tmp_path / "ratio_0" / "detector" / "detector.pt").exists()
    # full guidance keeps the unchanged region closer to the pre-event image
    assert result.rows[1].coherence_mae <= result.rows[0].coherence_mae
