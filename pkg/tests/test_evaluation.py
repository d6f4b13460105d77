import numpy as np
import pytest
from pydantic import ValidationError

from calidet.core.config import PriorName
from calidet.core.dataset import BoxAnnotation, Dataset, ImageRecord, dataset_edge
from calidet.core.detection import Detection, DetectionSet
from calidet.core.edge import edge_from_label_sets, edge_mae
from calidet.core.evaluation import (
    EvalConfig,
    InjectedPrior,
    average_precision,
    interpolated_ap,
    iou,
    iou_matrix,
    mean_metrics,
    prior_sweep,
    run_detector,
    standard_priors,
    subset_eval,
)
from calidet.core.world import gen_dataset, gen_world
from calidet.detectors import ConstantDetector, SimDetector

GT = (0.0, 0.0, 10.0, 10.0)


def one_class(*image_boxes, k=1):
    images = [
        ImageRecord(i + 1, 100, 100, tuple(BoxAnnotation(0, *b) for b in boxes)) for i, boxes in enumerate(image_boxes)
    ]
    return Dataset(k, None, images)


def preds(image_id, *pairs):
    return DetectionSet(image_id, tuple(Detection(0, s, b) for s, b in pairs))


def test_iou():
    assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7)
    assert iou(GT, GT) == 1.0
    assert iou((0, 0, 1, 1), (5, 5, 1, 1)) == 0.0
    assert iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0, 50, size=(5, 4)), rng.uniform(0, 50, size=(3, 4))
    expected = np.array([[iou(x, y) for y in b] for x in a])
    assert np.allclose(iou_matrix(a, b), expected)


def test_ap_hand_cases():
    cfg = EvalConfig()
    single = one_class([GT])
    assert average_precision(single, [preds(1, (0.9, GT))], cfg).ap == 1.0
    # a higher-scored false positive halves precision at full recall
    fp_first = [preds(1, (0.9, (50, 50, 10, 10)), (0.8, GT))]
    assert average_precision(single, fp_first, cfg).ap == pytest.approx(0.5)
    # a duplicate after the match costs nothing
    duplicate = [preds(1, (0.9, GT), (0.8, GT))]
    assert average_precision(single, duplicate, cfg).ap == 1.0
    assert average_precision(single, [], cfg).ap == 0.0

    # half the ground truth found: recall points 0 .. 0.5 score 1
    two = one_class([GT], [GT])
    assert average_precision(two, [preds(1, (0.9, GT))], cfg).ap == pytest.approx(51 / 101)


def test_iou_threshold_boundary():
    """
    IoU exactly 0.5 matches at the 0.5 threshold and nowhere above it.
    """
    metrics = average_precision(one_class([GT]), [preds(1, (0.9, (0, 0, 10, 5)))])
    assert metrics.ap50 == 1.0
    assert metrics.ap75 == 0.0
    assert metrics.ap == pytest.approx(0.1)
    assert metrics.to_dict() == {"AP": 10.0, "AP50": 100.0, "AP75": 0.0}


def test_no_ground_truth_warns(caplog):
    metrics = average_precision(one_class([]), [preds(1, (0.5, GT))])
    assert metrics.ap == 0.0
    assert metrics.per_class == {}
    assert "No ground truth" in caplog.text


def test_classes_without_ground_truth_are_skipped():
    images = [ImageRecord(1, 100, 100, (BoxAnnotation(1, *GT),))]
    dataset = Dataset(3, None, images)
    detections = [DetectionSet(1, ((1, 0.9, GT), (2, 0.8, GT)))]
    metrics = average_precision(dataset, detections)
    assert metrics.per_class == {1: 1.0}
    assert metrics.ap == 1.0


def test_rejects_out_of_range_predictions():
    with pytest.raises(ValueError):
        average_precision(one_class([GT]), [DetectionSet(1, ((3, 0.5, GT),))])


def test_area_ranges_and_max_detections():
    small = (0.0, 0.0, 20.0, 20.0)
    metrics = average_precision(one_class([small]), [preds(1, (0.9, small))], EvalConfig.coco())
    assert metrics.area_ap == {"small": 1.0, "medium": None, "large": None}
    assert metrics.to_dict()["AP_small"] == 100.0

    capped = EvalConfig(max_detections=1)
    assert average_precision(one_class([GT]), [preds(1, (0.2, GT), (0.9, (50, 50, 5, 5)))], capped).ap == 0.0


def test_eval_config_validation():
    with pytest.raises(ValidationError):
        EvalConfig(iou_thresholds=[0.75, 0.5])
    with pytest.raises(ValidationError):
        EvalConfig(iou_thresholds=[0.0, 0.5])
    with pytest.raises(ValidationError):
        EvalConfig(iou_thresholds=[])
    assert len(EvalConfig().iou_thresholds) == 10
    assert EvalConfig().iou_thresholds[-1] == 0.95


def test_interpolated_ap():
    assert interpolated_ap(np.array([True]), 1) == 1.0
    assert interpolated_ap(np.array([], dtype=bool), 3) == 0.0
    # the envelope lifts the precision of the first miss to 2/3
    assert interpolated_ap(np.array([True, False, True]), 2) == pytest.approx((51 + 50 * 2 / 3) / 101)
    with pytest.raises(ValueError):
        interpolated_ap(np.array([True]), 0)


def naive_ap(gts, detections, threshold, recall_points=101):
    """
    Greedy matching written out per detection, and the precision envelope as
    a max over all later operating points.
    """
    order = sorted(detections, key=lambda d: (-d[0], d[1], d[2]))
    taken = {image_id: [False] * len(boxes) for image_id, boxes in gts.items()}
    flags = []
    for _, image_id, _, box in order:
        best, best_iou = None, -1.0
        for index, gt in enumerate(gts[image_id]):
            overlap = iou(box, gt)
            if not taken[image_id][index] and overlap >= threshold and overlap > best_iou:
                best, best_iou = index, overlap
        if best is not None:
            taken[image_id][best] = True
        flags.append(best is not None)
    positives = sum(len(b) for b in gts.values())
    points = []
    tp = 0
    for n, flag in enumerate(flags, 1):
        tp += flag
        points.append((tp / positives, tp / n))
    total = 0.0
    for r in np.linspace(0, 1, recall_points):
        candidates = [p for rec, p in points if rec >= r]
        total += max(candidates) if candidates else 0.0
    return total / recall_points


def test_ap_matches_naive_oracle():
    """
    Small random instances, including tied scores and overlapping ground
    truth, agree with a direct implementation.
    """
    rng = np.random.default_rng(1)
    cfg = EvalConfig()
    for _ in range(1000):
        n_images = int(rng.integers(1, 4))
        gts, prediction_sets = {}, []
        for image_id in range(1, n_images + 1):
            boxes = [
                tuple(rng.integers(0, 20, size=2).tolist() + rng.integers(2, 12, size=2).tolist())
                for _ in range(int(rng.integers(0, 4)))
            ]
            gts[image_id] = [tuple(float(v) for v in b) for b in boxes]
            detections = []
            for _ in range(int(rng.integers(0, 5))):
                if boxes and rng.random() < 0.7:
                    base = np.array(boxes[int(rng.integers(len(boxes)))], dtype=float)
                    box = tuple((base + rng.integers(-2, 3, size=4) * np.array([1, 1, 0.5, 0.5])).clip(0.5).tolist())
                else:
                    box = tuple(float(v) for v in rng.integers(1, 25, size=4))
                detections.append((float(rng.choice([0.3, 0.5, 0.9])), box))
            prediction_sets.append(preds(image_id, *detections))
        dataset = one_class(*[gts[i] for i in range(1, n_images + 1)])
        if dataset.annotation_count() == 0:
            continue
        flat = [
            (d.score, p.image_id, position, d.box)
            for p in prediction_sets
            for position, d in enumerate(p.detections)
        ]
        metrics = average_precision(dataset, prediction_sets, cfg)
        for threshold, value in zip(cfg.iou_thresholds, metrics.per_threshold):
            assert value == pytest.approx(naive_ap(gts, flat, threshold), abs=1e-12)


@pytest.fixture(scope="module")
def simworld():
    world = gen_world(5, 3, seed=3, reference_size=2000)
    dataset = gen_dataset(world, 200, seed=4)
    return world, dataset


def test_ap_invariant_to_monotone_scores(simworld):
    world, dataset = simworld
    detector = SimDetector(world, seed=1)
    prediction_sets = [detector(image, world.reference()) for image in dataset.images]
    squared = [
        DetectionSet(p.image_id, tuple(Detection(d.class_index, d.score**2, d.box) for d in p.detections))
        for p in prediction_sets
    ]
    assert average_precision(dataset, squared).ap == average_precision(dataset, prediction_sets).ap


def test_run_detector_in_parallel(simworld):
    world, dataset = simworld
    prior = InjectedPrior(PriorName.TRAIN, edge=world.reference())
    detector = SimDetector(world, seed=2)
    assert run_detector(detector, dataset, prior, workers=4) == run_detector(detector, dataset, prior)


def test_prior_sweep_rows(simworld):
    world, dataset = simworld
    e_t = world.reference()
    priors = standard_priors(dataset, e_t)
    report = prior_sweep(SimDetector(world, seed=3), dataset, priors, e_t=e_t)
    assert [row.name for row in report.rows] == ["ebar", "e0", "et", "ev", "eb", "ex"]
    assert report.row("et").epsilon == 0.0
    assert report.row("et").delta == 0.0
    assert report.row("ev").epsilon == pytest.approx(edge_mae(dataset_edge(dataset), e_t).mae)
    assert all(row.epsilon >= 0 for row in report.rows)
    assert "ebar" in report.to_text()
    assert report.to_dict()["rows"][2]["delta_vs_et"] == 0.0


def test_prior_sweep_needs_reference(simworld):
    world, dataset = simworld
    priors = standard_priors(dataset, world.reference(), [PriorName.FLAT])
    with pytest.raises(ValueError):
        prior_sweep(SimDetector(world), dataset, priors)


def test_insensitive_detector_gives_flat_column(simworld):
    world, dataset = simworld
    still = world.model_copy(update={"lam": 0.0})
    report = prior_sweep(SimDetector(still, seed=5), dataset, standard_priors(dataset, world.reference()))
    assert len(set(report.ap_column())) == 1


def test_per_image_prior_epsilon():
    dataset = one_class([GT], [], k=2)
    e_t = edge_from_label_sets(2, [{0}, {0, 1}])
    prior = standard_priors(dataset, e_t, [PriorName.SAMPLE])[0]
    expected = np.mean([edge_mae(edge_from_label_sets(2, [im.labels]), e_t).mae for im in dataset.images])
    assert prior.epsilon(dataset, e_t) == pytest.approx(expected)
    batch = standard_priors(dataset, e_t, [PriorName.BATCH], batch_size=2)[0]
    assert batch.edge_for(dataset.images[0]) == dataset_edge(dataset)


def test_mean_metrics():
    a = average_precision(one_class([GT]), [preds(1, (0.9, GT))])
    b = average_precision(one_class([GT]), [])
    mean = mean_metrics([a, b])
    assert mean.ap == 0.5
    assert mean.per_threshold == [0.5] * 10


def test_subset_eval_shapes(simworld):
    world, dataset = simworld
    report = subset_eval(ConstantDetector(5, score=0.5), dataset, 200, seed=0, e_t=world.reference())
    assert report.subset_count == 1
    assert report.mean_epsilon == pytest.approx(edge_mae(dataset_edge(dataset), world.reference()).mae)
    assert "size 200 (1 subsets)" in report.to_text()
    assert report.to_dict()["subset_size"] == 200

    with pytest.raises(ValueError), pytest.warns(UserWarning):
        subset_eval(ConstantDetector(5), dataset, 201, seed=0, e_t=world.reference())
    with pytest.raises(ValueError):
        subset_eval(ConstantDetector(5), dataset, 10, seed=0)


@pytest.mark.slow
def test_subset_epsilon_shrinks_with_size():
    """
    Larger subsets estimate the co-occurrence statistics better, so their
    distance to the training edge falls strictly from size 8 to 64 for most
    of ten worlds.
    """
    decreasing = 0
    for seed in range(10):
        world = gen_world(6, 3, seed=seed, reference_size=4000)
        dataset = gen_dataset(world, 512, seed=seed + 10)
        detector = ConstantDetector(6, score=0.5)
        eps = [
            subset_eval(detector, dataset, size, seed=seed, e_t=world.reference()).mean_epsilon
            for size in (8, 16, 32, 64)
        ]
        assert eps[0] > eps[-1]
        decreasing += all(a > b for a, b in zip(eps, eps[1:]))
    assert decreasing > 5
