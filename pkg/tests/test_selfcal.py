import numpy as np
import pytest
from pydantic import ValidationError

from calidet.core.config import Estimator, ZAxis
from calidet.core.dataset import BoxAnnotation, Dataset, ImageRecord, dataset_edge
from calidet.core.detection import Detection, DetectionSet
from calidet.core.edge import EdgeMatrix, clip_edge, edge_from_label_sets, flat_prior, presence_matrix
from calidet.core.errors import DetectorError
from calidet.core.selfcal import (
    RunningStatistics,
    SelfCalConfig,
    mean_z,
    predictions_to_edge,
    selfcal_run,
    selfcal_step,
    step_weights,
    z_vector,
)
from calidet.core.trace import CalibrationTrace, TraceEntry
from calidet.core.world import WorldSpec, gen_dataset, gen_world
from calidet.detectors import ConstantDetector, Detector, SimDetector

BOX = (0.0, 0.0, 10.0, 10.0)


def make_dataset(label_sets, k=3):
    images = []
    for i, labels in enumerate(label_sets):
        boxes = tuple(BoxAnnotation(c, 10.0 * c, 0.0, 20.0, 20.0) for c in sorted(labels))
        images.append(ImageRecord(i + 1, 100, 100, boxes))
    return Dataset(k, None, images)


def predictions(image_id, *pairs):
    return DetectionSet(image_id, tuple(Detection(c, s, BOX) for c, s in pairs))


@pytest.fixture
def images():
    # P(1|0) = 1 and P(2|0) = 0, so the training edge touches both clip bounds
    return make_dataset([{0, 1}, {0, 1}, {2}, {1, 2}])


def test_z_vector():
    preds = predictions(1, (0, 0.9), (0, 0.7), (2, 0.4))
    assert z_vector(preds, 3).tolist() == [0.9, 0.0, 0.4]
    assert z_vector(preds, 3, floor=0.5).tolist() == [0.9, 0.0, 0.0]
    assert z_vector(predictions(1), 3).tolist() == [0.0, 0.0, 0.0]
    assert mean_z([], 3).tolist() == [0.0, 0.0, 0.0]
    assert mean_z([preds, predictions(2, (1, 0.5))], 3) == pytest.approx([0.45, 0.25, 0.2])


def test_predictions_to_edge():
    """
    Presence is every class with a detection at or above the threshold; the
    resulting statistics follow the usual edge construction.
    """
    single = predictions(1, (0, 0.9), (2, 0.8), (1, 0.3))
    assert predictions_to_edge([single], 3) == edge_from_label_sets(3, [{0, 2}])
    assert predictions_to_edge([single], 3, threshold=0.2) == edge_from_label_sets(3, [{0, 1, 2}])

    never = predictions_to_edge([predictions(1, (0, 0.9))], 3)
    assert never.column(1).tolist() == [0.5, 1.0, 0.5]

    three = [
        predictions(1, (0, 0.9), (2, 0.9)),
        predictions(2, (1, 0.6), (2, 0.7)),
        predictions(3, (0, 0.5), (1, 0.5), (2, 0.5)),
    ]
    assert predictions_to_edge(three, 3) == edge_from_label_sets(3, [{0, 2}, {1, 2}, {0, 1, 2}])


def test_selfcal_step_cells():
    e_c = flat_prior(2)
    e_i = EdgeMatrix([[1.0, 1.0], [1.0, 1.0]])
    assert selfcal_step(e_c, e_i, np.array([0.2, 0.2]), eta=4.0).values[1, 0] == pytest.approx(0.9)

    e_c = EdgeMatrix([[1.0, 0.2], [0.2, 1.0]])
    updated = selfcal_step(e_c, e_i, np.array([0.5, 0.5]), eta=4.0)
    assert updated.values[1, 0] == 1.0
    assert (np.diag(updated.values) == 1).all()


def test_selfcal_step_fixed_point():
    e = edge_from_label_sets(3, [{0, 2}, {1}])
    assert selfcal_step(e, e, np.array([0.9, 0.1, 0.5])) == e


def test_selfcal_step_preserves_edge_invariants():
    rng = np.random.default_rng(0)
    for _ in range(100):
        e_c, e_i = clip_edge(rng.random((4, 4))), clip_edge(rng.random((4, 4)))
        out = selfcal_step(e_c, e_i, rng.random(4), eta=float(rng.uniform(0.1, 10)))
        assert (out.values >= 0).all() and (out.values <= 1).all()
        assert (np.diag(out.values) == 1).all()
    with pytest.raises(ValueError):
        selfcal_step(flat_prior(3), flat_prior(3), np.zeros(2))


def test_step_weights_axis():
    """
    Columns mode scales column j by z_j; rows mode scales row i by z_i.
    """
    z = np.array([0.1, 0.2, 0.3])
    columns = step_weights(z, 2.0)
    assert columns[0].tolist() == pytest.approx([0.2, 0.4, 0.6])
    assert (columns[2] == columns[0]).all()
    rows = step_weights(z, 2.0, ZAxis.ROWS)
    assert (rows == columns.T).all()


def test_running_statistics():
    running = RunningStatistics(2, momentum=0.5)
    first = running.update(presence_matrix(2, [{0, 1}]))
    assert first == edge_from_label_sets(2, [{0, 1}])
    second = running.update(presence_matrix(2, [{0}]))
    assert second.values[1, 0] == pytest.approx(1 / 3)
    assert second.values[0, 1] == 1.0


def test_config_validation():
    with pytest.raises(ValidationError):
        SelfCalConfig(eta=0)
    with pytest.raises(ValidationError):
        SelfCalConfig(presence_threshold=1.5)
    with pytest.raises(ValidationError):
        SelfCalConfig(init="ev")


def test_constant_oracle_decays_geometrically(images):
    """
    A detector below the presence threshold always yields E_i = E0 and
    z_bar = score, so the distance to E0 shrinks by |1 - eta * score| per step.
    """
    e_t = dataset_edge(images)
    trace = selfcal_run(ConstantDetector(3, score=0.2), images, SelfCalConfig(max_iterations=5), e_t)
    maes = trace.step_maes()
    assert len(maes) == 5
    for before, after in zip(maes, maes[1:]):
        assert after / before == pytest.approx(0.2, rel=1e-9)
    assert trace.entries[0].edge == e_t
    assert trace.entries[0].effective_step == pytest.approx([0.8] * 3)
    assert not trace.converged

    trace = selfcal_run(ConstantDetector(3, score=0.375), images, SelfCalConfig(max_iterations=4), e_t)
    maes = trace.step_maes()
    for before, after in zip(maes, maes[1:]):
        assert after / before == pytest.approx(0.5, rel=1e-9)


def test_constant_oracle_exact_jump(images):
    e_t = dataset_edge(images)
    trace = selfcal_run(ConstantDetector(3, score=0.25), images, SelfCalConfig(), e_t)
    assert len(trace) == 2
    assert trace.converged
    assert trace.step_maxes()[1] < 1e-12
    assert np.allclose(trace.final_edge.values, flat_prior(3).values, atol=1e-12)
    assert np.allclose(trace.entries[1].edge.values, flat_prior(3).values, atol=1e-12)


def test_constant_oracle_oscillates(images):
    """
    With eta * z_bar above 2 the cells bounce between the clip bounds.
    """
    e_t = dataset_edge(images)
    cfg = SelfCalConfig(max_iterations=4, presence_threshold=0.9)
    trace = selfcal_run(ConstantDetector(3, score=0.6), images, cfg, e_t)
    assert trace.step_maxes() == [1.0] * 4
    assert not trace.converged
    assert trace.entries[0].effective_step == pytest.approx([2.4] * 3)
    assert trace.entries[1].edge.values[1, 0] == 0.0
    assert trace.entries[2].edge.values[1, 0] == 1.0


def test_selfcal_from_flat_prior(images):
    e_t = dataset_edge(images)
    trace = selfcal_run(ConstantDetector(3, score=0.2), images, SelfCalConfig(init="e0"), e_t)
    assert trace.initial_edge == flat_prior(3)
    assert trace.step_maxes()[0] == 0.0
    assert trace.converged


def test_selfcal_records_metrics(images):
    trace = selfcal_run(ConstantDetector(3, score=0.25), images, SelfCalConfig(), dataset_edge(images))
    assert all(isinstance(ap, float) for ap in trace.metric("AP"))

    unlabelled = images.with_images(ImageRecord(im.image_id, 100, 100, ()) for im in images.images)
    trace = selfcal_run(ConstantDetector(3, score=0.25), unlabelled, SelfCalConfig(), dataset_edge(images))
    assert trace.metric("AP") == [None, None]


def test_running_estimator_runs(images):
    cfg = SelfCalConfig(estimator=Estimator.RUNNING, max_iterations=3)
    trace = selfcal_run(ConstantDetector(3, score=0.8), images, cfg, dataset_edge(images))
    # every class is predicted everywhere, so E_i is all ones from the first iteration
    assert trace.final_edge.values.min() > trace.initial_edge.values.min()


class FailingDetector(Detector):
    def __init__(self, fail_after):
        super().__init__("Failing")
        self.calls = 0
        self.fail_after = fail_after

    def detect(self, image, edge):
        self.calls += 1
        if self.calls > self.fail_after:
            raise ConnectionError("detector went away")
        return DetectionSet(image.image_id, ((0, 0.3, BOX),))


def test_detector_failure_keeps_partial_trace(images):
    with pytest.raises(DetectorError) as info:
        selfcal_run(FailingDetector(fail_after=6), images, SelfCalConfig(), dataset_edge(images))
    assert "iteration 1" in str(info.value)
    assert len(info.value.trace) == 1


def test_selfcal_requires_training_prior(images):
    with pytest.raises(ValueError):
        selfcal_run(ConstantDetector(3), images)
    with pytest.raises(ValueError):
        selfcal_run(ConstantDetector(4), images, e_t=flat_prior(4))


def test_trace_round_trip(tmp_path, images):
    trace = selfcal_run(ConstantDetector(3, score=0.2), images, SelfCalConfig(max_iterations=3), dataset_edge(images))
    path = trace.store(tmp_path / "trace")
    assert path.suffix == ".jsonl"
    assert len(path.read_text().splitlines()) == 4
    loaded = CalibrationTrace.load(path)
    assert loaded.step_maes() == trace.step_maes()
    assert loaded.final_edge == trace.final_edge
    assert loaded.config["eta"] == 4.0
    assert [e.edge for e in loaded.entries] == [e.edge for e in trace.entries]


def test_trace_entry_validation():
    with pytest.raises(ValueError):
        TraceEntry(0, flat_prior(2), step_mae=0.5, step_max=0.1, effective_step=[1.0, 1.0], z_bar=[0.25, 0.25])


@pytest.fixture(scope="module")
def simworld():
    world = gen_world(6, 3, seed=2, reference_size=2000)
    train = gen_dataset(world, 1000, seed=2)
    subset = gen_dataset(world, 256, seed=3)
    return world, dataset_edge(train), subset


def test_selfcal_replays(simworld):
    world, e_t, subset = simworld
    cfg = SelfCalConfig(max_iterations=2, evaluate=False)
    first = selfcal_run(SimDetector(world, seed=4), subset, cfg, e_t)
    second = selfcal_run(SimDetector(world, seed=4), subset, cfg.model_copy(update={"workers": 4}), e_t)
    assert [e.to_dict() for e in first.entries] == [e.to_dict() for e in second.entries]


def paired_world(pairs, k=6, high=0.95, low=0.02, seed=5):
    """
    One equally likely scene per class pair, in which both classes are almost
    always present and every other class almost never.
    """
    scenes = []
    for a, b in pairs:
        scene = [low] * k
        scene[a] = scene[b] = high
        scenes.append(scene)
    weights = [1.0 / len(pairs)] * len(pairs)
    return WorldSpec(k=k, scenes=scenes, scene_weights=weights, seed=seed).with_reference(2000)


@pytest.mark.slow
def test_selfcal_recovers_shifted_subset_statistics():
    """
    The training prior pairs the classes differently from the subset being
    evaluated. With the default step size the calibrated prior moves to the
    subset's own pairing: the step shrinks below a tenth of its first value
    and AP does not drop.
    """
    e_t = paired_world([(0, 2), (1, 4), (3, 5)]).reference()
    world = paired_world([(0, 1), (2, 3), (4, 5)])
    subset = gen_dataset(world, 256, seed=3)
    trace = selfcal_run(SimDetector(world, seed=4), subset, SelfCalConfig(), e_t)

    assert trace.config["eta"] == 4.0
    ap = trace.metric("AP")
    assert ap[-1] >= ap[0], ap
    steps = trace.step_maxes()
    assert steps[-1] < 0.1 * steps[0], steps
    assert all(e.step_mae <= e.step_max for e in trace.entries)
    # the subset's pairs end up strongly tied, the training pairs do not
    final = trace.final_edge.values
    assert min(final[1, 0], final[3, 2], final[5, 4]) > 0.7
    assert max(final[2, 0], final[4, 1], final[5, 3]) < 0.3
