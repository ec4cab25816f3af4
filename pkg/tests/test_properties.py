"""Property tests for the metric and posterior invariants that must hold on
any input, not just the frozen examples."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixrep.head import (
    background_posterior,
    class_posterior_normalized,
    mode_probabilities,
)
from mixrep.metrics import DetectionRecord, average_precision, iou, pr_curve
from mixrep.rng import substream

boxes = st.tuples(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 60), st.floats(0.1, 60)
).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=60, deadline=None)
@given(a=boxes, b=boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert iou(b, a) == v


@settings(max_examples=30, deadline=None)
@given(a=boxes)
def test_iou_with_itself_is_one(a):
    assert iou(a, a) == 1.0


distance_tables = arrays(
    np.float64,
    shape=st.tuples(st.integers(2, 5), st.integers(1, 4)),
    elements=st.floats(0.0, 5.0),
)


@settings(max_examples=60, deadline=None)
@given(d=distance_tables)
def test_normalized_posterior_sums_to_one(d):
    probs = mode_probabilities(d, 0.5)
    post = class_posterior_normalized(probs).value
    assert abs(post.sum() - 1.0) <= 1e-9
    assert (post >= 0.0).all()


@settings(max_examples=60, deadline=None)
@given(d=distance_tables)
def test_background_is_exact_complement_of_best_mode(d):
    probs = mode_probabilities(d, 0.5)
    assert background_posterior(probs).value == 1.0 - probs.value.max()


labeled_runs = st.lists(
    st.tuples(st.floats(0.01, 0.99), st.booleans()), min_size=1, max_size=8
)


def _records(pairs):
    return [
        (DetectionRecord(0, "img0", (0, 0, 10, 10), "cat", score, record_id=f"r{i:02d}"), tp)
        for i, (score, tp) in enumerate(pairs)
    ]


@settings(max_examples=60, deadline=None)
@given(pairs=labeled_runs, extra_gt=st.integers(0, 3))
def test_ap_bounded_and_monotone_transform_invariant(pairs, extra_gt):
    labeled = _records(pairs)
    num_gt = max(1, sum(tp for _, tp in pairs) + extra_gt)
    ap = average_precision(labeled, num_gt)
    assert 0.0 <= ap <= 1.0

    # any strictly increasing rescoring preserves the ranking, hence the AP
    squeezed = _records([(0.05 + 0.9 * s**3, tp) for s, tp in pairs])
    assert average_precision(squeezed, num_gt) == ap


@settings(max_examples=60, deadline=None)
@given(pairs=labeled_runs)
def test_pr_curve_envelope_shape(pairs):
    labeled = _records(pairs)
    num_gt = max(1, sum(tp for _, tp in pairs))
    curve = pr_curve(labeled, num_gt)
    recall = np.asarray(curve.recall)
    precision = np.asarray(curve.precision)
    assert (np.diff(recall) >= 0).all()
    assert ((0.0 <= precision) & (precision <= 1.0)).all()
    assert ((0.0 <= recall) & (recall <= 1.0)).all()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), path=st.lists(st.integers(0, 99), max_size=3))
def test_substream_is_a_pure_function_of_its_path(seed, path):
    a = substream(seed, "prop", *path).normal(size=4)
    b = substream(seed, "prop", *path).normal(size=4)
    assert np.array_equal(a, b)
