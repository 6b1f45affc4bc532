import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgecare import stream
from edgecare.nn import LayerSpec, Model
from edgecare.stream import FrameScore, InferenceEvent, WindowConfig

from oracles import covering_average


@pytest.mark.parametrize("T,W,S,expected", [
    (10, 10, 5, [0]),
    (10, 4, 2, [0, 2, 4, 6]),
    (9, 4, 3, [0, 3, 5]),
    (8, 8, 1, [0]),
])
def test_window_starts(T, W, S, expected):
    assert stream.window_starts(T, WindowConfig(W, S)) == expected


def test_short_stream_and_bad_config():
    with pytest.raises(ValueError):
        stream.window_starts(3, WindowConfig(4, 2))
    with pytest.raises(ValueError):
        WindowConfig(4, 5)
    with pytest.raises(ValueError):
        WindowConfig(0, 1)


def test_extract_windows_slices_frames():
    frames = np.arange(9)
    wins = stream.extract_windows(frames, WindowConfig(4, 3))
    assert [t for t, _ in wins] == [0, 3, 5]
    np.testing.assert_array_equal(wins[-1][1], [5, 6, 7, 8])


def test_single_window_covers_everything():
    p = np.array([0.2, 0.8])
    scores = stream.score_frames([(0, p)], WindowConfig(5, 5), 5)
    for fs in scores:
        np.testing.assert_array_equal(fs.score, p)
        assert fs.num_windows == 1


def test_two_overlapping_windows():
    scores = stream.score_frames([(2, np.array([0.0, 1.0])), (0, np.array([1.0, 0.0]))], WindowConfig(4, 2), 6)
    np.testing.assert_array_equal(scores[0].score, [1.0, 0.0])
    np.testing.assert_array_equal(scores[2].score, [0.5, 0.5])
    np.testing.assert_array_equal(scores[5].score, [0.0, 1.0])
    assert [fs.num_windows for fs in scores] == [1, 1, 2, 2, 1, 1]


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_frame_scores_equal_brute_force(data):
    W = data.draw(st.integers(1, 16))
    S = data.draw(st.integers(1, W))
    T = data.draw(st.integers(W, 64))
    C = data.draw(st.integers(2, 5))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    cfg = WindowConfig(W, S)
    window_scores = [(t1, rng.dirichlet(np.ones(C))) for t1 in stream.window_starts(T, cfg)]
    rng.shuffle(window_scores)
    got = stream.score_frames(window_scores, cfg, T)
    for fs, (expected, k) in zip(got, covering_average(window_scores, W, T)):
        assert fs.num_windows == k
        assert fs.score.tobytes() == expected.tobytes()


def _fs(classes, conf=0.9):
    out = []
    for i, c in enumerate(classes):
        score = np.full(2, 1 - conf)
        score[c] = conf
        out.append(FrameScore(i, score, 1))
    return out


def test_segmentation_into_runs():
    events = stream.segment_events(_fs([0, 0, 1, 1, 1, 0]), ["walk", "fall"], {"walk": "INFO", "fall": "ALERT"})
    assert [(e.start, e.end, e.activity, e.category) for e in events] == [
        (0, 1, "walk", "INFO"), (2, 4, "fall", "ALERT"), (5, 5, "walk", "INFO")]
    assert events[0].confidence == pytest.approx(0.9)


def test_constant_prediction_gives_one_event():
    events = stream.segment_events(_fs([1] * 7), ["a", "b"], {"a": "INFO", "b": "INFO"})
    assert len(events) == 1 and events[0].frame_range == (0, 6)


def test_categories():
    assert stream.build_category_map(["fall", "walk", "call_help", "request_water"]) == {
        "fall": "ALERT", "walk": "INFO", "call_help": "SERVICE_REQUEST", "request_water": "SERVICE_REQUEST"}
    assert stream.build_category_map(["walk"], {"walk": "ALERT"}) == {"walk": "ALERT"}
    with pytest.raises(ValueError):
        stream.build_category_map(["walk"], {"walk": "PANIC"})


def test_event_serialization_has_no_pixels():
    ev = InferenceEvent("s", 3, 9, "fall", 0.123456789, "ALERT", 17)
    text = ev.to_json()
    assert json.loads(text) == {"stream_id": "s", "start": 3, "end": 9, "activity": "fall",
                                "confidence": 0.123457, "category": "ALERT", "tick": 17}
    assert InferenceEvent.from_dict(json.loads(text)).end == 9
    with pytest.raises(ValueError):
        InferenceEvent("s", 5, 4, "x", 0.5, "INFO")


def test_run_stream_end_to_end():
    # 1x1 "frames"; the dense head routes the channel value straight to class 1's logit
    model = Model([LayerSpec("dense", "head", 0, {"in_features": 1, "out_features": 2})], label_space=["rest", "fall"])
    model.params["head"]["weight"][:] = [[0.0], [20.0]]
    model.params["head"]["bias"][:] = [10.0, 0.0]
    frames = np.zeros((24, 1, 1, 1))
    frames[8:16] = 1.0
    events, scores = stream.run_stream(model, frames, WindowConfig(4, 4))
    assert len(scores) == 24
    assert [(e.activity, e.start, e.end, e.category) for e in events] == [
        ("rest", 0, 7, "INFO"), ("fall", 8, 15, "ALERT"), ("rest", 16, 23, "INFO")]
    with pytest.raises(ValueError):
        stream.run_stream(model, frames, WindowConfig(4, 4), class_names=["only-one"])
