import numpy as np
import pytest

from edgecare import datagen, nn
from edgecare.datagen import ActivityClass, GeneratorSpec
from edgecare.nn import LayerSpec


def plain_spec(**kw):
    classes = (ActivityClass("still", "static", 0.9, 4), ActivityClass("fall", "collapse", 0.9, 5, aspect=2.5))
    base = dict(noise_sigma=0.0, clutter=0, intensity_jitter=0.0, lighting_jitter=0.0, seed=3)
    base.update(kw)
    return GeneratorSpec(classes, **base)


def test_static_noise_free_segment_is_constant():
    st = datagen.generate(plain_spec(), [(0, 6)])
    for f in st.frames[1:]:
        assert f.tobytes() == st.frames[0].tobytes()


def test_generation_is_deterministic():
    spec = datagen.target_spec(seed=5)
    segs = datagen.balanced_segments(3, 48, 16, seed=2)
    a, b = datagen.generate(spec, segs), datagen.generate(spec, segs)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert np.array_equal(a.labels, b.labels)
    assert a.spec_fingerprint == spec.fingerprint() == GeneratorSpec.from_dict(spec.to_dict()).fingerprint()


def test_values_in_unit_interval():
    st = datagen.generate(datagen.source_spec(noise_sigma=0.5), datagen.balanced_segments(5, 16, 16, 0))
    assert st.frames.min() >= 0.0 and st.frames.max() <= 1.0
    assert np.isfinite(st.frames).all()


def _bbox_height(frame, threshold=0.5):
    rows = np.flatnonzero((frame[0] > threshold).any(axis=1))
    return rows.max() - rows.min() + 1


def test_collapse_blob_loses_height():
    st = datagen.generate(plain_spec(), [(1, 12)])
    assert _bbox_height(st.frames[-1]) < _bbox_height(st.frames[0])


def test_depth_like_single_channel():
    st = datagen.generate(plain_spec(channels=1), [(0, 2)])
    assert st.frames.shape == (2, 1, 16, 16)


@pytest.mark.parametrize("bad", [
    dict(frame_h=8), dict(channels=2), dict(noise_sigma=-1.0), dict(clutter_rows=0.0), dict(lighting_jitter=2.0)])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        plain_spec(**bad)


def test_spec_needs_two_distinct_classes():
    with pytest.raises(ValueError):
        GeneratorSpec((ActivityClass("a", "static", 0.5, 3),))
    with pytest.raises(ValueError):
        GeneratorSpec((ActivityClass("a", "static", 0.5, 3), ActivityClass("a", "collapse", 0.5, 3)))
    with pytest.raises(ValueError):
        ActivityClass("a", "teleport", 0.5, 3)


def test_generate_rejects_bad_segments():
    with pytest.raises(ValueError):
        datagen.generate(plain_spec(), [(2, 5)])
    with pytest.raises(ValueError):
        datagen.generate(plain_spec(), [(0, 0)])


def test_domains_match_the_task_shape():
    assert len(datagen.source_spec().classes) == 5
    assert datagen.target_spec().class_names == ["fall", "walk", "rest"]


# ---------------------------------------------------------------- split

def test_balanced_split_halves():
    st = datagen.generate(plain_spec(), [(0, 400), (1, 400)])  # 100 windows of 8
    train, hold = datagen.split(st, 0.5, seed=0)
    assert len(train) == len(hold) == 400
    assert set(train.labels) == set(hold.labels) == {0, 1}


def test_split_histograms_add_up():
    st = datagen.generate(datagen.target_spec(), datagen.balanced_segments(3, 96, 16, seed=4))
    train, hold = datagen.split(st, 0.3, seed=1)
    whole = np.bincount(st.labels, minlength=3)
    assert np.array_equal(np.bincount(train.labels, minlength=3) + np.bincount(hold.labels, minlength=3), whole)


def test_split_keeps_windows_whole():
    st = datagen.generate(plain_spec(), [(0, 40), (1, 40)])
    st.frames[:, 0, 0, 0] = np.arange(80) / 100.0  # tag each frame with its index
    train, _ = datagen.split(st, 0.5, seed=2)
    idx = np.round(train.frames[:, 0, 0, 0] * 100).astype(int)
    for start in range(0, len(idx), 8):
        chunk = idx[start:start + 8]
        assert chunk[0] % 8 == 0 and np.array_equal(chunk, np.arange(chunk[0], chunk[0] + 8))


def test_split_errors():
    with pytest.raises(ValueError):
        datagen.split(datagen.generate(plain_spec(), [(0, 80)]), 0.5, seed=0)
    with pytest.raises(ValueError):
        datagen.split(datagen.generate(plain_spec(), [(0, 8), (1, 80)]), 0.5, seed=0)
    with pytest.raises(ValueError):
        datagen.split(datagen.generate(plain_spec(), [(0, 80), (1, 80)]), 1.0, seed=0)


# ---------------------------------------------------------------- file format

def test_stream_file_round_trip(tmp_path):
    st = datagen.generate(datagen.target_spec(), [(0, 5), (2, 3)])
    path = tmp_path / "s.tlds"
    datagen.save_stream(st, path)
    data = path.read_bytes()
    assert data[:4] == b"TLDS"
    assert len(data) == 24 + 2 * 8 + 8 * 3 * 16 * 16
    back = datagen.load_stream(path)
    assert np.array_equal(back.labels, st.labels)
    assert np.abs(back.frames - st.frames).max() <= 0.5 / 255 + 1e-12
    path.write_bytes(data[:-1])
    with pytest.raises(datagen.StreamFormatError):
        datagen.load_stream(path)
    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(datagen.StreamFormatError):
        datagen.load_stream(path)


# ---------------------------------------------------------------- learnability

def test_linear_probe_learns_default_target_domain():
    """dense(HW -> 3) on one channel, 200 frames per class."""
    spec = datagen.target_spec(channels=1)
    st = datagen.generate(spec, datagen.balanced_segments(3, 400, 40, seed=0))
    train, hold = datagen.split(st, 0.5, seed=0)
    probe = nn.init_model([LayerSpec("dense", "head", 0, {"in_features": 256, "out_features": 3})],
                          np.random.default_rng(0))
    rng = np.random.default_rng(0)
    for _ in range(60):
        order = rng.permutation(len(train))
        for i in range(0, len(order), 16):
            idx = order[i:i + 16]
            nn.train_step(probe, train.frames[idx], train.labels[idx], 0.1, {"head"})
    accuracy = (nn.predict_proba(probe, hold.frames).argmax(axis=1) == hold.labels).mean()
    assert accuracy >= 0.8
