import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgecare import nn, transfer
from edgecare.nn import LayerSpec, Model
from edgecare.transfer import FineTuneConfig, FreezePolicy

from oracles import enumerate_parameters, random_model


def toy_model():
    # conv(1->2, 1x1): 4 params in block 1; bn(2): 4 params in block 1; gap; head dense(2->5): 15 params
    layers = [LayerSpec("conv2d", "c", 1, {"in_channels": 1, "out_channels": 2, "kernel_h": 1, "kernel_w": 1}),
              LayerSpec("batchnorm", "bn", 1, {"num_features": 2}),
              LayerSpec("globalavgpool", "g", 1),
              LayerSpec("dense", "head", 2, {"in_features": 2, "out_features": 5})]
    return nn.init_model(layers, np.random.default_rng(0))


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    model, batch, _ = random_model(np.random.default_rng(1))
    model.buffers["bn1"]["running_var"] += 0.25
    labels = [f"c{i}" for i in range(model.num_classes)]
    path = tmp_path / "m.tlec"
    transfer.save_checkpoint(model, labels, {"trained_on": "x", "epochs": 3, "seed": 9}, path)
    ck = transfer.load_checkpoint(path)
    assert ck.label_space == labels
    assert ck.provenance == {"trained_on": "x", "epochs": 3, "seed": 9}
    restored = ck.to_model()
    for (l1, s1, a1), (l2, s2, a2) in zip(model.state_arrays(), restored.state_arrays()):
        assert (l1, s1) == (l2, s2)
        assert a1.tobytes() == a2.tobytes()
    assert nn.forward(restored, batch).tobytes() == nn.forward(model, batch).tobytes()
    assert not list(tmp_path.glob(".tlec-*"))


def test_checkpoint_size_matches_layout():
    model = toy_model()
    data = transfer.checkpoint_bytes(model, list("abcde"), {})
    (meta_len,) = struct.unpack_from("<I", data, 8)
    sizes = [a.size for _, _, a in model.state_arrays()]
    assert len(data) == 12 + meta_len + sum(8 + 8 * n for n in sizes)


def test_checkpoint_errors():
    model = toy_model()
    data = transfer.checkpoint_bytes(model, list("abcde"), {})
    with pytest.raises(transfer.BadMagicError):
        transfer.parse_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(transfer.VersionMismatchError):
        transfer.parse_checkpoint(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(transfer.TruncatedBlobError):
        transfer.parse_checkpoint(data[:-3])
    with pytest.raises(transfer.TruncatedBlobError):
        transfer.parse_checkpoint(data[:7])
    meta_len = struct.unpack_from("<I", data, 8)[0]
    meta = data[12:12 + meta_len].replace(b'"head","weight",[5,2]', b'"head","weight",[2,5]')
    with pytest.raises(transfer.ShapeMismatchError):
        transfer.parse_checkpoint(data[:12] + meta + data[12 + meta_len:])
    with pytest.raises(ValueError):
        transfer.checkpoint_bytes(model, ["only", "two"], {})


def test_checkpoint_errors_share_a_base_class():
    for cls in (transfer.BadMagicError, transfer.VersionMismatchError,
                transfer.TruncatedBlobError, transfer.ShapeMismatchError):
        assert issubclass(cls, transfer.CheckpointError)


# ---------------------------------------------------------------- freezing

def test_toy_budgets():
    model = toy_model()
    assert transfer.apply_freeze(model, FreezePolicy("none")) == transfer.ParameterBudget(23, 23, 0)
    b = transfer.apply_freeze(model, FreezePolicy("freeze_blocks", {1}))
    assert (b.trainable, b.frozen, b.total) == (15, 8, 23)
    b = transfer.apply_freeze(model, FreezePolicy("freeze_layers", frozen_layer_names={"bn"}))
    assert (b.trainable, b.frozen) == (19, 4)


def test_two_dense_layer_budget():
    layers = [LayerSpec("dense", "fc", 1, {"in_features": 4, "out_features": 3}),
              LayerSpec("dense", "head", 2, {"in_features": 3, "out_features": 2})]
    budget = transfer.apply_freeze(Model(layers), FreezePolicy("freeze_blocks", {1}))
    assert (budget.trainable, budget.frozen, budget.total) == (8, 15, 23)
    assert budget.trainable_fraction == 8 / 23


def test_policy_errors():
    model = toy_model()
    with pytest.raises(transfer.PolicyError):
        FreezePolicy("freeze_blocks", {7}).frozen_layers(model)
    with pytest.raises(transfer.PolicyError):
        FreezePolicy("freeze_layers", frozen_layer_names={"nope"}).frozen_layers(model)
    with pytest.raises(transfer.PolicyError):
        FreezePolicy("freeze_blocks", {2}).frozen_layers(model)
    with pytest.raises(transfer.PolicyError):
        FreezePolicy("sometimes")
    with pytest.raises(transfer.PolicyError):
        transfer.preset_policy("case4")


def test_policy_json_round_trip(tmp_path):
    p = transfer.preset_policy("case3")
    path = tmp_path / "p.json"
    import json
    path.write_text(json.dumps(p.to_dict()))
    assert transfer.resolve_policy(str(path)) == p


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_budget_equals_enumeration(seed):
    rng = np.random.default_rng(seed)
    model, _, _ = random_model(rng)
    frozen_blocks = {b for b in (1, 2, 3) if rng.random() < 0.5}
    policy = FreezePolicy("freeze_blocks", frozen_blocks) if frozen_blocks else FreezePolicy("none")
    budget = transfer.apply_freeze(model, policy)
    trainable_names = {l.name for l in model.layers if l.block_id not in frozen_blocks}
    assert budget.trainable == enumerate_parameters(model, trainable_names)
    assert budget.total == enumerate_parameters(model)
    assert budget.frozen + budget.trainable == budget.total


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_freezing_more_never_raises_trainable(seed):
    rng = np.random.default_rng(seed)
    model, _, _ = random_model(rng)
    small = {1} if rng.random() < 0.5 else set()
    big = small | {2}
    as_policy = lambda s: FreezePolicy("freeze_blocks", s) if s else FreezePolicy("none")
    assert transfer.apply_freeze(model, as_policy(big)).trainable <= transfer.apply_freeze(model, as_policy(small)).trainable


def test_reference_architecture_budgets():
    model = Model(transfer.reference_architecture(3))
    transfer.validate_shapes(model, (3, 16, 16))
    t = {c: transfer.apply_freeze(model, transfer.preset_policy(c)).trainable for c in ("case1", "case2", "case3")}
    assert t["case1"] > t["case2"] > t["case3"]
    assert t["case1"] == enumerate_parameters(model)
    rows = transfer.budget_table(model, {c: transfer.preset_policy(c) for c in t})
    assert rows[2]["published_trainable"] == 264369 and rows[2]["published_total"] == 1223373
    assert "264369" in transfer.format_budget_table(rows)


def test_published_fraction():
    assert transfer.trainable_fraction(264369, 1223373) == pytest.approx(0.2161, abs=1e-4)
    assert transfer.trainable_fraction(0, 0) == 0.0


# ---------------------------------------------------------------- realignment / fine-tuning

def test_realign_head_swaps_only_the_head():
    model = toy_model()
    ck = transfer.parse_checkpoint(transfer.checkpoint_bytes(model, list("abcde"), {}))
    new = transfer.realign_head(ck, ["x", "y", "z"], seed=0)
    assert new.num_classes == 3 and new.label_space == ["x", "y", "z"]
    before = nn.count_parameters(model)["total"]
    assert nn.count_parameters(new)["total"] == before - (2 + 1) * 5 + (2 + 1) * 3
    assert new.params["c"]["weight"].tobytes() == model.params["c"]["weight"].tobytes()
    with pytest.raises(ValueError):
        transfer.realign_head(ck, ["solo"], seed=0)


def test_realign_same_classes_preserves_body_and_shapes_output():
    model = toy_model()
    ck = transfer.parse_checkpoint(transfer.checkpoint_bytes(model, list("abcde"), {}))
    new = transfer.realign_head(ck, list("abcde"), seed=1)
    for (l, s, a), (_, _, b) in zip(model.state_arrays(), new.state_arrays()):
        if l != "head":
            assert a.tobytes() == b.tobytes()
    three = transfer.realign_head(ck, list("xyz"), seed=1)
    assert nn.forward(three, np.zeros((2, 1, 4, 4))).shape == (2, 3)


def _separable_data(rng, n=60):
    labels = rng.integers(0, 3, n)
    frames = rng.normal(0, 0.1, (n, 1, 4, 4))
    frames[np.arange(n), 0, 0, labels] += 2.0  # class c lights pixel (0, c)
    return frames, labels


def test_fine_tune_zero_epochs_is_identity():
    model, _, _ = random_model(np.random.default_rng(2))
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(6,) + (model.layer("conv1")["in_channels"], 8, 8))
    best, history = transfer.fine_tune(model, FreezePolicy("none"), (frames, np.zeros(6, int)),
                                       (frames, np.zeros(6, int)), FineTuneConfig(epochs=0))
    assert history == []
    for (_, _, a), (_, _, b) in zip(model.state_arrays(), best.state_arrays()):
        assert a.tobytes() == b.tobytes()


def _head_only_model():
    layers = [LayerSpec("conv2d", "c", 1, {"in_channels": 1, "out_channels": 4, "kernel_h": 1, "kernel_w": 1}),
              LayerSpec("relu", "r", 1),
              LayerSpec("dense", "head", 2, {"in_features": 64, "out_features": 3})]
    model = nn.init_model(layers, np.random.default_rng(0))
    model.params["c"]["weight"][:] = 1.0
    return model


def test_head_only_fine_tune_learns_separable_data():
    rng = np.random.default_rng(0)
    train, hold = _separable_data(rng, 120), _separable_data(rng, 60)
    best, history = transfer.fine_tune(_head_only_model(), FreezePolicy("freeze_blocks", {1}), train, hold,
                                       FineTuneConfig(epochs=20, learning_rate=0.05))
    assert len(history) == 20
    assert transfer.evaluate_split(best, *hold)[1] >= 0.9
    assert history[transfer.best_epoch(history) - 1].holdout_loss == min(h.holdout_loss for h in history)


def test_fine_tune_is_deterministic_and_respects_freeze():
    rng = np.random.default_rng(1)
    train, hold = _separable_data(rng), _separable_data(rng)
    model = _head_only_model()
    digests = {k: transfer.tensor_digest(a) for k, a in
               ((f"{l}.{s}", a) for l, s, a in model.state_arrays()) if k.startswith("c.")}
    cfg = FineTuneConfig(epochs=5, seed=4)
    a, ha = transfer.fine_tune(model, FreezePolicy("freeze_blocks", {1}), train, hold, cfg)
    b, hb = transfer.fine_tune(model, FreezePolicy("freeze_blocks", {1}), train, hold, cfg)
    assert ha == hb
    assert transfer.checkpoint_bytes(a, "xyz", {}) == transfer.checkpoint_bytes(b, "xyz", {})
    for k, d in digests.items():
        layer, slot = k.split(".")
        assert transfer.tensor_digest(a.params[layer][slot]) == d
    assert transfer.tensor_digest(a.params["head"]["weight"]) != transfer.tensor_digest(model.params["head"]["weight"])


def test_fine_tune_rejects_bad_data():
    model = _head_only_model()
    frames, labels = _separable_data(np.random.default_rng(0))
    with pytest.raises(ValueError):
        transfer.fine_tune(model, FreezePolicy("none"), (frames, labels + 5), (frames, labels), FineTuneConfig(epochs=1))
    with pytest.raises(ValueError):
        transfer.fine_tune(model, FreezePolicy("none"), (frames[:0], labels[:0]), (frames, labels),
                           FineTuneConfig(epochs=1))
    with pytest.raises(ValueError):
        FineTuneConfig(epochs=-1)


def test_frozen_tensors_unchanged_on_reference_architecture():
    rng = np.random.default_rng(3)
    model = nn.init_model(transfer.reference_architecture(3, in_channels=1), rng)
    frames = rng.random((24, 1, 16, 16))
    labels = np.arange(24) % 3
    for case in ("case2", "case3"):
        policy = transfer.preset_policy(case)
        frozen = policy.frozen_layers(model)
        before = {(l, s): transfer.tensor_digest(a) for l, s, a in model.state_arrays() if l in frozen}
        best, _ = transfer.fine_tune(model, policy, (frames, labels), (frames, labels),
                                     FineTuneConfig(epochs=2, batch_size=8))
        after = {(l, s): transfer.tensor_digest(a) for l, s, a in best.state_arrays() if l in frozen}
        assert before == after
