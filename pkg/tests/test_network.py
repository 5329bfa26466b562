"""Network assembly, Table-style parameter accounting, forward/backward
composition, initialization, and checkpoint persistence."""

import numpy as np
import pytest

from facepipe import layers as L
from facepipe import network as N
from facepipe.errors import (CheckpointFormatError, CheckpointShapeError,
                             CheckpointTruncatedError, CheckpointVersionError,
                             ShapeError)

EXPECTED_CELLS = {
    "Conv11": "0.28K", "Conv12": "18K", "Conv21": "36K", "Conv22": "72K",
    "Conv31": "108K", "Conv32": "162K", "Conv41": "216K", "Conv42": "288K",
    "Conv51": "360K", "Conv52": "450K", "Fc6": "3305K",
}

EXPECTED_SHAPES = {
    "Conv11": (100, 100, 32), "Conv12": (100, 100, 64),
    "Pool1": (50, 50, 64), "Conv21": (50, 50, 64), "Conv22": (50, 50, 128),
    "Pool2": (25, 25, 128), "Conv31": (25, 25, 96), "Conv32": (25, 25, 192),
    "Pool3": (13, 13, 192), "Conv41": (13, 13, 128), "Conv42": (13, 13, 256),
    "Pool4": (7, 7, 256), "Conv51": (7, 7, 160), "Conv52": (7, 7, 320),
    "Pool5": (1, 1, 320), "Dropout": (1, 1, 320), "Fc6": (10575,),
}


class TestCanonicalSpec:
    def test_every_param_cell(self):
        counts, total = N.count_params(N.build_canonical())
        for name, cell in EXPECTED_CELLS.items():
            assert N.format_kilo(counts[name]) == cell, name
        assert total == 5_135_328
        assert N.format_kilo(total) == "5015K"

    def test_every_activation_shape(self):
        shapes = dict(N.build_canonical().activation_shapes())
        for name, want in EXPECTED_SHAPES.items():
            assert shapes[name] == want, name

    def test_depth_is_eleven(self):
        assert N.depth(N.build_canonical()) == 11

    def test_last_conv_has_no_relu(self):
        spec = N.build_canonical()
        names = [n for n, _ in spec.layers]
        after_conv52 = names[names.index("Conv52") + 1]
        assert not isinstance(dict(spec.layers)[after_conv52], L.ReLU)
        # every other convolution is followed by a ReLU
        for i, (name, kind) in enumerate(spec.layers):
            if isinstance(kind, L.Convolution) and name != "Conv52":
                assert isinstance(spec.layers[i + 1][1], L.ReLU), name

    def test_dropout_rate(self):
        spec = N.build_canonical()
        assert dict(spec.layers)["Dropout"].rate == 0.4

    def test_embedding_dim(self):
        assert N.build_canonical().embedding_dim() == 320

    def test_head_contract_enforced(self):
        spec = N.build_canonical()
        bad = tuple((n, k) for n, k in spec.layers if n != "Dropout")
        with pytest.raises(ValueError):
            N.NetworkSpec(bad, (100, 100, 1), "Pool5", 10575)

    def test_duplicate_names_rejected(self):
        spec = N.build_small(class_count=3, input_size=16)
        dup = ((spec.layers[0][0], spec.layers[0][1]),) + spec.layers
        with pytest.raises(ValueError):
            N.NetworkSpec(dup, spec.input_shape, spec.representation_layer, 3)


class TestForward:
    def test_zero_weights_zero_outputs(self):
        spec = N.build_small(class_count=5, input_size=16)
        net = N.init_weights(spec, seed=0)
        for st in net.states.values():
            st.weights[...] = 0.0
        net.mode = "infer"
        emb, logits = net.forward(np.random.default_rng(0).random((16, 16, 1)))
        assert not emb.any() and not logits.any()

    def test_embedding_length_matches_channels(self):
        spec = N.build_small(class_count=5, input_size=25,
                             blocks=((4, 8), (8, 12)))
        net = N.init_weights(spec, seed=1)
        emb, logits = net.forward(np.zeros((25, 25, 1)), dropout_seed=0)
        assert emb.shape == (12,)
        assert logits.shape == (5,)

    def test_matches_straightline_composition_oracle(self):
        spec = N.build_small(class_count=4, input_size=16,
                             blocks=((3, 4), (4, 6)))
        net = N.init_weights(spec, seed=2)
        net.mode = "infer"
        x = np.random.default_rng(3).random((16, 16, 1))
        emb, logits = net.forward(x)

        act = x
        oracle_emb = None
        for name, kind in spec.layers:
            if isinstance(kind, L.Convolution):
                act = L.conv2d_forward(act, kind, net.states[name].weights)
            elif isinstance(kind, L.MaxPool):
                act, _ = L.max_pool_forward(act, kind)
            elif isinstance(kind, L.AvgPool):
                act = L.avg_pool_forward(act, kind)
            elif isinstance(kind, L.ReLU):
                act = L.relu_forward(act)
            elif isinstance(kind, L.Dropout):
                pass  # infer mode: identity
            else:
                act = L.fc_forward(act.reshape(-1), net.states[name].weights)
            if name == spec.representation_layer:
                oracle_emb = act.reshape(-1)
        np.testing.assert_array_equal(emb, oracle_emb)
        np.testing.assert_array_equal(logits, act)

    def test_wrong_input_shape(self):
        net = N.init_weights(N.build_small(class_count=3, input_size=16), 0)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((17, 16, 1)))

    def test_canonical_forward_emits_320_dim_embedding(self):
        net = N.init_weights(N.build_canonical(), seed=0, dtype=np.float32)
        net.mode = "infer"
        x = np.random.default_rng(1).random((100, 100, 1)).astype(np.float32)
        emb, logits = net.forward(x)
        assert emb.shape == (320,)
        assert logits.shape == (10575,)
        assert np.all(np.isfinite(emb)) and np.all(np.isfinite(logits))

    def test_infer_deterministic_train_seeded(self):
        spec = N.build_small(class_count=3, input_size=16)
        net = N.init_weights(spec, seed=4)
        x = np.random.default_rng(5).random((16, 16, 1))
        net.mode = "infer"
        np.testing.assert_array_equal(net.forward(x)[1], net.forward(x)[1])
        net.mode = "train"
        a = net.forward(x, dropout_seed=9)[1]
        b = net.forward(x, dropout_seed=9)[1]
        c = net.forward(x, dropout_seed=10)[1]
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestInit:
    def test_same_seed_bitwise_identical(self):
        spec = N.build_small(class_count=4, input_size=16)
        a = N.init_weights(spec, seed=11)
        b = N.init_weights(spec, seed=11)
        for name in a.states:
            np.testing.assert_array_equal(a.states[name].weights,
                                          b.states[name].weights)

    def test_canonical_first_layer_shape(self):
        net = N.init_weights(N.build_canonical(), seed=0)
        assert net.states["Conv11"].weights.shape == (3, 3, 1, 32)

    def test_std_tracks_fan_in(self):
        net = N.init_weights(N.build_canonical(), seed=3)
        w = net.states["Conv42"].weights  # 294912 samples
        want = np.sqrt(2.0 / (3 * 3 * 128))
        assert abs(w.std() / want - 1.0) < 0.05


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        net = N.init_weights(N.build_small(class_count=4, input_size=16), 7)
        net.states["Fc"].velocity = np.random.default_rng(0).random(
            net.states["Fc"].weights.shape)
        p1, p2 = tmp_path / "a.fpck", tmp_path / "b.fpck"
        N.save_checkpoint(net, p1)
        N.save_checkpoint(N.load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupted_magic(self, tmp_path):
        net = N.init_weights(N.build_small(class_count=3, input_size=16), 0)
        p = tmp_path / "c.fpck"
        N.save_checkpoint(net, p)
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError):
            N.load_checkpoint(p)

    def test_version_mismatch(self, tmp_path):
        net = N.init_weights(N.build_small(class_count=3, input_size=16), 0)
        p = tmp_path / "v.fpck"
        N.save_checkpoint(net, p)
        raw = bytearray(p.read_bytes())
        raw[7] = 99  # version field follows the 7-byte magic
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            N.load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        net = N.init_weights(N.build_small(class_count=3, input_size=16), 0)
        p = tmp_path / "t.fpck"
        N.save_checkpoint(net, p)
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(CheckpointTruncatedError):
            N.load_checkpoint(p)

    def test_shape_inconsistency(self, tmp_path):
        net = N.init_weights(N.build_small(class_count=3, input_size=16), 0)
        p = tmp_path / "s.fpck"
        N.save_checkpoint(net, p)
        raw = p.read_bytes()
        # grow a declared stored shape without touching the payload
        broken = raw.replace(b'"shapes": {"Conv11": [3, 3, 1,',
                             b'"shapes": {"Conv11": [3, 9, 1,')
        assert broken != raw
        p.write_bytes(broken)
        with pytest.raises(CheckpointShapeError):
            N.load_checkpoint(p)

    def test_canonical_head_shape_roundtrip(self, tmp_path):
        net = N.init_weights(N.build_canonical(), seed=0, dtype=np.float32)
        p = tmp_path / "big.fpck"
        N.save_checkpoint(net, p)
        loaded = N.load_checkpoint(p)
        assert loaded.spec.class_count == 10575
        assert loaded.states["Fc6"].weights.shape == (320, 10575)

    def test_mode_and_epoch_roundtrip(self, tmp_path):
        net = N.init_weights(N.build_small(class_count=3, input_size=16), 5)
        net.mode = "infer"
        net.epoch = 12
        p = tmp_path / "m.fpck"
        N.save_checkpoint(net, p)
        loaded = N.load_checkpoint(p)
        assert loaded.mode == "infer"
        assert loaded.epoch == 12
        assert loaded.init_seed == 5


class TestSpecText:
    def test_round_trip(self):
        for spec in (N.build_canonical(),
                     N.build_small(class_count=7, input_size=25)):
            assert N.spec_from_text(N.spec_to_text(spec)) == spec

    def test_hand_written(self):
        text = """
        # tiny stack
        input 16x16x1
        classes 3
        representation PoolR
        C1 conv 3x3/1 4
        R1 relu
        C2 conv 3x3/1 6
        P1 maxpool 2x2/2
        PoolR avgpool 8x8/1
        Drop dropout 0.25
        Head fc 3
        """
        spec = N.spec_from_text(text)
        assert spec.class_count == 3
        assert dict(spec.layers)["C2"].in_channels == 4
        assert dict(spec.layers)["Head"].in_dim == 6
        assert spec.embedding_dim() == 6

    def test_unknown_layer_type(self):
        with pytest.raises(ValueError):
            N.spec_from_text("input 16x16x1\nX zap 3\n")
