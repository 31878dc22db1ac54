import io

import numpy as np
import pytest

from conftest import max_rel_error
from tcresnet import models as M
from tcresnet import nn_core as nn
from tcresnet.errors import CheckpointError, ShapeError


def randomize_bn(inst, seed):
    """Give every batch norm non-trivial statistics so folding is actually exercised."""
    rng = np.random.default_rng(seed)
    for k, v in inst.params.items():
        if k.endswith("/gamma"):
            v[:] = rng.uniform(0.5, 1.5, v.shape)
        elif k.endswith(("/beta", "/moving_mean")):
            v[:] = rng.normal(0, 0.3, v.shape)
        elif k.endswith("/moving_var"):
            v[:] = rng.uniform(0.5, 2.0, v.shape)
    return inst


class TestSpec:
    def test_channels(self):
        assert M.ModelSpec().channels == (16, 24, 32, 48)
        assert M.ModelSpec(width_multiplier=1.5).channels == (24, 36, 48, 72)

    def test_round_half_up(self):
        # 0.3125 * 24 = 7.5 rounds up to 8
        assert M.ModelSpec(width_multiplier=0.3125).channels == (5, 8, 10, 15)

    @pytest.mark.parametrize("name", M.MODEL_NAMES)
    def test_name_round_trip(self, name):
        assert M.ModelSpec.from_name(name).name == name

    @pytest.mark.parametrize("bad", ["tc-resnet9", "resnet8", "tc-resnet8-pool", "tc-resnet8-0"])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            M.ModelSpec.from_name(bad)

    def test_zero_channel_rejected(self):
        with pytest.raises(ValueError):
            M.ModelSpec(width_multiplier=0.01)

    def test_depth14_schedule(self):
        blocks = M.ModelSpec(depth=14).blocks
        assert [(s, c) for s, _, c in blocks] == [(2, 24), (1, 24), (2, 32), (1, 32), (2, 48), (1, 48)]


class TestLayerTable:
    def test_time_lengths(self):
        table = M.layer_table(M.ModelSpec())
        lengths = [table[0].out_shape[0]] + [layer.out_shape[0] for layer in table if layer.kind == "add"]
        assert lengths == [98, 49, 25, 13]
        assert M.prepare_input(M.ModelSpec(), np.zeros((98, 40))).shape[1] == 98

    def test_stem_consumes_all_bins(self):
        shapes = M.param_shapes(M.ModelSpec())
        assert shapes["stem/conv/weight"] == (3, 1, 40, 16)
        assert M.param_shapes(M.ModelSpec(family="2d_resnet"))["stem/conv/weight"] == (3, 3, 1, 16)

    def test_shortcut_only_when_needed(self):
        names = M.param_shapes(M.ModelSpec(depth=14))
        assert "block1/shortcut/conv/weight" in names
        assert "block2/shortcut/conv/weight" not in names

    def test_pool_variant(self):
        table = M.layer_table(M.ModelSpec(family="2d_resnet_pool"))
        pool = next(layer for layer in table if layer.kind == "avgpool")
        assert pool.out_shape == (25, 10, 16)

    def test_fc_shape(self):
        assert M.param_shapes(M.ModelSpec())["fc/weight"] == (48, 12)


class TestBuild:
    def test_deterministic(self):
        a = M.build_model(M.ModelSpec(), 5)
        b = M.build_model(M.ModelSpec(), 5)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        c = M.build_model(M.ModelSpec(), 6)
        assert not np.array_equal(a.params["stem/conv/weight"], c.params["stem/conv/weight"])

    def test_bn_init(self):
        inst = M.build_model(M.ModelSpec())
        assert np.all(inst.params["block1/bn1/gamma"] == 1)
        assert np.all(inst.params["block1/bn1/moving_var"] == 1)
        assert not inst.params["block1/bn1/moving_mean"].any()

    def test_he_scale(self):
        w = M.build_model(M.ModelSpec()).params["block3/conv2/weight"]
        fan_in = 9 * 48
        assert w.std() == pytest.approx(np.sqrt(2 / fan_in), rel=0.05)

    def test_param_monotone_in_k(self):
        counts = [M.build_model(M.ModelSpec(width_multiplier=k)).n_scalars for k in (0.25, 0.5, 1.0, 2.0)]
        assert counts == sorted(counts)
        # doubling k scales by between 2x and 4x
        for lo, hi in zip(counts, counts[1:]):
            assert 2 * lo < hi <= 4 * lo


class TestForward:
    @pytest.mark.parametrize("name", M.MODEL_NAMES)
    def test_logits(self, name):
        inst = M.build_model(M.ModelSpec.from_name(name)).eval()
        x = np.random.default_rng(0).normal(size=(98, 40))
        y = M.forward(inst, x)
        assert y.shape == (12,) and np.isfinite(y).all()
        assert np.array_equal(y, M.forward(inst, x))

    def test_batch_matches_single(self):
        inst = randomize_bn(M.build_model(M.ModelSpec()), 0).eval()
        xs = np.random.default_rng(1).normal(size=(3, 98, 40))
        batch = M.forward(inst, xs)
        assert batch.shape == (3, 12)
        for x, y in zip(xs, batch):
            assert np.allclose(M.forward(inst, x), y, atol=1e-5)

    def test_shape_mismatch(self):
        inst = M.build_model(M.ModelSpec()).eval()
        with pytest.raises(ShapeError):
            M.forward(inst, np.zeros((98, 39)))

    def test_train_needs_rng(self):
        inst = M.build_model(M.ModelSpec())
        with pytest.raises(ValueError):
            M.forward(inst, np.zeros((2, 98, 40)))

    def test_infer_does_not_mutate(self):
        inst = randomize_bn(M.build_model(M.ModelSpec()), 1).eval()
        before = {k: v.copy() for k, v in inst.params.items()}
        M.forward(inst, np.random.default_rng(2).normal(size=(4, 98, 40)))
        assert all(np.array_equal(before[k], inst.params[k]) for k in before)


class TestFold:
    @pytest.mark.parametrize("name", ["tc-resnet8", "tc-resnet14-1.5", "2d-resnet8-pool"])
    def test_logits_preserved(self, name):
        inst = randomize_bn(M.build_model(M.ModelSpec.from_name(name), 3), 4).eval()
        folded = M.fold_batchnorm(inst)
        xs = np.random.default_rng(5).normal(size=(16, 98, 40))
        assert np.max(np.abs(M.forward(inst, xs) - M.forward(folded, xs))) < 1e-4

    def test_argmax_preserved_1000(self):
        inst = randomize_bn(M.build_model(M.ModelSpec(), 7), 8).eval()
        folded = M.fold_batchnorm(inst)
        xs = np.random.default_rng(9).normal(size=(1000, 98, 40))
        assert np.array_equal(M.forward(inst, xs).argmax(1), M.forward(folded, xs).argmax(1))

    def test_identity_bn(self):
        inst = M.build_model(M.ModelSpec()).eval()
        for k, v in inst.params.items():
            if k.endswith("/moving_var"):
                v[:] = 1 - nn.BN_EPSILON
        folded = M.fold_batchnorm(inst)
        assert np.allclose(folded.params["block2/conv1/weight"], inst.params["block2/conv1/weight"], rtol=1e-6)
        assert all(not v.any() for k, v in folded.params.items() if k.endswith("/bias"))

    def test_no_bn_params(self):
        folded = M.fold_batchnorm(M.build_model(M.ModelSpec()).eval())
        assert not any(k.endswith(M.BN_FIELDS) for k in folded.params)
        assert folded.folded and folded.mode == "infer"

    def test_train_mode_rejected(self):
        with pytest.raises(ValueError):
            M.fold_batchnorm(M.build_model(M.ModelSpec()))


class TestCheckpoint:
    def test_round_trip_bytes(self):
        inst = randomize_bn(M.build_model(M.ModelSpec(width_multiplier=1.5), 2), 3)
        blob = M.checkpoint_bytes(inst)
        loaded = M.load_checkpoint(blob)
        assert M.checkpoint_bytes(loaded) == blob
        assert loaded.spec == inst.spec and loaded.mode == "infer"
        assert all(np.array_equal(loaded.params[k], inst.params[k]) for k in inst.params)

    def test_scalar_count(self, tmp_path):
        M.save_checkpoint(M.build_model(M.ModelSpec()), tmp_path / "m.tcrn")
        assert M.load_checkpoint(tmp_path / "m.tcrn").n_scalars == 65824

    def test_folded_round_trip(self):
        folded = M.fold_batchnorm(M.build_model(M.ModelSpec()).eval())
        loaded = M.load_checkpoint(io.BytesIO(M.checkpoint_bytes(folded)))
        assert loaded.folded and M.checkpoint_bytes(loaded) == M.checkpoint_bytes(folded)

    def test_header_layout(self):
        blob = M.checkpoint_bytes(M.build_model(M.ModelSpec()))
        assert blob[:4] == b"TCRN" and int.from_bytes(blob[4:8], "little") == 1

    def test_bad_magic(self):
        blob = bytearray(M.checkpoint_bytes(M.build_model(M.ModelSpec())))
        blob[:4] = b"XXXX"
        with pytest.raises(CheckpointError, match="magic"):
            M.load_checkpoint(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(M.checkpoint_bytes(M.build_model(M.ModelSpec())))
        blob[4] = 9
        with pytest.raises(CheckpointError, match="version"):
            M.load_checkpoint(bytes(blob))

    @pytest.mark.parametrize("cut", [3, 10, 200, -1])
    def test_truncated(self, cut):
        blob = M.checkpoint_bytes(M.build_model(M.ModelSpec()))
        with pytest.raises(CheckpointError):
            M.load_checkpoint(blob[:cut])

    def test_shape_disagreement(self):
        inst = M.build_model(M.ModelSpec())
        inst.params["fc/weight"] = inst.params["fc/weight"][:, :11]
        with pytest.raises(CheckpointError, match="fc/weight"):
            M.load_checkpoint(M.checkpoint_bytes(inst))


def _tiny(family="tc_resnet"):
    spec = M.ModelSpec(family=family, width_multiplier=0.25, t=12, f=5)
    inst = M.build_model(spec, 11)
    inst.params = {k: v.astype(np.float64) for k, v in inst.params.items()}
    inst.dropout_p = 0.0
    return inst


@pytest.mark.parametrize("family", ["tc_resnet", "2d_resnet", "2d_resnet_pool"])
def test_full_backward_finite_differences(family):
    inst = _tiny(family)
    rng = np.random.default_rng(0)
    # the pool variant needs enough frequency bins for a non-trivial pooled map
    x = rng.normal(size=(3, inst.spec.t, inst.spec.f))
    labels = np.array([0, 5, 11])

    def loss():
        return nn.softmax_cross_entropy(M.forward(inst, x, rng=np.random.default_rng(0)), labels)[0]

    cache = {}
    logits = M.forward(inst, x, rng=np.random.default_rng(0), cache=cache)
    _, g = nn.softmax_cross_entropy(logits, labels)
    grads = M.backward(inst, cache, g)
    assert set(grads) == set(inst.trainable_names())
    pick = np.random.default_rng(1)
    h = 1e-5
    for name, grad in grads.items():
        p = inst.params[name]
        for _ in range(3):
            i = tuple(int(pick.integers(d)) for d in p.shape)
            old = p[i]
            p[i] = old + h
            fp = loss()
            p[i] = old - h
            fm = loss()
            p[i] = old
            num = (fp - fm) / (2 * h)
            assert max_rel_error(grad[i], num, floor=1e-7) < 1e-4, name
