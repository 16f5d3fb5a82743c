import io
import struct

import numpy as np
import pytest

from agpad import tensor as T
from agpad.attention import FusionConfig, PostConv
from agpad.model import (LIVE, PA, VARIANTS, BackboneConfig, PADModel, ablation_variant, read_checkpoint,
                         write_checkpoint)
from agpad.tensor import DimensionError, Tensor, grad_check, precision
from agpad.train import TrainConfig, train

TINY = BackboneConfig(channels=(2, 2, 4, 4, 4), input_size=32)
SMALL = BackboneConfig(channels=(4, 4, 8, 8, 8), input_size=32)


def image(seed, cfg=SMALL):
    return np.random.default_rng(seed).random((cfg.in_channels, cfg.input_size, cfg.input_size)).astype(np.float32)


def test_backbone_config_validation():
    assert BackboneConfig().tap_sizes == (16, 8, 4)
    assert BackboneConfig(input_size=224).tap_sizes == (56, 28, 14)
    with pytest.raises(ValueError):
        BackboneConfig(input_size=48)
    with pytest.raises(ValueError):
        BackboneConfig(channels=(8, 8, 8))


def test_tap_shapes_default_model():
    m = PADModel.create(fusion=FusionConfig(mode="none"))
    feats = m.features(np.zeros((1, 64, 64), np.float32))
    assert feats["tap3"].shape == (32, 16, 16)
    assert feats["tap4"].shape == (32, 8, 8)
    assert feats["tap5"].shape == (32, 4, 4)
    assert feats["logits"].shape == (2,)


def test_zero_image_zero_head_scores_half():
    m = PADModel.create(SMALL)
    m.fc_w.data[...] = 0
    logits = m(np.zeros((1, 32, 32), np.float32))
    assert logits.data.tolist() == [0.0, 0.0]
    assert m.pa_score(np.zeros((1, 32, 32))) == 0.5


def test_saturated_logits():
    m = PADModel.create(SMALL)
    m.fc_w.data[...] = 0
    m.fc_b.data[...] = [-20.0, 20.0]
    assert m.pa_score(image(0)) == pytest.approx(1.0, abs=1e-8)
    m.fc_b.data[...] = [40.0, -40.0]
    assert m.pa_score(image(0)) < 1e-30


@pytest.mark.parametrize("mode", ["none", "parallel", "hierarchical"])
def test_pa_score_is_softmax_of_forward(mode):
    m = PADModel.create(SMALL, FusionConfig(mode=mode, reduction_ratio=4), seed=3)
    x = image(1)
    z = m(x).data.astype(np.float64)
    p = np.exp(z - z.max())
    p /= p.sum()
    assert m.pa_score(x) == pytest.approx(p[PA], abs=1e-6)
    assert 0 < m.pa_score(x) < 1


def test_batched_scores_match_single():
    m = PADModel.create(SMALL, FusionConfig(reduction_ratio=4))
    xs = np.stack([image(i) for i in range(5)])
    batch = m.pa_score(xs, batch_size=2)
    assert batch.shape == (5,)
    for i in range(5):
        assert batch[i] == pytest.approx(m.pa_score(xs[i]), abs=1e-6)


def test_none_and_parallel_agree_when_attention_is_off():
    base = PADModel.create(SMALL, FusionConfig(mode="none"), seed=1)
    par = ablation_variant(base, "parallel")
    c = SMALL.channels[4]
    par.attention.pam_post = PostConv.identity(c)
    par.attention.cam_post = PostConv.identity(c)
    # identity branches sum to 2 * tap5, so the head sees twice the pooled features
    par.fc_w.data[...] = base.fc_w.data / 2
    par.fc_b.data[...] = base.fc_b.data
    x = image(2)
    f_none, f_par = base.features(x), par.features(x)
    np.testing.assert_allclose(f_par["attended"].data, 2 * f_none["attended"].data, rtol=1e-6)
    assert par.pa_score(x) == pytest.approx(base.pa_score(x), abs=1e-5)


def test_forward_is_deterministic():
    x = image(4)
    a = PADModel.create(SMALL, FusionConfig(reduction_ratio=4), seed=7).pa_score(x)
    b = PADModel.create(SMALL, FusionConfig(reduction_ratio=4), seed=7).pa_score(x)
    c = PADModel.create(SMALL, FusionConfig(reduction_ratio=4), seed=8).pa_score(x)
    assert a == b and a != c


def test_wrong_input_size():
    with pytest.raises(DimensionError):
        PADModel.create(SMALL)(np.zeros((1, 64, 64), np.float32))


@pytest.mark.parametrize("mode", ["none", "pam_only", "cam_only", "parallel", "sequential", "hierarchical"])
def test_registry_unique_and_count_deterministic(mode):
    fusion = FusionConfig(mode=mode, reduction_ratio=4)
    a = PADModel.create(SMALL, fusion, seed=0)
    b = PADModel.create(SMALL, fusion, seed=99)
    assert list(a.parameters()) == list(b.parameters())
    assert a.num_parameters() == b.num_parameters()
    assert len({id(p) for p in a.parameters().values()}) == len(a.parameters())


def test_ablation_variant_structure():
    base = PADModel.create(SMALL, FusionConfig(mode="parallel", reduction_ratio=4))
    none = ablation_variant(base, "none")
    x = image(0)
    feats = none.features(x)
    assert feats["attended"] is feats["tap5"]
    assert not any(k.startswith("attention.") for k in none.parameters())
    pam = ablation_variant(base, "pam")
    assert not any("beta" in k for k in pam.parameters())
    assert any("alpha" in k for k in pam.parameters())
    for k, v in base.parameters().items():
        if k.startswith("backbone."):
            np.testing.assert_array_equal(pam.parameters()[k].data, v.data)
            assert pam.parameters()[k] is not v
    with pytest.raises(ValueError):
        ablation_variant(base, "bam")


def test_ablation_variant_rejects_bad_ratio():
    base = PADModel.create(BackboneConfig(channels=(4, 4, 6, 6, 8), input_size=32), FusionConfig(mode="none", reduction_ratio=4))
    ablation_variant(base, "pam")
    with pytest.raises(DimensionError):
        ablation_variant(base, "hierarchical")


def test_six_variants_train_one_step():
    base = PADModel.create(SMALL, FusionConfig(mode="none", reduction_ratio=4))
    xs = np.stack([image(i) for i in range(4)])
    ys = np.array([0, 1, 0, 1])
    for variant in VARIANTS:
        m = ablation_variant(base, variant)
        log = train(m, (xs, ys), TrainConfig(epochs=1, batch_size=4, augment=False, learning_rate=1e-3))
        assert np.isfinite(log.losses).all()


@pytest.mark.parametrize("mode", ["parallel", "sequential", "hierarchical"])
def test_model_gradients_at_desk_scale(mode):
    with precision(np.float64):
        m = PADModel.create(TINY, FusionConfig(mode=mode, reduction_ratio=2), seed=5, dtype=np.float64)
        rng = np.random.default_rng(3)
        for name, p in m.parameters().items():
            if p.size == 1:
                p.data[...] = 0.5  # exercise the attention branches
            elif name.endswith(".b"):
                # zero biases put dead ReLU inputs exactly on the kink
                p.data[...] = rng.uniform(0.05, 0.2, p.shape)
        x = Tensor(np.random.default_rng(0).random((1, 32, 32)))
        err = grad_check(lambda: T.softmax_cross_entropy(m(x), PA), list(m.parameters().values()),
                         max_probes=6, rng=np.random.default_rng(1))
    assert err < 1e-4


def test_checkpoint_round_trip_bitwise(tmp_path):
    m = PADModel.create(SMALL, FusionConfig(mode="hierarchical", reduction_ratio=4), seed=2)
    path = tmp_path / "m.agpd"
    m.save(path)
    fresh = PADModel.create(SMALL, FusionConfig(mode="hierarchical", reduction_ratio=4), seed=3)
    fresh.load(path)
    for k, v in m.parameters().items():
        assert fresh.parameters()[k].data.tobytes() == v.data.tobytes()
    fresh.save(tmp_path / "again.agpd")
    assert path.read_bytes() == (tmp_path / "again.agpd").read_bytes()


def test_checkpoint_layout():
    buf = io.BytesIO()
    write_checkpoint(buf, {"w": np.ones((2,), np.float32)})
    raw = buf.getvalue()
    assert raw[:4] == b"AGPD"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<H", raw[12:14]) == (1,)
    assert raw[14:15] == b"w" and raw[15:19] == b"AGTD"
    buf.seek(0)
    assert read_checkpoint(buf)["w"].tolist() == [1.0, 1.0]


def test_checkpoint_mismatch(tmp_path):
    m = PADModel.create(SMALL, FusionConfig(mode="none"))
    m.save(tmp_path / "none.agpd")
    other = PADModel.create(SMALL, FusionConfig(mode="cam_only"))
    with pytest.raises(ValueError, match="missing"):
        other.load(tmp_path / "none.agpd")


def test_class_constants():
    assert (LIVE, PA) == (0, 1)
