import numpy as np
import pytest

from knnmoco import autodiff as ad
from knnmoco.autodiff import Tensor
from knnmoco.encoder import (
    EncoderConfig,
    EncoderPair,
    ema_update,
    forward_backbone,
    forward_head,
    init_encoder_params,
    momentum_checkpoint_name,
    spatial_features,
)
from knnmoco.errors import ConfigError

CFG = EncoderConfig()


@pytest.fixture
def pair(rng):
    return EncoderPair.create(CFG, 0.999, rng)


def batch_images(rng, b=3, side=32):
    return rng.uniform(size=(b, 3, side, side))


class TestBackbone:
    def test_zero_image_zero_final_layer_gives_zero_features(self, rng):
        params = init_encoder_params(CFG, rng)
        params["g.conv3.w"] = Tensor(np.zeros_like(params["g.conv3.w"].data), True)
        out = forward_backbone(params, CFG, np.zeros((2, 3, 32, 32)))
        assert np.array_equal(out.data, np.zeros((2, CFG.feat_dim)))

    def test_output_shape_contract(self, pair, rng):
        for side in (16, 32, 64):
            out = forward_backbone(pair.online, CFG, batch_images(rng, 5, side))
            assert out.shape == (5, CFG.feat_dim)

    def test_batch_permutation_permutes_rows(self, pair, rng):
        imgs = batch_images(rng, 4)
        perm = np.array([2, 0, 3, 1])
        a = forward_backbone(pair.online, CFG, imgs).data
        b = forward_backbone(pair.online, CFG, imgs[perm]).data
        assert a[perm] == pytest.approx(b, abs=0)

    def test_unsupported_resolution_rejected(self, pair, rng):
        with pytest.raises(ConfigError):
            forward_backbone(pair.online, CFG, batch_images(rng, 2, 24))

    def test_spatial_features_keep_structure(self, pair, rng):
        fmap = spatial_features(pair.online, CFG, rng.uniform(size=(64, 64, 3)))
        assert fmap.shape == (8, 8, CFG.feat_dim)
        pooled = forward_backbone(pair.online, CFG,
                                  np.transpose(rng.uniform(size=(64, 64, 3)), (2, 0, 1))[None])
        assert pooled.shape == (1, CFG.feat_dim)

    def test_forward_determinism(self, pair, rng):
        imgs = batch_images(rng)
        a = forward_backbone(pair.online, CFG, imgs).data
        b = forward_backbone(pair.online, CFG, imgs).data
        assert np.array_equal(a, b)


class TestHead:
    def test_rows_unit_norm(self, pair, rng):
        feats = rng.standard_normal((7, CFG.feat_dim))
        out = forward_head(pair.online, feats)
        assert np.abs(np.linalg.norm(out.data, axis=1) - 1.0).max() <= 1e-9

    def test_hand_normalization_through_identity_head(self):
        params = {
            "h.fc1.w": Tensor(np.eye(2), True),
            "h.fc1.b": Tensor(np.zeros(2), True),
            "h.fc2.w": Tensor(np.eye(2), True),
            "h.fc2.b": Tensor(np.zeros(2), True),
        }
        out = forward_head(params, np.array([[3.0, 4.0]]))
        assert out.data == pytest.approx(np.array([[0.6, 0.8]]), abs=1e-12)

    def test_scaling_probe_detects_head_structure(self, rng):
        # bias-free single-linear head: h(2f) == h(f); the real MLP head differs
        linear_only = {
            "h.fc1.w": Tensor(np.eye(2)),
            "h.fc1.b": Tensor(np.zeros(2)),
            "h.fc2.w": Tensor(rng.standard_normal((2, 2))),
            "h.fc2.b": Tensor(np.zeros(2)),
        }
        f = np.abs(rng.standard_normal((3, 2))) + 0.1  # positive: relu is identity
        assert forward_head(linear_only, f).data == pytest.approx(
            forward_head(linear_only, 2.0 * f).data, abs=1e-12
        )
        mlp = {
            "h.fc1.w": Tensor(rng.standard_normal((2, 4))),
            "h.fc1.b": Tensor(rng.standard_normal(4)),
            "h.fc2.w": Tensor(rng.standard_normal((4, 2))),
            "h.fc2.b": Tensor(rng.standard_normal(2)),
        }
        assert not np.allclose(forward_head(mlp, f).data,
                               forward_head(mlp, 2.0 * f).data)


class TestEMA:
    def test_m_one_keeps_momentum_params(self, rng):
        pair = EncoderPair.create(CFG, 1.0, rng)
        before = {k: v.data.copy() for k, v in pair.momentum_params.items()}
        for p in pair.online.values():
            p.data = p.data + 1.0
        ema_update(pair)
        for k in before:
            assert np.array_equal(pair.momentum_params[k].data, before[k])

    def test_m_zero_copies_online(self, rng):
        pair = EncoderPair.create(CFG, 0.0, rng)
        for p in pair.online.values():
            p.data = p.data + 0.5
        ema_update(pair)
        for k, p in pair.online.items():
            assert np.array_equal(pair.momentum_params[k].data, p.data)

    def test_one_step_arithmetic(self):
        pair = EncoderPair(
            CFG,
            {"g.conv1.w": Tensor(np.array([1.0]), True)},
            {"g.conv1.w": Tensor(np.array([0.0]))},
            m=0.999,
        )
        ema_update(pair)
        assert pair.momentum_params["g.conv1.w"].data[0] == pytest.approx(0.001)

    def test_geometric_convergence(self, rng):
        pair = EncoderPair.create(CFG, 0.9, rng)
        start = {k: v.data.copy() for k, v in pair.momentum_params.items()}
        for p in pair.online.values():
            p.data = p.data + 0.25  # frozen online params p
        for _ in range(7):
            ema_update(pair)
        for k, q0 in start.items():
            p = pair.online[k].data
            expected = p + (0.9 ** 7) * (q0 - p)
            assert np.abs(pair.momentum_params[k].data - expected).max() <= 1e-12

    def test_construction_is_bit_equal_copy(self, pair):
        for k, p in pair.online.items():
            assert np.array_equal(pair.momentum_params[k].data, p.data)

    def test_momentum_branch_never_gets_gradients(self, pair, rng):
        imgs = batch_images(rng, 2)
        feats, embeds = pair.forward_online(imgs)
        m_feats, m_embeds = pair.forward_momentum(imgs)
        assert isinstance(m_embeds, np.ndarray)
        loss = ad.mean(ad.matmul(embeds, m_embeds.T))
        loss.backward()
        for p in pair.momentum_params.values():
            assert p.grad is None and not p.requires_grad
        assert any(p.grad is not None for p in pair.online.values())

    def test_bad_momentum_coefficient(self, rng):
        with pytest.raises(ConfigError):
            EncoderPair.create(CFG, 1.5, rng)


def test_momentum_checkpoint_namespacing():
    assert momentum_checkpoint_name("g.conv1.w") == "gm.conv1.w"
    assert momentum_checkpoint_name("h.fc2.b") == "hm.fc2.b"
