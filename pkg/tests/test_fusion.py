import numpy as np
import pytest

from promptseg.errors import BadChecksum, ShapeMismatch
from promptseg.fusion import (
    FusionCheckpoint,
    FusionParams,
    FusionTargets,
    class_bias,
    fuse_logits,
    fusion_backward,
    fusion_config_hash,
    init_fusion,
    load_checkpoint,
    save_checkpoint,
)
from promptseg.grids import LabelMap, LogitTensor, argmax_channels, softmax_channels
from promptseg.losses import LossConfig
from promptseg.optim import AdamWState


def small_params(seed=0, e=10, h=6, c=4):
    return init_fusion(c, seed, embed_dim=e, hidden_dim=h)


class TestInit:
    def test_deterministic(self):
        a = init_fusion(14, 3)
        b = init_fusion(14, 3)
        for name in ("w1", "b1", "w2", "b2"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert (a.alpha, a.beta) == (0.1, 0.1)

    def test_biases_zero_at_init(self):
        p = init_fusion(5, 1)
        assert np.all(p.b1 == 0.0)
        assert np.all(p.b2 == 0.0)

    def test_fresh_bias_small_for_unit_embeddings(self):
        rng = np.random.default_rng(0)
        for seed in range(100):
            p = init_fusion(14, seed)
            t = rng.normal(size=p.embed_dim)
            t /= np.linalg.norm(t)
            assert np.max(np.abs(class_bias(p, t))) < 1.0


class TestClassBias:
    def test_zero_params_zero_bias(self):
        p = FusionParams(
            np.zeros((8, 4)), np.zeros(4), np.zeros((4, 3)), np.zeros(3), 0.1, 0.1
        )
        assert np.all(class_bias(p, np.ones(8)) == 0.0)

    def test_dead_hidden_passes_only_b2(self):
        v = np.array([0.5, -1.5, 2.0])
        p = FusionParams(
            np.zeros((8, 4)), np.zeros(4), np.full((4, 3), 9.0), v.copy(), 0.1, 0.1
        )
        assert np.array_equal(class_bias(p, np.ones(8)), v)

    def test_hand_case(self):
        p = FusionParams(
            w1=np.array([[1.0], [0.0]]),
            b1=np.array([-0.5]),
            w2=np.array([[2.0, -1.0]]),
            b2=np.zeros(2),
            alpha=0.1,
            beta=0.1,
        )
        got = class_bias(p, np.array([1.0, 0.0]))
        assert np.allclose(got, [1.0, -0.5], atol=1e-15)

    def test_piecewise_linear_in_scaling(self):
        p = small_params(7)
        rng = np.random.default_rng(1)
        t = rng.normal(size=p.embed_dim)
        base = class_bias(p, t) - p.b2
        # small scalings keep every ReLU sign, so the W-part scales linearly
        for s in (0.9, 1.1):
            scaled = class_bias(p, s * t) - p.b2
            pre = t @ p.w1 + p.b1
            if np.all(np.sign(pre) == np.sign(s * (t @ p.w1) + p.b1)):
                grown = ((s * t) @ p.w1 + p.b1).clip(min=0) @ p.w2
                assert np.allclose(scaled, grown, atol=1e-12)


class TestFuseLogits:
    def test_identity_at_zero_scalars(self):
        rng = np.random.default_rng(2)
        vis = LogitTensor(rng.normal(size=(4, 3, 3, 3)))
        fused = fuse_logits(vis, rng.normal(size=4), 0.0, 0.0, None)
        assert np.array_equal(
            argmax_channels(softmax_channels(fused)).data,
            argmax_channels(softmax_channels(vis)).data,
        )
        assert np.allclose(fused.data, vis.data)

    def test_single_channel_shift(self):
        vis = LogitTensor(np.zeros((3, 2, 2, 2)))
        b = np.array([1.0, 0.0, 0.0])
        fused = fuse_logits(vis, b, 2.0, 0.0, None)
        assert np.all(fused.data[0] == 2.0)
        assert np.all(fused.data[1:] == 0.0)

    def test_constant_bias_keeps_argmax(self):
        rng = np.random.default_rng(3)
        vis = LogitTensor(rng.normal(size=(5, 3, 3, 3)))
        fused = fuse_logits(vis, np.full(5, 3.7), 1.0, 0.0, None)
        assert np.array_equal(
            argmax_channels(vis).data, argmax_channels(fused).data
        )

    def test_prior_term(self):
        rng = np.random.default_rng(4)
        vis = LogitTensor(np.zeros((3, 2, 2, 2)))
        prior = LogitTensor(np.clip(rng.random((3, 2, 2, 2)), 0, 1))
        fused = fuse_logits(vis, np.zeros(3), 0.0, 2.0, prior)
        assert np.allclose(fused.data, 2.0 * prior.data)

    def test_shape_mismatch(self):
        vis = LogitTensor(np.zeros((3, 2, 2, 2)))
        with pytest.raises(ShapeMismatch):
            fuse_logits(vis, np.zeros(4), 1.0, 1.0, None)
        with pytest.raises(ShapeMismatch):
            fuse_logits(vis, np.zeros(3), 1.0, 1.0, LogitTensor(np.zeros((3, 1, 2, 2))))


def fd_case(seed, c):
    rng = np.random.default_rng(seed)
    e, h = 12, 7
    params = init_fusion(c, seed, embed_dim=e, hidden_dim=h)
    t = rng.normal(size=e)
    t /= np.linalg.norm(t)
    vis = LogitTensor(rng.normal(size=(c, 3, 3, 3)) * 2)
    prior = LogitTensor(np.clip(rng.random((c, 3, 3, 3)), 0, 1))
    labels = LabelMap(rng.integers(0, c, size=(3, 3, 3)))
    presence = np.zeros(c)
    presence[1] = 1
    field = (rng.random((3, 3, 3)) > 0.5).astype(float)
    targets = FusionTargets(labels, presence, [(2, 1, field)])
    return params, t, vis, prior, targets


def max_rel_error(params, t, vis, prior, targets, cfg, n_coords=5):
    bd, grads = fusion_backward(t, vis, prior, targets, cfg, params)

    def total(p):
        return fusion_backward(t, vis, prior, targets, cfg, p)[0].total

    h = 1e-5
    worst = 0.0
    rng = np.random.default_rng(99)
    for name in ("w1", "b1", "w2", "b2", "alpha", "beta"):
        arr = np.atleast_1d(np.asarray(getattr(params, name), dtype=float))
        g = np.atleast_1d(np.asarray(getattr(grads, name), dtype=float))
        for k in rng.choice(arr.size, size=min(n_coords, arr.size), replace=False):
            for sign, store in ((+1, "up"), (-1, "dn")):
                p2 = params.copy()
                a2 = np.atleast_1d(np.asarray(getattr(p2, name), dtype=float)).copy()
                a2.flat[k] += sign * h
                if name in ("alpha", "beta"):
                    setattr(p2, name, float(a2[0]))
                else:
                    setattr(p2, name, a2.reshape(getattr(params, name).shape))
                if sign > 0:
                    up = total(p2)
                else:
                    dn = total(p2)
            fd = (up - dn) / (2 * h)
            an = float(g.flat[k])
            denom = max(abs(fd), abs(an))
            rel = abs(fd - an) / denom if denom > 1e-10 else abs(fd - an)
            worst = max(worst, rel)
    return worst, bd


class TestFusionBackward:
    @pytest.mark.parametrize("c", [3, 5])
    def test_gradients_match_fd(self, c):
        params, t, vis, prior, targets = fd_case(17, c)
        worst, bd = max_rel_error(params, t, vis, prior, targets, LossConfig())
        assert worst < 1e-4
        assert bd.total > 0

    def test_alpha_gradient_two_class_case(self):
        rng = np.random.default_rng(5)
        c = 2
        params = init_fusion(c, 5, embed_dim=6, hidden_dim=4)
        t = rng.normal(size=6)
        vis = LogitTensor(rng.normal(size=(c, 2, 2, 2)))
        labels = LabelMap(rng.integers(0, c, size=(2, 2, 2)))
        presence = np.array([0.0, 1.0])
        targets = FusionTargets(labels, presence, [])
        cfg = LossConfig()
        _, grads = fusion_backward(t, vis, None, targets, cfg, params)
        h = 1e-5
        for delta in (h, -h):
            p2 = params.copy()
            p2.alpha = params.alpha + delta
            val = fusion_backward(t, vis, None, targets, cfg, p2)[0].total
            if delta > 0:
                up = val
            else:
                dn = val
        fd = (up - dn) / (2 * h)
        assert grads.alpha == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_loss_deterministic_for_fixed_order(self):
        params, t, vis, prior, targets = fd_case(23, 4)
        cfg = LossConfig()
        a = fusion_backward(t, vis, prior, targets, cfg, params)[0]
        b = fusion_backward(t, vis, prior, targets, cfg, params)[0]
        assert a.as_tuple() == b.as_tuple()

    def test_no_prior_means_zero_beta_gradient(self):
        params, t, vis, _, targets = fd_case(29, 3)
        _, grads = fusion_backward(t, vis, None, targets, LossConfig(), params)
        assert grads.beta == 0.0


class TestCheckpoint:
    def roundtrip(self, tmp_path, params, state=None):
        state = state or AdamWState()
        ckpt = FusionCheckpoint(
            params, 7, state, fusion_config_hash(params.embed_dim, params.hidden_dim, params.channels)
        )
        path = str(tmp_path / "f.ckpt")
        save_checkpoint(ckpt, path)
        return path, load_checkpoint(path)

    def test_roundtrip_bit_identical(self, tmp_path):
        params = small_params(5)
        state = AdamWState(step=3)
        state.m = {k: np.full_like(v, 0.25) for k, v in params.as_dict().items()}
        state.v = {k: np.full_like(v, 0.5) for k, v in params.as_dict().items()}
        path, back = self.roundtrip(tmp_path, params, state)
        for name in ("w1", "b1", "w2", "b2"):
            assert np.array_equal(getattr(back.params, name), getattr(params, name))
        assert back.params.alpha == params.alpha
        assert back.opt_state.step == 3
        assert np.array_equal(back.opt_state.m["w1"], state.m["w1"])
        assert back.epoch == 7

    def test_truncated_payload_detected(self, tmp_path):
        params = small_params(6)
        path, _ = self.roundtrip(tmp_path, params)
        raw = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(raw[:-16])
        with pytest.raises(BadChecksum):
            load_checkpoint(path)

    def test_channel_mismatch(self, tmp_path):
        params = init_fusion(14, 0)
        path, _ = self.roundtrip(tmp_path, params)
        with pytest.raises(ShapeMismatch):
            load_checkpoint(path, expect_channels=5)
