import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrn.autodiff import ShapeError, Tensor, grad_check, ops, precision
from cdrn.nn import CSFF, SAM, Conv2d, GroupNorm, HINBlock, Linear, Module, ResBlock, SARBlock, SARConfig


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def sar_reference(block: SARBlock, x: np.ndarray) -> np.ndarray:
    """Scalar-loop forward of a SAR block on a (1, C, 1, 1) input."""
    cfg = block.cfg
    c, k, r, gw = cfg.channels, cfg.cardinal, cfg.radix, cfg.group_width
    xv = x.reshape(c).astype(np.float64)
    # 1x1 spatial input with pad 1: only the centre tap of each 3x3 kernel sees data
    wc = block.split_conv.weight.data[:, :, 1, 1].astype(np.float64)
    u = [max(0.0, sum(wc[o, i] * xv[i] for i in range(c)) + float(block.split_conv.bias.data[o])) for o in range(c * r)]
    splits = [u[s * c : (s + 1) * c] for s in range(r)]
    out = [0.0] * c
    for g in range(k):
        pooled = [sum(splits[s][g * gw + j] for s in range(r)) for j in range(gw)]
        w1, b1 = block.fc1[g].weight.data.astype(np.float64), block.fc1[g].bias.data.astype(np.float64)
        w2, b2 = block.fc2[g].weight.data.astype(np.float64), block.fc2[g].bias.data.astype(np.float64)
        hidden = [max(0.0, sum(w1[h, j] * pooled[j] for j in range(gw)) + b1[h]) for h in range(cfg.hidden)]
        logits = [sum(w2[o, h] * hidden[h] for h in range(cfg.hidden)) + b2[o] for o in range(gw * r)]
        for j in range(gw):
            ls = [logits[s * gw + j] for s in range(r)]
            if r > 1:
                m = max(ls)
                e = [np.exp(v - m) for v in ls]
                att = [v / sum(e) for v in e]
            else:
                att = [1.0 / (1.0 + np.exp(-ls[0]))]
            out[g * gw + j] = sum(att[s] * splits[s][g * gw + j] for s in range(r))
    wr = block.res_conv.weight.data[:, :, 0, 0].astype(np.float64)
    br = block.res_conv.bias.data.astype(np.float64)
    return np.array([out[o] + sum(wr[o, i] * xv[i] for i in range(c)) + br[o] for o in range(c)])


class TestModule:
    def test_named_parameters_in_registration_order(self, rng):
        class Two(Module):
            def __init__(self):
                super().__init__()
                self.a = Linear(rng, 2, 3)
                self.b = Conv2d(rng, 3, 4, 1)

        names = [n for n, _ in Two().named_parameters()]
        assert names == ["a.weight", "a.bias", "b.weight", "b.bias"]

    def test_state_dict_round_trip(self, rng):
        a, b = ResBlock(rng, 4), ResBlock(rng, 4)
        b.load_state_dict(a.state_dict())
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)

    def test_load_rejects_missing_keys(self, rng):
        a = ResBlock(rng, 4)
        sd = a.state_dict()
        sd.pop("conv1.weight")
        with pytest.raises(Exception):
            ResBlock(rng, 4).load_state_dict(sd)

    def test_freeze(self, rng):
        m = ResBlock(rng, 4).freeze()
        assert m.frozen and not any(p.requires_grad for p in m.parameters())
        assert not m.unfreeze().frozen

    def test_kaiming_std(self):
        conv = Conv2d(np.random.default_rng(0), 32, 64, 3)
        fan_in = 32 * 9
        assert conv.weight.size >= 1000
        assert abs(conv.weight.data.std() / np.sqrt(2.0 / fan_in) - 1) < 0.1
        assert np.all(conv.bias.data == 0)

    def test_group_norm_layer(self, rng):
        gn = GroupNorm(2, 4)
        y = gn(Tensor(rng.standard_normal((2, 4, 3, 3)) * 3 + 1)).data.astype(np.float64)
        grouped = y.reshape(2, 2, -1)
        assert np.abs(grouped.mean(axis=2)).max() < 1e-5


class TestHIN:
    def test_output_shape(self, rng):
        block = HINBlock(rng, 3, 8)
        assert block(Tensor(rng.standard_normal((2, 3, 10, 12)))).shape == (2, 8, 10, 12)

    def test_odd_width_rejected(self, rng):
        with pytest.raises(ShapeError):
            HINBlock(rng, 3, 7)

    def test_normalized_half(self, rng):
        block = HINBlock(rng, 3, 8)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        pre = block.conv1(x)
        normed, raw = ops.split(pre, 2, axis=1)
        n = ops.instance_norm(normed, block.norm_weight, block.norm_bias).data.astype(np.float64)
        assert np.abs(n.mean(axis=(2, 3))).max() < 1e-5
        # the raw half keeps the conv statistics rather than being normalized
        assert np.abs(raw.data.astype(np.float64).std(axis=(2, 3)) - 1).max() > 1e-2

    def test_forward_composition(self, rng):
        block = HINBlock(rng, 4, 6)
        x = Tensor(rng.standard_normal((1, 4, 5, 5)))
        pre = block.conv1(x).data
        half = pre[:, :3]
        mu = half.mean(axis=(2, 3), keepdims=True)
        var = half.var(axis=(2, 3), keepdims=True)
        mixed = np.concatenate([(half - mu) / np.sqrt(var + 1e-5), pre[:, 3:]], axis=1)
        act = np.where(mixed > 0, mixed, 0.2 * mixed)
        post = ops.conv2d(Tensor(act), block.conv2.weight, block.conv2.bias, pad=1).data
        ref = np.where(post > 0, post, 0.2 * post) + block.identity(x).data
        np.testing.assert_allclose(block(x).data, ref, atol=1e-5)

    def test_gradient(self, rng):
        with precision("f64"):
            block = HINBlock(rng, 2, 4)
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        rep = grad_check(lambda: block(x), [x] + block.parameters(), mode="f64", tol=1e-6)
        assert rep.passed, str(rep)


class TestSAR:
    @pytest.mark.parametrize("k,r", [(2, 2), (1, 1), (1, 2), (2, 1)])
    def test_matches_scalar_reference(self, k, r):
        rng = np.random.default_rng(11)
        with precision("f64"):
            block = SARBlock(rng, SARConfig(8, k, r))
            for p in block.parameters():
                p.data = rng.standard_normal(p.shape) * 0.5
        x = rng.standard_normal((1, 8, 1, 1))
        with precision("f64"):
            got = block(Tensor(x)).data.reshape(-1)
        np.testing.assert_allclose(got, sar_reference(block, x), atol=1e-12)

    def test_degenerate_gate(self, rng):
        block = SARBlock(rng, SARConfig(4, 1, 1))
        x = Tensor(rng.standard_normal((1, 4, 6, 6)))
        _, att = block(x, return_attention=True)
        assert np.all((att[0] > 0) & (att[0] < 1))
        plain = ops.relu(block.split_conv(x)) + block.res_conv(x)
        np.testing.assert_allclose(block(x, gate_override=1.0).data, plain.data, atol=1e-6)

    def test_identical_splits_get_equal_attention(self, rng):
        block = SARBlock(rng, SARConfig(8, 2, 2))
        w, b = block.split_conv.weight, block.split_conv.bias
        w.data[8:] = w.data[:8]
        b.data[8:] = b.data[:8]
        for fc in block.fc2:
            gw = block.cfg.group_width
            fc.weight.data[gw:] = fc.weight.data[:gw]
            fc.bias.data[gw:] = fc.bias.data[:gw]
        _, att = block(Tensor(rng.standard_normal((2, 8, 4, 4))), return_attention=True)
        for a in att:
            assert np.all(a == 0.5)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([(1, 2), (2, 2), (2, 4), (4, 2)]))
    def test_attention_sums_to_one(self, seed, kr):
        rng = np.random.default_rng(seed)
        k, r = kr
        block = SARBlock(rng, SARConfig(16, k, r))
        for fc in list(block.fc1) + list(block.fc2):
            fc.weight.data = fc.weight.data * 5
        _, att = block(Tensor(rng.standard_normal((2, 16, 3, 3))), return_attention=True)
        assert len(att) == k
        for a in att:
            assert a.shape == (2, r, 16 // k)
            np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)

    def test_shape_preserving(self, rng):
        block = SARBlock(rng, SARConfig(8))
        assert block(Tensor(rng.standard_normal((2, 8, 5, 7)))).shape == (2, 8, 5, 7)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            SARConfig(6, 2, 2)

    def test_gradient(self, rng):
        with precision("f64"):
            block = SARBlock(rng, SARConfig(8, 2, 2))
        x = Tensor(rng.standard_normal((1, 8, 4, 4)))
        rep = grad_check(lambda: block(x), [x] + block.parameters(), mode="f64", tol=1e-6)
        assert rep.passed, str(rep)


class TestSAM:
    def test_zero_features_give_degraded_plus_bias(self, rng):
        sam = SAM(rng, 8)
        sam.to_image.bias.data[:] = [0.1, -0.2, 0.3]
        degraded = rng.random((1, 3, 6, 6)).astype(np.float32)
        restored, gated = sam(Tensor(np.zeros((1, 8, 6, 6))), Tensor(degraded))
        np.testing.assert_allclose(restored.data, degraded + np.array([0.1, -0.2, 0.3]).reshape(1, 3, 1, 1), atol=1e-6)
        assert np.all(gated.data == 0)

    def test_mask_in_unit_interval(self, rng):
        sam = SAM(rng, 8)
        restored, _ = sam(Tensor(rng.standard_normal((1, 8, 5, 5))), Tensor(rng.random((1, 3, 5, 5))))
        mask = ops.sigmoid(sam.to_mask(restored)).data
        assert np.all((mask > 0) & (mask < 1))

    def test_gradient_reaches_features(self, rng):
        sam = SAM(rng, 4)
        f = Tensor(rng.standard_normal((1, 4, 5, 5)), requires_grad=True)
        restored, gated = sam(f, Tensor(rng.random((1, 3, 5, 5))))
        proj = [rng.standard_normal(restored.shape), rng.standard_normal(gated.shape)]
        (ops.sum(restored * proj[0].astype(np.float32)) + ops.sum(gated * proj[1].astype(np.float32))).backward()
        assert np.abs(f.grad).max() > 0

    def test_gradient_check(self, rng):
        with precision("f64"):
            sam = SAM(rng, 4)
        f = Tensor(rng.standard_normal((1, 4, 4, 4)))
        d = Tensor(rng.random((1, 3, 4, 4)))
        rep = grad_check(lambda: sam(f, d), [f, d] + sam.parameters(), mode="f64", tol=1e-6)
        assert rep.passed, str(rep)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            SAM(rng, 4)(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 3, 5, 5))))


class TestCSFF:
    def test_zero_features_inject_nothing(self, rng):
        csff = CSFF(rng, [4, 8])
        zeros = [Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((1, 8, 4, 4)))]
        assert all(np.all(o.data == 0) for o in csff(zeros, zeros))

    def test_shapes_per_level(self, rng):
        csff = CSFF(rng, [4, 8, 16])
        shapes = [(1, 4, 8, 8), (1, 8, 4, 4), (1, 16, 2, 2)]
        enc = [Tensor(rng.standard_normal(s)) for s in shapes]
        dec = [Tensor(rng.standard_normal(s)) for s in shapes]
        assert [o.shape for o in csff(enc, dec)] == shapes

    def test_level_count_checked(self, rng):
        csff = CSFF(rng, [4, 8])
        with pytest.raises(ShapeError):
            csff([Tensor(np.zeros((1, 4, 2, 2)))], [Tensor(np.zeros((1, 4, 2, 2)))])

    def test_gradient(self, rng):
        with precision("f64"):
            csff = CSFF(rng, [2, 4])
        enc = [Tensor(rng.standard_normal((1, 2, 4, 4))), Tensor(rng.standard_normal((1, 4, 2, 2)))]
        dec = [Tensor(rng.standard_normal((1, 2, 4, 4))), Tensor(rng.standard_normal((1, 4, 2, 2)))]
        rep = grad_check(lambda: tuple(csff(enc, dec)), enc + dec + csff.parameters(), mode="f64", tol=1e-6)
        assert rep.passed, str(rep)


class TestResBlock:
    def test_forward(self, rng):
        block = ResBlock(rng, 4)
        x = Tensor(rng.standard_normal((1, 4, 5, 5)))
        ref = block.conv2(ops.relu(block.conv1(x))).data + block.res_conv(x).data
        np.testing.assert_array_equal(block(x).data, ref)
