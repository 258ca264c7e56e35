"""Layer semantics: convolution, normalization, dropout, attention,
encoder layers, and the checkpoint format."""

import io

import numpy as np
import pytest

from arne import nn
from arne import tensor as T
from arne.errors import ContractError, FormatError, ShapeError
from arne.tensor import Tensor


def rng():
    return np.random.default_rng(0)


def conv_oracle(x, w, b, stride=2, pad=1):
    """Direct nested-loop cross-correlation."""
    bsz, cin, h, width = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (width + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((bsz, cout, oh, ow), dtype=x.dtype)
    for n in range(bsz):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


class TestConv2d:
    def test_matches_bruteforce_oracle(self):
        with T.precision(np.float64):
            r = rng()
            x = r.standard_normal((1, 1, 6, 6))
            layer = nn.Conv2d(1, 2, r)
            out = layer(Tensor(x))
            expected = conv_oracle(x, layer.weight.data, layer.bias.data)
            np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_halves_even_spatial_size(self):
        layer = nn.Conv2d(3, 32, rng())
        out = layer(Tensor(np.zeros((2, 3, 16, 20))))
        assert out.shape == (2, 32, 8, 10)

    def test_160_input_through_four_layers_gives_10x10(self):
        h = 160
        for _ in range(4):
            h = (h + 2 - 3) // 2 + 1
        assert h == 10

    def test_zero_input_zero_bias_gives_zero(self):
        layer = nn.Conv2d(1, 4, rng())
        out = layer(Tensor(np.zeros((1, 1, 8, 8))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_channel_mismatch(self):
        layer = nn.Conv2d(3, 4, rng())
        with pytest.raises(ShapeError, match="channels"):
            layer(Tensor(np.zeros((1, 2, 8, 8))))


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        with T.precision(np.float64):
            layer = nn.BatchNorm2d(3)
            x = Tensor(rng().standard_normal((8, 3, 5, 5)) * 4 + 7)
            out = layer(x).data
            np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
            np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_affine_applies_after_normalization(self):
        with T.precision(np.float64):
            base = nn.BatchNorm2d(2)
            scaled = nn.BatchNorm2d(2)
            scaled.gamma.data = np.full(2, 2.0)
            scaled.beta.data = np.full(2, 3.0)
            x = Tensor(rng().standard_normal((4, 2, 3, 3)))
            np.testing.assert_allclose(scaled(x).data, 2.0 * base(x).data + 3.0, atol=1e-6)

    def test_eval_uses_running_stats(self):
        with T.precision(np.float64):
            layer = nn.BatchNorm2d(2)
            layer.running_mean.data = np.array([1.0, -2.0])
            layer.running_var.data = np.array([4.0, 9.0])
            layer.gamma.data = np.array([2.0, 0.5])
            layer.beta.data = np.array([0.0, 1.0])
            layer.eval()
            x = np.array([[[[3.0]], [[4.0]]], [[[1.0]], [[-2.0]]]])
            out = layer(Tensor(x)).data
            expected = (x - [[[1.0]], [[-2.0]]]) / np.sqrt(np.array([[[4.0]], [[9.0]]]) + 1e-5)
            expected = expected * [[[2.0]], [[0.5]]] + [[[0.0]], [[1.0]]]
            np.testing.assert_allclose(out, expected, atol=1e-7)

    def test_running_stats_updated_by_momentum(self):
        layer = nn.BatchNorm2d(1, momentum=0.1)
        x = Tensor(np.full((2, 1, 2, 2), 10.0, dtype=np.float32))
        layer(x)
        np.testing.assert_allclose(layer.running_mean.data, [1.0], atol=1e-6)

    def test_train_needs_two_values(self):
        layer = nn.BatchNorm2d(1)
        with pytest.raises(ContractError):
            layer(Tensor(np.ones((1, 1, 1, 1))))

    def test_running_var_nonnegative(self):
        layer = nn.BatchNorm2d(4)
        for _ in range(5):
            layer(Tensor(rng().standard_normal((4, 4, 3, 3))))
        assert (layer.running_var.data >= 0).all()


class TestLayerNorm:
    def test_normalizes_last_axis(self):
        with T.precision(np.float64):
            layer = nn.LayerNorm(16)
            out = layer(Tensor(rng().standard_normal((5, 16)) * 3 + 2)).data
            np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)


class TestDropout:
    def test_eval_is_identity(self):
        layer = nn.Dropout(0.5).eval()
        x = Tensor(rng().standard_normal((4, 4)))
        assert np.array_equal(layer(x).data, x.data)

    def test_train_scales_kept_values(self):
        layer = nn.Dropout(0.5)
        layer.set_rng(np.random.default_rng(0))
        x = Tensor(np.ones(1000, dtype=np.float32))
        out = layer(x).data
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 2.0)

    def test_expectation_preserved(self):
        layer = nn.Dropout(0.3)
        layer.set_rng(np.random.default_rng(1))
        x = Tensor(np.full(100_000, 5.0, dtype=np.float32))
        assert abs(layer(x).data.mean() - 5.0) / 5.0 < 0.01

    def test_invalid_rate(self):
        with pytest.raises(ContractError):
            nn.Dropout(1.0)


def mhsa_oracle(layer, x):
    """Step-by-step multi-head attention with explicit per-head loops."""
    n = x.shape[0]
    h, dk, dv = layer.n_heads, layer.d_k, layer.d_v
    q = x @ layer.proj_q.weight.data.T + layer.proj_q.bias.data
    k = x @ layer.proj_k.weight.data.T
    v = x @ layer.proj_v.weight.data.T + layer.proj_v.bias.data
    heads = []
    for i in range(h):
        qi = q[:, i * dk:(i + 1) * dk]
        ki = k[:, i * dk:(i + 1) * dk]
        vi = v[:, i * dv:(i + 1) * dv]
        scores = qi @ ki.T / np.sqrt(dk)
        scores = scores - scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights = weights / weights.sum(axis=-1, keepdims=True)
        heads.append(weights @ vi)
    merged = np.concatenate(heads, axis=-1)
    return merged @ layer.proj_out.weight.data.T + layer.proj_out.bias.data


class TestAttention:
    def test_matches_oracle(self):
        with T.precision(np.float64):
            r = rng()
            layer = nn.MultiHeadSelfAttention(8, 2, 4, 4, r, attn_dropout_p=0.0).eval()
            x = r.standard_normal((3, 8))
            np.testing.assert_allclose(layer(Tensor(x)).data, mhsa_oracle(layer, x), atol=1e-6)

    def test_single_token_returns_projected_value(self):
        with T.precision(np.float64):
            r = rng()
            layer = nn.MultiHeadSelfAttention(8, 2, 4, 4, r, attn_dropout_p=0.0).eval()
            x = r.standard_normal((1, 8))
            v = x @ layer.proj_v.weight.data.T + layer.proj_v.bias.data
            expected = v @ layer.proj_out.weight.data.T + layer.proj_out.bias.data
            np.testing.assert_allclose(layer(Tensor(x)).data, expected, atol=1e-10)

    def test_row_permutation_equivariance(self):
        with T.precision(np.float64):
            r = rng()
            layer = nn.MultiHeadSelfAttention(8, 2, 4, 4, r, attn_dropout_p=0.0).eval()
            x = r.standard_normal((6, 8))
            perm = r.permutation(6)
            np.testing.assert_allclose(layer(Tensor(x[perm])).data, layer(Tensor(x)).data[perm],
                                       atol=1e-9)

    def test_wide_heads_allowed(self):
        # concatenated head width may exceed d_model
        layer = nn.MultiHeadSelfAttention(8, 3, 4, 4, rng(), attn_dropout_p=0.0).eval()
        assert layer.proj_out.in_features == 12
        out = layer(Tensor(np.random.default_rng(1).standard_normal((4, 8)).astype(np.float32)))
        assert out.shape == (4, 8)


class TestEncoderLayer:
    def make(self, dropout=0.0):
        return nn.TransformerEncoderLayer(8, 2, 4, 4, 16, rng(),
                                          dropout_p=dropout, attn_dropout_p=dropout)

    def test_shape_preserved(self):
        layer = self.make().eval()
        for n in (1, 5, 10):
            x = Tensor(np.random.default_rng(n).standard_normal((n, 8)).astype(np.float32))
            assert layer(x).shape == (n, 8)

    def test_deterministic_with_dropout_off(self):
        layer = self.make().eval()
        x = Tensor(np.random.default_rng(2).standard_normal((5, 8)).astype(np.float32))
        assert np.array_equal(layer(x).data, layer(x).data)

    def test_permutation_equivariance(self):
        with T.precision(np.float64):
            layer = self.make().eval()
            r = np.random.default_rng(3)
            x = r.standard_normal((7, 8))
            for _ in range(5):
                perm = r.permutation(7)
                np.testing.assert_allclose(layer(Tensor(x[perm])).data, layer(Tensor(x)).data[perm],
                                           atol=1e-9)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self):
        layer = nn.TransformerEncoderLayer(8, 2, 4, 4, 16, rng())
        blob = nn.checkpoint_bytes(layer, "params")
        kind, arrays = nn.load_arrays(io.BytesIO(blob))
        assert kind == "params"
        for name, tensor in layer.named_arrays().items():
            assert np.array_equal(arrays[name], tensor.data)

    def test_magic_enforced(self):
        with pytest.raises(FormatError, match="magic"):
            nn.load_arrays(io.BytesIO(b"BOGUS" + b"\x00" * 16))

    def test_truncation_reports_offset(self):
        layer = nn.Linear(3, 2, rng())
        blob = nn.checkpoint_bytes(layer, "params")
        with pytest.raises(FormatError, match="offset"):
            nn.load_arrays(io.BytesIO(blob[:-4]))

    def test_load_into_module(self):
        a = nn.Linear(4, 3, rng())
        b = nn.Linear(4, 3, np.random.default_rng(9))
        blob = nn.checkpoint_bytes(a, "params")
        _, arrays = nn.load_arrays(io.BytesIO(blob))
        b.load_arrays(arrays)
        assert np.array_equal(a.weight.data, b.weight.data)

    def test_shape_mismatch_rejected(self):
        a = nn.Linear(4, 3, rng())
        b = nn.Linear(5, 3, rng())
        _, arrays = nn.load_arrays(io.BytesIO(nn.checkpoint_bytes(a, "params")))
        with pytest.raises(FormatError):
            b.load_arrays(arrays)


class TestModulePlumbing:
    def test_param_hash_changes_with_values(self):
        layer = nn.Linear(3, 2, rng())
        before = layer.param_hash()
        layer.weight.data = layer.weight.data + 1.0
        assert layer.param_hash() != before

    def test_train_eval_propagates(self):
        layer = nn.TransformerEncoderLayer(8, 2, 4, 4, 16, rng())
        layer.eval()
        assert not layer.attention.attn_dropout.training
        layer.train()
        assert layer.attention.attn_dropout.training
