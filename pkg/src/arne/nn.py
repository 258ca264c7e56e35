"""Neural layers with learnable parameters.

Linear, strided 3x3 convolution, batch/layer normalization, dropout,
multi-head self-attention, the transformer encoder layer, and plain MLP
stacks, plus the flat binary checkpoint format shared by every model.
"""

import hashlib
import io
import struct

import numpy as np

from . import tensor as T
from .errors import ContractError, FormatError, ShapeError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"ARNE1"


def uniform_init(rng, shape, fan_in):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) in the current precision."""
    scale = 1.0 / np.sqrt(fan_in)
    data = (rng.random(shape) * 2.0 - 1.0) * scale
    return Tensor(data.astype(T.default_dtype()), requires_grad=True)


class Module:
    """Minimal container: parameter discovery, train/eval mode, rng plumbing."""

    def __init__(self):
        self.training = True
        self._rng = np.random.default_rng(0)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_arrays(self, prefix=""):
        """All tensors in the tree (parameters and running buffers), by path."""
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[prefix + name] = value
        for name, child in self._children():
            out.update(child.named_arrays(prefix=f"{prefix}{name}."))
        return out

    def named_parameters(self):
        return {k: v for k, v in self.named_arrays().items() if v.requires_grad}

    def parameters(self):
        return list(self.named_parameters().values())

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def set_rng(self, rng):
        """Route one seeded stream to every stochastic layer (dropout masks)."""
        self._rng = rng
        for _, child in self._children():
            child.set_rng(rng)
        return self

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def param_hash(self):
        digest = hashlib.sha256()
        for name, t in sorted(self.named_arrays().items()):
            digest.update(name.encode())
            digest.update(t.data.tobytes())
        return digest.hexdigest()

    def load_arrays(self, arrays):
        """Assign named arrays back into the tree; names and shapes must match."""
        own = self.named_arrays()
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise FormatError(f"checkpoint mismatch: missing={missing}, unexpected={extra}")
        for name, t in own.items():
            value = arrays[name]
            if tuple(value.shape) != t.shape:
                raise FormatError(f"checkpoint array {name} has shape {value.shape}, expected {t.shape}")
            t.data = np.ascontiguousarray(value, dtype=t.dtype)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = uniform_init(rng, (out_features, in_features), in_features)
        if bias:
            self.bias = Tensor(np.zeros(out_features, dtype=T.default_dtype()), requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear expects width {self.in_features}, got input shape {x.shape}")
        out = T.matmul(x, T.transpose(self.weight))
        return out if self.bias is None else out + self.bias


class Conv2d(Module):
    """3x3 kernels, stride 2, zero padding 1 (the panel-encoder geometry)."""

    def __init__(self, in_channels, out_channels, rng, kernel_size=3, stride=2, padding=1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = uniform_init(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.bias = Tensor(np.zeros(out_channels, dtype=T.default_dtype()), requires_grad=True)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.padding)


class BatchNorm2d(Module):
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes with batch statistics (biased variance) and
    updates running statistics by exponential moving average; eval mode
    uses the running statistics only.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        dt = T.default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dt))
        self.running_var = Tensor(np.ones(channels, dtype=dt))

    def __call__(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects (B, {self.channels}, H, W), got {x.shape}")
        if self.training:
            b, _, h, w = x.shape
            if b * h * w < 2:
                raise ContractError("batchnorm in train mode needs at least 2 values per channel")
            out, mu, var = T.batchnorm2d_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mu.astype(self.running_mean.dtype)
            self.running_var.data = (1 - m) * self.running_var.data + m * var.astype(self.running_var.dtype)
            return out
        # eval: fold running stats into one per-channel scale and shift
        inv_std = T.Tensor(1.0 / np.sqrt(self.running_var.data + self.eps))
        scale = self.gamma * inv_std
        shift = self.beta - T.Tensor(self.running_mean.data) * scale
        return x * T.reshape(scale, (1, self.channels, 1, 1)) + T.reshape(shift, (1, self.channels, 1, 1))


class LayerNorm(Module):
    def __init__(self, width, eps=1e-5):
        super().__init__()
        self.width = width
        self.eps = eps
        dt = T.default_dtype()
        self.gamma = Tensor(np.ones(width, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(width, dtype=dt), requires_grad=True)

    def __call__(self, x):
        mu = T.mean(x, axis=-1, keepdims=True)
        var = T.mean((x - mu) * (x - mu), axis=-1, keepdims=True)
        xhat = (x - mu) / T.sqrt(var + self.eps)
        return xhat * self.gamma + self.beta


class Dropout(Module):
    """Inverted dropout: identity in eval mode, kept values scaled by 1/(1-p)."""

    def __init__(self, p):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def __call__(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = self._rng.random(x.shape) >= self.p
        mask = keep.astype(x.dtype) / (1.0 - self.p)
        return x * Tensor(mask)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention with h heads.

    Head geometry follows the model it serves: the concatenated heads have
    width h*d_v, which may exceed d_model, and the output projection maps
    h*d_v back to d_model.
    """

    def __init__(self, d_model, n_heads, d_k, d_v, rng, attn_dropout_p=0.1):
        super().__init__()
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_k = d_k
        self.d_v = d_v
        self.proj_q = Linear(d_model, n_heads * d_k, rng)
        # a key bias only shifts each score row by a constant, which the
        # softmax cancels exactly, so the parameter is omitted
        self.proj_k = Linear(d_model, n_heads * d_k, rng, bias=False)
        self.proj_v = Linear(d_model, n_heads * d_v, rng)
        self.proj_out = Linear(n_heads * d_v, d_model, rng)
        self.attn_dropout = Dropout(attn_dropout_p)

    def __call__(self, x):
        """x: (N, d_model) or batched (S, N, d_model)."""
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        s, n, _ = x.shape
        h, dk, dv = self.n_heads, self.d_k, self.d_v

        def split_heads(t, width):
            t = T.reshape(t, (s, n, h, width))
            return T.transpose(t, (0, 2, 1, 3))          # (S, h, N, width)

        q = split_heads(self.proj_q(x), dk)
        k = split_heads(self.proj_k(x), dk)
        v = split_heads(self.proj_v(x), dv)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
        weights = self.attn_dropout(T.softmax(scores))
        heads = T.matmul(weights, v)                      # (S, h, N, dv)
        merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (s, n, h * dv))
        out = self.proj_out(merged)
        if squeeze:
            out = T.reshape(out, (n, self.d_model))
        return out


class FeedForward(Module):
    """Position-wise two-layer network d_model -> d_hidden -> d_model with relu."""

    def __init__(self, d_model, d_hidden, rng):
        super().__init__()
        self.lin1 = Linear(d_model, d_hidden, rng)
        self.lin2 = Linear(d_hidden, d_model, rng)

    def __call__(self, x):
        return self.lin2(T.relu(self.lin1(x)))


class TransformerEncoderLayer(Module):
    """Post-norm encoder sublayers: attention and position-wise feed-forward.

    Order: x -> attn -> dropout -> +x -> layernorm -> ffn -> dropout ->
    +residual -> layernorm.  No sequence positional encoding lives here;
    position information arrives with the inputs.
    """

    def __init__(self, d_model, n_heads, d_k, d_v, d_hidden, rng,
                 dropout_p=0.1, attn_dropout_p=0.1):
        super().__init__()
        self.attention = MultiHeadSelfAttention(d_model, n_heads, d_k, d_v, rng, attn_dropout_p)
        self.ffn = FeedForward(d_model, d_hidden, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self.drop1 = Dropout(dropout_p)
        self.drop2 = Dropout(dropout_p)

    def __call__(self, x):
        x = self.norm1(x + self.drop1(self.attention(x)))
        x = self.norm2(x + self.drop2(self.ffn(x)))
        return x


class MLP(Module):
    """Linear stack with relu between layers.

    ``final_relu`` keeps the last output linear when False.  ``dropout_p``
    with ``dropout_after`` inserts one dropout after that layer index
    (counting linear layers from 1, after its relu).
    """

    def __init__(self, dims, rng, final_relu=False, dropout_p=0.0, dropout_after=None):
        super().__init__()
        if len(dims) < 2:
            raise ContractError("MLP needs at least input and output widths")
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        self.final_relu = final_relu
        self.dropout_after = dropout_after
        self.dropout = Dropout(dropout_p) if dropout_p else None

    def __call__(self, x):
        last = len(self.layers)
        for i, layer in enumerate(self.layers, start=1):
            x = layer(x)
            if i < last or self.final_relu:
                x = T.relu(x)
            if self.dropout is not None and self.dropout_after == i:
                x = self.dropout(x)
        return x


# -- checkpoint serialization -------------------------------------------------


def save_arrays(fobj, arrays, kind):
    """Flat binary checkpoint: magic, kind tag, itemsize, then named records.

    Each record: u16 name length, name bytes, u8 rank, u32 dims, raw
    little-endian scalar data.  Round-trips are bit-exact.
    """
    kind_bytes = kind.encode()
    fobj.write(CHECKPOINT_MAGIC)
    fobj.write(struct.pack("<B", len(kind_bytes)))
    fobj.write(kind_bytes)
    itemsizes = {a.dtype.itemsize for a in arrays.values()}
    if len(itemsizes) > 1:
        raise ContractError(f"checkpoint needs a single scalar width, got {sorted(itemsizes)}")
    itemsize = itemsizes.pop() if itemsizes else T.default_dtype().itemsize
    fobj.write(struct.pack("<BI", itemsize, len(arrays)))
    for name in sorted(arrays):
        arr = arrays[name]
        name_bytes = name.encode()
        fobj.write(struct.pack("<H", len(name_bytes)))
        fobj.write(name_bytes)
        fobj.write(struct.pack("<B", arr.ndim))
        fobj.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fobj.write(np.ascontiguousarray(arr, dtype=f"<f{itemsize}").tobytes())


def load_arrays(fobj):
    """Read a checkpoint written by ``save_arrays``; returns (kind, arrays)."""

    def need(n, what):
        data = fobj.read(n)
        if len(data) != n:
            raise FormatError(f"checkpoint truncated at offset {fobj.tell()} while reading {what}")
        return data

    magic = need(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (kind_len,) = struct.unpack("<B", need(1, "kind length"))
    kind = need(kind_len, "kind").decode()
    itemsize, count = struct.unpack("<BI", need(5, "header"))
    if itemsize not in (4, 8):
        raise FormatError(f"unsupported checkpoint scalar width {itemsize}")
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode()
        (rank,) = struct.unpack("<B", need(1, "rank"))
        dims = struct.unpack(f"<{rank}I", need(4 * rank, "dims"))
        n_bytes = int(np.prod(dims, dtype=np.int64)) * itemsize if rank else itemsize
        raw = need(n_bytes, f"data for {name}")
        arrays[name] = np.frombuffer(raw, dtype=f"<f{itemsize}").reshape(dims).copy()
    return kind, arrays


def save_checkpoint(path, module, kind):
    arrays = {k: v.data for k, v in module.named_arrays().items()}
    if hasattr(path, "write"):
        save_arrays(path, arrays, kind)
        return
    with open(path, "wb") as fobj:
        save_arrays(fobj, arrays, kind)


def load_checkpoint(path):
    if hasattr(path, "read"):
        return load_arrays(path)
    with open(path, "rb") as fobj:
        return load_arrays(fobj)


def checkpoint_bytes(module, kind):
    buf = io.BytesIO()
    save_checkpoint(buf, module, kind)
    return buf.getvalue()
