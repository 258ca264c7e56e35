"""Attention relation model: per-choice sequences through a transformer
encoder, a position-wise MLP, order-invariant sum pooling, and an output
MLP that emits one choice logit plus 12 rule logits per candidate.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError
from .panels import CHOICE_POSITION, PanelEncoder
from .tensor import Tensor

N_CONTEXT = 8
N_CHOICES = 16 - N_CONTEXT
N_META_BITS = 12
N_OUTPUTS = 1 + N_META_BITS


@dataclass
class ArneConfig:
    """Model hyperparameters; defaults are the full-scale configuration."""

    height: int = 160
    width: int = 160
    d_model: int = 512
    n_encoder_layers: int = 6
    n_heads: int = 10
    d_k: int = 64
    d_v: int = 64
    d_hidden: int = 2056
    g_layers: int = 4
    f_dims: tuple = (512, 256, 256, 13)
    f_dropout: float = 0.5
    use_delimiter: bool = False
    dropout_p: float = 0.1
    attn_dropout_p: float = 0.1

    def __post_init__(self):
        self.f_dims = tuple(self.f_dims)
        if self.f_dims[0] != self.d_model:
            raise ConfigError(f"f_dims[0] must equal d_model, got {self.f_dims}")
        if self.f_dims[-1] != N_OUTPUTS:
            raise ConfigError(f"f_dims must end in {N_OUTPUTS}, got {self.f_dims}")

    @classmethod
    def desk(cls, **overrides):
        """A CPU-sized configuration for 32x32 panels."""
        values = dict(
            height=32,
            width=32,
            d_model=64,
            n_encoder_layers=2,
            n_heads=4,
            d_k=16,
            d_v=16,
            d_hidden=128,
            f_dims=(64, 64, 64, 13),
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self):
        d = asdict(self)
        d["f_dims"] = list(self.f_dims)
        return d


@dataclass
class ArneOutput:
    """Choice logits and per-choice rule logits.

    Unbatched: choice_logits (8,), meta_logits (8, 12).  Batched versions
    carry a leading sample dimension.  Column 0 of the raw (8, 13) output
    is the choice logit; the remaining 12 columns are the rule logits.
    """

    choice_logits: Tensor
    meta_logits: Tensor


def build_sequence(contexts, choice, delimiter=None):
    """Assemble one reasoning sequence: contexts, optional delimiter, choice.

    contexts: exactly 8 PanelEmbedding in grid order; returns (N, d_model)
    with N = 9, or 10 when a delimiter vector is given (inserted at index 8).
    """
    if len(contexts) != N_CONTEXT:
        raise ContractError(f"expected {N_CONTEXT} context embeddings, got {len(contexts)}")
    rows = [T.reshape(e.vector, (1, -1)) for e in contexts]
    if delimiter is not None:
        rows.append(T.reshape(delimiter, (1, -1)))
    rows.append(T.reshape(choice.vector, (1, -1)))
    return T.concat(rows, axis=0)


class ArneModel(nn.Module):
    """Full model over 16 panels; the 8 choice passes share every parameter."""

    kind = "arne"

    def __init__(self, config, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        c = config
        self.panel_encoder = PanelEncoder(c.height, c.width, c.d_model, rng)
        self.encoder_layers = [
            nn.TransformerEncoderLayer(
                c.d_model, c.n_heads, c.d_k, c.d_v, c.d_hidden, rng,
                dropout_p=c.dropout_p, attn_dropout_p=c.attn_dropout_p,
            )
            for _ in range(c.n_encoder_layers)
        ]
        self.g = nn.MLP([c.d_model] * (c.g_layers + 1), rng, final_relu=True)
        self.f = nn.MLP(list(c.f_dims), rng, final_relu=False,
                        dropout_p=c.f_dropout, dropout_after=2)
        if c.use_delimiter:
            self.delimiter = nn.uniform_init(rng, (c.d_model,), c.d_model)

    @property
    def seq_len(self):
        return N_CONTEXT + 1 + (1 if self.config.use_delimiter else 0)

    def _panel_batch(self, panels):
        """(B, 16, H, W) uint8 or float panels -> (B*16, 1, H, W) in [0, 1]."""
        arr = np.asarray(panels)
        if arr.ndim != 4 or arr.shape[1] != 16:
            raise ConfigError(f"expected panels shaped (B, 16, H, W), got {arr.shape}")
        if arr.shape[2] != self.config.height or arr.shape[3] != self.config.width:
            raise ConfigError(
                f"panel size {arr.shape[2]}x{arr.shape[3]} does not match "
                f"configured {self.config.height}x{self.config.width}"
            )
        if arr.dtype == np.uint8:
            arr = arr.astype(T.default_dtype()) / np.array(255.0, dtype=T.default_dtype())
        else:
            arr = arr.astype(T.default_dtype(), copy=False)
        b = arr.shape[0]
        flat = arr.reshape(b * 16, 1, self.config.height, self.config.width)
        positions = np.tile(
            np.concatenate([np.arange(N_CONTEXT), np.full(N_CHOICES, CHOICE_POSITION)]), b
        )
        return Tensor(flat), positions, b

    def forward_batch(self, panels):
        """Run a batch of samples; returns batched ArneOutput ((B, 8), (B, 8, 12))."""
        x, positions, b = self._panel_batch(panels)
        c = self.config
        emb = self.panel_encoder(x, positions)                 # (B*16, d)
        emb = T.reshape(emb, (b, 16, c.d_model))
        ctx = emb[:, :N_CONTEXT, :]                            # (B, 8, d)
        choices = emb[:, N_CONTEXT:, :]                        # (B, 8, d)

        ctx_rows = T.broadcast_to(T.reshape(ctx, (b, 1, N_CONTEXT, c.d_model)),
                                  (b, N_CHOICES, N_CONTEXT, c.d_model))
        parts = [ctx_rows]
        if c.use_delimiter:
            delim = T.reshape(self.delimiter, (1, 1, 1, c.d_model))
            parts.append(T.broadcast_to(delim, (b, N_CHOICES, 1, c.d_model)))
        parts.append(T.reshape(choices, (b, N_CHOICES, 1, c.d_model)))
        seqs = T.concat(parts, axis=2)                         # (B, 8, N, d)

        n = self.seq_len
        h = T.reshape(seqs, (b * N_CHOICES, n, c.d_model))
        for layer in self.encoder_layers:
            h = layer(h)
        h = T.reshape(h, (b * N_CHOICES * n, c.d_model))
        h = self.g(h)
        h = T.reshape(h, (b * N_CHOICES, n, c.d_model))
        pooled = T.orderless_sum(h, axis=1)                    # (B*8, d)
        out = self.f(pooled)                                   # (B*8, 13)
        out = T.reshape(out, (b, N_CHOICES, N_OUTPUTS))
        return ArneOutput(
            choice_logits=T.reshape(out[:, :, 0], (b, N_CHOICES)),
            meta_logits=out[:, :, 1:],
        )

    def forward(self, panels):
        """Single sample: panels (16, H, W); returns unbatched ArneOutput."""
        arr = np.asarray(panels)
        if arr.ndim != 3 or arr.shape[0] != 16:
            raise ConfigError(f"expected 16 panels shaped (16, H, W), got {arr.shape}")
        out = self.forward_batch(arr[None, ...])
        return ArneOutput(
            choice_logits=T.reshape(out.choice_logits, (N_CHOICES,)),
            meta_logits=T.reshape(out.meta_logits, (N_CHOICES, N_META_BITS)),
        )


def aggregate_meta_logits(meta_logits):
    """Sum rule logits over the choice axis (an OR in logit space)."""
    axis = meta_logits.ndim - 2
    return T.orderless_sum(meta_logits, axis=axis)


def predict(output):
    """Decode one ArneOutput: argmax choice (ties toward the lowest index)
    and the sigmoid of the choice-summed rule logits."""
    choice = int(np.argmax(output.choice_logits.data))
    with T.no_grad():
        meta = T.sigmoid(aggregate_meta_logits(output.meta_logits.detach()))
    return choice, np.array(meta.data)
