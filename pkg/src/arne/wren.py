"""Relation-network baseline: pairwise MLP over panel embeddings.

For each choice, the 8 context embeddings plus the choice embedding form
all 81 ordered pairs (self-pairs included).  A shared MLP scores each
pair, the pair scores are summed, and an output MLP produces the same
13 logits per choice as the attention model, so loss, optimizer, and
evaluation plumbing are identical.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError
from .model import ArneOutput, N_CHOICES, N_CONTEXT, N_OUTPUTS
from .panels import CHOICE_POSITION, PanelEncoder
from .tensor import Tensor

N_ELEMENTS = N_CONTEXT + 1
N_PAIRS = N_ELEMENTS * N_ELEMENTS


@dataclass
class WrenConfig:
    """Baseline hyperparameters; defaults mirror the full-scale setup."""

    height: int = 160
    width: int = 160
    d_model: int = 512
    g_dims: tuple = (512, 512, 512)
    f_dims: tuple = (512, 256, 13)
    f_dropout: float = 0.5

    def __post_init__(self):
        self.g_dims = tuple(self.g_dims)
        self.f_dims = tuple(self.f_dims)
        if self.f_dims[0] != self.g_dims[-1]:
            raise ConfigError(f"f_dims[0] must equal g_dims[-1], got {self.f_dims} / {self.g_dims}")
        if self.f_dims[-1] != N_OUTPUTS:
            raise ConfigError(f"f_dims must end in {N_OUTPUTS}, got {self.f_dims}")

    @classmethod
    def desk(cls, **overrides):
        values = dict(
            height=32,
            width=32,
            d_model=64,
            g_dims=(128, 128, 128),
            f_dims=(128, 64, 13),
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self):
        d = asdict(self)
        d["g_dims"] = list(self.g_dims)
        d["f_dims"] = list(self.f_dims)
        return d


class WrenModel(nn.Module):
    kind = "wren"

    def __init__(self, config, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        c = config
        self.panel_encoder = PanelEncoder(c.height, c.width, c.d_model, rng)
        self.g_theta = nn.MLP([2 * c.d_model, *c.g_dims], rng, final_relu=True)
        # dropout sits before the last linear layer
        self.f = nn.MLP(list(c.f_dims), rng, final_relu=False,
                        dropout_p=c.f_dropout, dropout_after=len(c.f_dims) - 2)
        grid = np.arange(N_ELEMENTS)
        self._pair_left = np.repeat(grid, N_ELEMENTS)
        self._pair_right = np.tile(grid, N_ELEMENTS)

    def forward_batch(self, panels):
        arr = np.asarray(panels)
        if arr.ndim != 4 or arr.shape[1] != 16:
            raise ConfigError(f"expected panels shaped (B, 16, H, W), got {arr.shape}")
        c = self.config
        if arr.dtype == np.uint8:
            arr = arr.astype(T.default_dtype()) / np.array(255.0, dtype=T.default_dtype())
        else:
            arr = arr.astype(T.default_dtype(), copy=False)
        b = arr.shape[0]
        flat = arr.reshape(b * 16, 1, c.height, c.width)
        positions = np.tile(
            np.concatenate([np.arange(N_CONTEXT), np.full(N_CHOICES, CHOICE_POSITION)]), b
        )
        emb = self.panel_encoder(Tensor(flat), positions)
        emb = T.reshape(emb, (b, 16, c.d_model))
        ctx = emb[:, :N_CONTEXT, :]
        choices = emb[:, N_CONTEXT:, :]

        ctx_rows = T.broadcast_to(T.reshape(ctx, (b, 1, N_CONTEXT, c.d_model)),
                                  (b, N_CHOICES, N_CONTEXT, c.d_model))
        elems = T.concat([ctx_rows, T.reshape(choices, (b, N_CHOICES, 1, c.d_model))], axis=2)
        left = T.take(elems, self._pair_left, axis=2)          # (B, 8, 81, d)
        right = T.take(elems, self._pair_right, axis=2)
        pairs = T.concat([left, right], axis=3)                # (B, 8, 81, 2d)

        h = T.reshape(pairs, (b * N_CHOICES * N_PAIRS, 2 * c.d_model))
        h = self.g_theta(h)
        h = T.reshape(h, (b, N_CHOICES, N_PAIRS, c.g_dims[-1]))
        pooled = T.orderless_sum(h, axis=2)                    # (B, 8, g_out)
        out = self.f(T.reshape(pooled, (b * N_CHOICES, c.g_dims[-1])))
        out = T.reshape(out, (b, N_CHOICES, N_OUTPUTS))
        return ArneOutput(choice_logits=out[:, :, 0], meta_logits=out[:, :, 1:])

    def forward(self, panels):
        arr = np.asarray(panels)
        if arr.ndim != 3 or arr.shape[0] != 16:
            raise ConfigError(f"expected 16 panels shaped (16, H, W), got {arr.shape}")
        out = self.forward_batch(arr[None, ...])
        return ArneOutput(
            choice_logits=T.reshape(out.choice_logits, (N_CHOICES,)),
            meta_logits=T.reshape(out.meta_logits, (N_CHOICES, 12)),
        )
