"""Panel encoder: conv blocks, grid-position one-hot, and projection.

One grayscale panel plus its grid position becomes a d_model embedding:
four (conv 3x3x32, stride 2 -> batchnorm -> relu) blocks, flatten,
concatenate a 9-way position one-hot, then a linear projection.
Positions 0..7 are the context cells in row-major order; position 8 is
the missing cell, used for every choice panel.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

N_POSITIONS = 9
CHOICE_POSITION = 8


@dataclass
class PanelEmbedding:
    vector: Tensor
    position_index: int


class ConvBlock(nn.Module):
    def __init__(self, in_channels, out_channels, rng):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, rng)
        self.norm = nn.BatchNorm2d(out_channels)

    def __call__(self, x):
        return T.relu(self.norm(self.conv(x)))


def _conv_tower_sizes(height, width, n_blocks=4):
    sizes = [(height, width)]
    h, w = height, width
    for _ in range(n_blocks):
        h = (h + 2 - 3) // 2 + 1
        w = (w + 2 - 3) // 2 + 1
        sizes.append((h, w))
    return sizes


class PanelEncoder(nn.Module):
    """Shared CNN + position one-hot + linear projection to d_model."""

    def __init__(self, height, width, d_model, rng, channels=32):
        super().__init__()
        if height % 8 or width % 8:
            raise ConfigError(f"panel size must be divisible by 8, got {height}x{width}")
        self.height = height
        self.width = width
        self.channels = channels
        self.d_model = d_model
        self.blocks = [
            ConvBlock(1, channels, rng),
            ConvBlock(channels, channels, rng),
            ConvBlock(channels, channels, rng),
            ConvBlock(channels, channels, rng),
        ]
        self.sizes = _conv_tower_sizes(height, width)
        fh, fw = self.sizes[-1]
        self.flat_features = channels * fh * fw
        self.proj = nn.Linear(self.flat_features + N_POSITIONS, d_model, rng)

    def __call__(self, x, positions):
        """x: (B, 1, H, W) floats in [0, 1]; positions: (B,) ints in [0, 8]."""
        if x.ndim != 4 or x.shape[2] != self.height or x.shape[3] != self.width:
            raise ConfigError(f"panel batch shape {x.shape} does not match {self.height}x{self.width}")
        positions = np.asarray(positions)
        if positions.min() < 0 or positions.max() >= N_POSITIONS:
            raise ContractError(f"positions must lie in [0, {N_POSITIONS - 1}]")
        h = x
        for block in self.blocks:
            h = block(h)
        flat = T.reshape(h, (x.shape[0], self.flat_features))
        one_hot = np.zeros((x.shape[0], N_POSITIONS), dtype=x.dtype)
        one_hot[np.arange(x.shape[0]), positions] = 1.0
        return self.proj(T.concat([flat, Tensor(one_hot)], axis=1))

    def activations(self, x, layer_index):
        """Post-relu maps of one conv block, for visualization export.

        x: (1, H, W) single panel; returns a (channels, h', w') array.
        """
        if not 0 <= layer_index <= 3:
            raise ContractError(f"layer_index must be in [0, 3], got {layer_index}")
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                h = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x)[None, ...])
                for block in self.blocks[: layer_index + 1]:
                    h = block(h)
        finally:
            self.train(was_training)
        return np.array(h.data[0])


def encode_panel(encoder, panel, position):
    """Embed a single (1, H, W) panel at a grid position."""
    if not 0 <= position < N_POSITIONS:
        raise ContractError(f"position must be in [0, {N_POSITIONS - 1}], got {position}")
    data = panel.data if isinstance(panel, Tensor) else np.asarray(panel)
    emb = encoder(Tensor(data[None, ...]), np.array([position]))
    return PanelEmbedding(vector=T.reshape(emb, (encoder.d_model,)), position_index=position)


# -- portable graymap export ---------------------------------------------


def write_pgm(path, image):
    """Write one 2-d uint8 array as a binary PGM (P5) file."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ContractError(f"PGM export needs a 2-d image, got shape {img.shape}")
    img = img.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def normalize_to_u8(channel):
    """Min-max normalize one activation map to the 0..255 range."""
    lo = float(channel.min())
    hi = float(channel.max())
    if hi - lo < 1e-12:
        return np.zeros(channel.shape, dtype=np.uint8)
    return np.round((channel - lo) / (hi - lo) * 255.0).astype(np.uint8)
