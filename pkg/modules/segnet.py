"""
Segmentation Network Module

A small 2D encoder-decoder: per level two 3x3 convolutions with an
activation, 2x average pooling on the way down, nearest upsampling on the
way up and additive skip connections, ending in a 1x1 convolution and a
per-pixel softmax over the training groups.

All parameters live in one flat float64 vector; layers hold views into it.
"""
import logging
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field

from config import N_TRAINING_GROUPS
from modules.errors import InvalidInputError, PipelineStateError
from modules.layers import ACTIVATIONS, AvgPool2d, Conv2d, Layer, Upsample2d, softmax

logger = logging.getLogger(__name__)


class SegNetConfig(BaseModel):
    """Architecture of the encoder-decoder."""
    depth: int = Field(3, ge=1, description="Number of resolution levels")
    base_channels: int = Field(8, ge=1, description="Channels at the finest level; doubled per level")
    n_classes: int = Field(N_TRAINING_GROUPS, ge=2, description="Output groups")
    in_channels: int = Field(1, ge=1, description="Input channels")
    activation: Literal["tanh", "relu"] = Field("tanh", description="Hidden activation")
    zero_init_head: bool = Field(False, description="Start the output layer at zero (uniform output)")
    seed: int = Field(0, description="Initialization seed")


class SegNet:
    """
    Encoder-decoder segmentation network with reverse-mode gradients.

    Usage:
        probs = net.forward(batch)      # (N, C, H, W) probabilities
        grads = net.backward(dlogits)   # flat gradient vector
    """

    def __init__(self, config: SegNetConfig = None):
        """
        Build and initialize the network.

        Args:
            config: Architecture; defaults to depth 3, 8 base channels, 5 groups
        """
        self.config = config or SegNetConfig()
        cfg = self.config
        act = ACTIVATIONS[cfg.activation]
        widths = [cfg.base_channels * 2 ** level for level in range(cfg.depth)]

        self.encoder: List[List[Layer]] = []
        in_ch = cfg.in_channels
        for width in widths:
            self.encoder.append([Conv2d(in_ch, width), act(), Conv2d(width, width), act()])
            in_ch = width
        self.pools = [AvgPool2d() for _ in range(cfg.depth - 1)]

        # decoder[l] brings level l+1 back to level l
        self.decoder_up: List[List[Layer]] = []
        self.decoder_fuse: List[List[Layer]] = []
        for level in range(cfg.depth - 1):
            self.decoder_up.append([Upsample2d(), Conv2d(widths[level + 1], widths[level]), act()])
            self.decoder_fuse.append([Conv2d(widths[level], widths[level]), act()])

        self.head = Conv2d(widths[0], cfg.n_classes, kernel_size=1)

        self._bind_parameters()
        self.initialize(cfg.seed)
        self._logits = None
        self._probs = None

    @property
    def layers(self) -> List[Layer]:
        out: List[Layer] = []
        for block in self.encoder:
            out.extend(block)
        out.extend(self.pools)
        for up, fuse in zip(self.decoder_up, self.decoder_fuse):
            out.extend(up)
            out.extend(fuse)
        out.append(self.head)
        return out

    def _bind_parameters(self) -> None:
        shapes = [(layer, s) for layer in self.layers for s in layer.param_shapes()]
        total = int(sum(np.prod(s) for _, s in shapes))
        self.params = np.zeros(total)
        self.grads = np.zeros(total)

        offset = 0
        for layer in self.layers:
            p_views, g_views = [], []
            for shape in layer.param_shapes():
                size = int(np.prod(shape))
                p_views.append(self.params[offset:offset + size].reshape(shape))
                g_views.append(self.grads[offset:offset + size].reshape(shape))
                offset += size
            if p_views:
                layer.bind(p_views, g_views)

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def min_divisor(self) -> int:
        return 2 ** (self.config.depth - 1)

    def initialize(self, seed: int) -> None:
        """Fan-in scaled uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                bound = 1.0 / np.sqrt(layer.fan_in)
                if layer is self.head and self.config.zero_init_head:
                    layer.weight[...] = 0.0
                else:
                    layer.weight[...] = rng.uniform(-bound, bound, size=layer.weight.shape)
                layer.bias[...] = 0.0

    def get_flat_params(self) -> np.ndarray:
        return self.params.copy()

    def set_flat_params(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.params.shape:
            raise InvalidInputError(
                f"Parameter vector has shape {values.shape}, network needs {self.params.shape}"
            )
        # In-place so the layer views stay attached
        self.params[...] = values

    def _prepare(self, batch: np.ndarray) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, np.newaxis]
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise InvalidInputError(
                f"Batch must be (N, H, W) or (N, {self.config.in_channels}, H, W), got {x.shape}"
            )
        h, w = x.shape[2:]
        if h % self.min_divisor or w % self.min_divisor:
            raise InvalidInputError(
                f"Spatial size {h}x{w} must be divisible by {self.min_divisor} for depth {self.config.depth}"
            )
        return x

    def forward_logits(self, batch: np.ndarray) -> np.ndarray:
        """Pre-softmax activations, caching intermediates for backward."""
        x = self._prepare(batch)
        skips = []
        for level, block in enumerate(self.encoder):
            if level > 0:
                x = self.pools[level - 1].forward(x)
            for layer in block:
                x = layer.forward(x)
            skips.append(x)

        for level in reversed(range(self.config.depth - 1)):
            for layer in self.decoder_up[level]:
                x = layer.forward(x)
            x = x + skips[level]
            for layer in self.decoder_fuse[level]:
                x = layer.forward(x)

        self._logits = self.head.forward(x)
        return self._logits

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Per-pixel class probabilities, shape (N, n_classes, H, W)."""
        self._probs = softmax(self.forward_logits(batch))
        return self._probs

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """
        Propagate a gradient on the logits back to every parameter.

        Args:
            grad_logits: dLoss/dlogits for the last forward batch

        Returns:
            Copy of the flat gradient vector

        Raises:
            PipelineStateError: If no forward pass is cached
        """
        if self._logits is None:
            raise PipelineStateError("backward called before forward")
        if grad_logits.shape != self._logits.shape:
            raise InvalidInputError(
                f"Gradient shape {grad_logits.shape} != logits shape {self._logits.shape}"
            )

        self.grads[...] = 0.0
        g = self.head.backward(grad_logits)

        skip_grads: List[Optional[np.ndarray]] = [None] * self.config.depth
        for level in range(self.config.depth - 1):
            for layer in reversed(self.decoder_fuse[level]):
                g = layer.backward(g)
            skip_grads[level] = g
            for layer in reversed(self.decoder_up[level]):
                g = layer.backward(g)

        for level in reversed(range(self.config.depth)):
            if skip_grads[level] is not None:
                g = g + skip_grads[level]
            for layer in reversed(self.encoder[level]):
                g = layer.backward(g)
            if level > 0:
                g = self.pools[level - 1].backward(g)

        return self.grads.copy()


def forward(net: SegNet, batch: np.ndarray) -> np.ndarray:
    """Per-pixel class probabilities for a batch of normalized slices."""
    return net.forward(batch)


def backward(net: SegNet, grad_logits: np.ndarray) -> np.ndarray:
    """Flat parameter gradient for the most recent forward batch."""
    return net.backward(grad_logits)


def predict_probs(net: SegNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Forward a stack of slices in fixed-size batches."""
    images = np.asarray(images, dtype=np.float64)
    out = [net.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)
