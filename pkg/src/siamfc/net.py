"""Convolutional embedding network: architecture presets, parameter init,
forward embedding with optional backprop tape, and the bias-augmented
similarity score map."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import ConvSpec, ScoreMap, ShapeError

#: Table of (out_channels, kernel, stride, groups) conv rows plus pooling for
#: the reference architecture; both presets share kernels, strides and pool
#: placement, so the stride of the final representation is 8 for each.
PAPER_CHANNELS = (96, 256, 384, 384, 256)
PAPER_GROUPS = (1, 2, 1, 2, 2)
TINY_CHANNELS = (12, 32, 48, 48, 32)
TINY_GROUPS = (1, 1, 1, 1, 1)
CONV_KERNELS = (11, 5, 3, 3, 3)
CONV_STRIDES = (2, 1, 1, 1, 1)

EXEMPLAR_SIDE = 127
SEARCH_SIDE = 255


@dataclass(frozen=True)
class ConvDef:
    out_channels: int
    kernel: int
    stride: int
    groups: int = 1
    batchnorm: bool = True
    relu: bool = True


@dataclass(frozen=True)
class PoolDef:
    size: int
    stride: int


@dataclass(frozen=True)
class Architecture:
    """Ordered layer plan consumed by build_net."""

    name: str
    in_channels: int
    layers: tuple


def paper_architecture() -> Architecture:
    return _standard_architecture("paper", PAPER_CHANNELS, PAPER_GROUPS)


def tiny_architecture() -> Architecture:
    """Same geometry as the paper preset with channels cut to desk scale."""
    return _standard_architecture("tiny", TINY_CHANNELS, TINY_GROUPS)


def _standard_architecture(name, channels, groups) -> Architecture:
    convs = [
        ConvDef(channels[i], CONV_KERNELS[i], CONV_STRIDES[i], groups[i], relu=(i < 4))
        for i in range(5)
    ]
    layers = (convs[0], PoolDef(3, 2), convs[1], PoolDef(3, 2), convs[2], convs[3], convs[4])
    return Architecture(name=name, in_channels=3, layers=layers)


@dataclass
class ConvLayer:
    name: str
    spec: ConvSpec
    w: np.ndarray
    b: np.ndarray
    kind: str = "conv"


@dataclass
class BatchNormLayer:
    name: str
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    kind: str = "batchnorm"


@dataclass
class PoolLayer:
    name: str
    size: int
    stride: int
    kind: str = "pool"


@dataclass
class ReluLayer:
    name: str
    kind: str = "relu"


@dataclass
class EmbeddingNet:
    """Ordered layer stack mapping an image tensor to a spatial feature map."""

    preset: str
    in_channels: int
    layers: list = field(default_factory=list)

    @property
    def total_stride(self) -> int:
        s = 1
        for layer in self.layers:
            if layer.kind == "conv":
                s *= layer.spec.stride
            elif layer.kind == "pool":
                s *= layer.stride
        return s

    @property
    def out_channels(self) -> int:
        for layer in reversed(self.layers):
            if layer.kind == "conv":
                return layer.spec.out_channels
        raise ValueError("network has no conv layer")

    def param_items(self):
        """Yield (key, array) for every trainable parameter, in layer order.

        Batch-norm running stats are excluded: they are state, not parameters.
        """
        for layer in self.layers:
            if layer.kind == "conv":
                yield f"{layer.name}.w", layer.w
                yield f"{layer.name}.b", layer.b
            elif layer.kind == "batchnorm":
                yield f"{layer.name}.gamma", layer.gamma
                yield f"{layer.name}.beta", layer.beta

    def state_items(self):
        """Yield (key, array) for every serialized array, parameters and
        batch-norm running stats alike."""
        for layer in self.layers:
            if layer.kind == "conv":
                yield f"{layer.name}.w", layer.w
                yield f"{layer.name}.b", layer.b
            elif layer.kind == "batchnorm":
                yield f"{layer.name}.gamma", layer.gamma
                yield f"{layer.name}.beta", layer.beta
                yield f"{layer.name}.running_mean", layer.running_mean
                yield f"{layer.name}.running_var", layer.running_var

    def infer_shapes(self, in_h: int, in_w: int) -> list:
        """Per-layer (name, channels, h, w) output shapes; raises ShapeError
        naming the first layer whose input underflows."""
        c, h, w = self.in_channels, in_h, in_w
        out = []
        for layer in self.layers:
            if layer.kind == "conv":
                try:
                    h, w = layer.spec.out_size(h, w)
                except ShapeError as e:
                    raise ShapeError(f"{layer.name}: {e}") from None
                c = layer.spec.out_channels
            elif layer.kind == "pool":
                if layer.size > h or layer.size > w:
                    raise ShapeError(
                        f"{layer.name}: pool window {layer.size} larger than input {h}x{w}"
                    )
                h = ops.valid_out_size(h, layer.size, layer.stride)
                w = ops.valid_out_size(w, layer.size, layer.stride)
            out.append((layer.name, c, h, w))
        return out

    def forward(self, x: np.ndarray, mode: str = "infer", record: bool = False):
        """Run the stack. With record=True (train-mode backprop) also returns
        the tape of per-layer saved inputs."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = ops.as_tensor(x)
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"input has {x.shape[1]} channels, net expects {self.in_channels}")
        self.infer_shapes(x.shape[2], x.shape[3])  # fail early, naming the layer
        tape = [] if record else None
        for layer in self.layers:
            saved = x
            aux = None
            if layer.kind == "conv":
                if record:
                    x, aux = ops.conv2d_with_cols(x, layer.w, layer.b, layer.spec)
                else:
                    x = ops.conv2d(x, layer.w, layer.b, layer.spec)
            elif layer.kind == "batchnorm":
                x = ops.batchnorm(
                    x, layer.gamma, layer.beta, layer.running_mean, layer.running_var, mode
                )
            elif layer.kind == "pool":
                x = ops.maxpool2d(x, layer.size, layer.stride)
            elif layer.kind == "relu":
                x = ops.relu(x)
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            if record:
                tape.append((layer, saved, aux))
        return (x, tape) if record else x

    def embed(self, image: np.ndarray, mode: str = "infer") -> np.ndarray:
        """Feature map of an image batch; spatial support is preserved."""
        return self.forward(image, mode=mode)

    def backward(
        self, tape: list, grad: np.ndarray, grads: dict, need_input_grad: bool = False
    ) -> np.ndarray | None:
        """Walk the tape in reverse, accumulating parameter grads into
        ``grads`` (keyed like param_items) and returning the input grad
        (skipped by default: image pixels are never optimized)."""
        for pos, (layer, saved, aux) in zip(range(len(tape) - 1, -1, -1), reversed(tape)):
            if layer.kind == "conv":
                grad, gw, gb = ops.conv2d_backward(
                    saved, layer.w, layer.spec, grad,
                    need_input_grad=need_input_grad or pos > 0, cols=aux,
                )
                _accumulate(grads, f"{layer.name}.w", gw)
                _accumulate(grads, f"{layer.name}.b", gb)
            elif layer.kind == "batchnorm":
                grad, dgamma, dbeta = ops.batchnorm_backward(saved, layer.gamma, grad)
                _accumulate(grads, f"{layer.name}.gamma", dgamma)
                _accumulate(grads, f"{layer.name}.beta", dbeta)
            elif layer.kind == "pool":
                grad = ops.maxpool2d_backward(saved, layer.size, layer.stride, grad)
            elif layer.kind == "relu":
                grad = ops.relu_backward(saved, grad)
        return grad


def _accumulate(grads: dict, key: str, g: np.ndarray):
    if key in grads:
        grads[key] += g
    else:
        grads[key] = g.copy()


def build_net(preset="paper") -> EmbeddingNet:
    """Construct an EmbeddingNet from a preset name or an Architecture.

    Parameters are allocated zeroed; call init_params (or load a model file)
    before use.
    """
    if isinstance(preset, Architecture):
        arch = preset
    elif preset == "paper":
        arch = paper_architecture()
    elif preset == "tiny":
        arch = tiny_architecture()
    else:
        raise ValueError(f"unknown preset {preset!r} (expected 'paper', 'tiny' or Architecture)")

    net = EmbeddingNet(preset=arch.name, in_channels=arch.in_channels)
    c = arch.in_channels
    conv_idx = 0
    pool_idx = 0
    for item in arch.layers:
        if isinstance(item, ConvDef):
            conv_idx += 1
            name = f"conv{conv_idx}"
            if c % item.groups != 0:
                raise ShapeError(
                    f"{name}: input channels {c} not divisible by groups {item.groups}"
                )
            if item.out_channels % item.groups != 0:
                raise ShapeError(
                    f"{name}: out channels {item.out_channels} not divisible by groups "
                    f"{item.groups}"
                )
            spec = ConvSpec(
                kernel_h=item.kernel,
                kernel_w=item.kernel,
                stride=item.stride,
                groups=item.groups,
                out_channels=item.out_channels,
            )
            icg = c // item.groups
            w = np.zeros((item.out_channels, icg, item.kernel, item.kernel), dtype=ops.DTYPE)
            b = np.zeros(item.out_channels, dtype=ops.DTYPE)
            net.layers.append(ConvLayer(name=name, spec=spec, w=w, b=b))
            c = item.out_channels
            if item.batchnorm:
                net.layers.append(
                    BatchNormLayer(
                        name=f"bn{conv_idx}",
                        gamma=np.ones(c, dtype=ops.DTYPE),
                        beta=np.zeros(c, dtype=ops.DTYPE),
                        running_mean=np.zeros(c, dtype=ops.DTYPE),
                        running_var=np.ones(c, dtype=ops.DTYPE),
                    )
                )
            if item.relu:
                net.layers.append(ReluLayer(name=f"relu{conv_idx}"))
        elif isinstance(item, PoolDef):
            pool_idx += 1
            net.layers.append(PoolLayer(name=f"pool{pool_idx}", size=item.size, stride=item.stride))
        else:
            raise ValueError(f"unknown layer descriptor {item!r}")
    return net


def init_params(net: EmbeddingNet, seed: int) -> EmbeddingNet:
    """He-initialize conv weights in place: Gaussian with variance 2/fan_in
    (fan_in = in-channels-per-group x kernel area), zero biases, identity
    batch norm. Deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if layer.kind == "conv":
            fan_in = layer.w.shape[1] * layer.w.shape[2] * layer.w.shape[3]
            std = math.sqrt(2.0 / fan_in)
            layer.w[...] = rng.normal(0.0, std, size=layer.w.shape).astype(ops.DTYPE)
            layer.b[...] = 0.0
        elif layer.kind == "batchnorm":
            layer.gamma[...] = 1.0
            layer.beta[...] = 0.0
            layer.running_mean[...] = 0.0
            layer.running_var[...] = 1.0
    return net


def score(
    net: EmbeddingNet, bias: float, exemplar: np.ndarray, search: np.ndarray, mode: str = "infer"
) -> ScoreMap:
    """Similarity map of one exemplar against one search image: the
    cross-correlation of their embeddings plus the scalar bias everywhere."""
    z = net.embed(_single(exemplar), mode=mode)
    x = net.embed(_single(search), mode=mode)
    v = ops.xcorr(z, x) + np.float32(bias)
    return ScoreMap(
        values=v[0, 0], stride_y=float(net.total_stride), stride_x=float(net.total_stride)
    )


def _single(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=ops.DTYPE)
    if image.ndim == 3:
        image = image[np.newaxis]
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeError(f"expected one image (c,h,w) or (1,c,h,w), got shape {image.shape}")
    return image
