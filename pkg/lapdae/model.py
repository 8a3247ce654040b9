"""
LapDAE encoder F and decoder G

The encoder is four 3x3 convolutions with ReLU (strides 1, 2, 1, 2 by default),
keeping a spatial bottleneck; the decoder mirrors it with three up-convolutions,
ReLU on hidden layers and a sigmoid on the output so reconstructions live in
the [0, 1] pixel range. Weights are untied.
"""

import concurrent.futures
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from lapdae.errors import ConfigError, DimensionError, UsageError
from lapdae.tensor_core import Tensor, as_tensor, conv2d, conv_transpose2d, relu, sigmoid

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "sigmoid", "none")
LAYER_TAGS = ("conv1", "conv2", "conv3", "conv4", "bottleneck")
PIXELS_TAG = "pixels"
DEFAULT_EMBEDDING_BUDGET = 9216


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    output_padding: int = 0
    activation: str = "relu"

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        return (self.in_channels, self.out_channels, self.kernel, self.kernel)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel


@dataclass(frozen=True)
class ArchConfig:
    """Data-driven layer plan; serialised verbatim into checkpoints"""

    in_channels: int
    encoder: Tuple[LayerSpec, ...]
    decoder: Tuple[LayerSpec, ...]

    @property
    def layers(self) -> Tuple[LayerSpec, ...]:
        return self.encoder + self.decoder

    @property
    def total_stride(self) -> int:
        return int(np.prod([layer.stride for layer in self.encoder]))

    def validate(self) -> "ArchConfig":
        """Check the channel/stride chain; raises ConfigError naming the first inconsistent layer"""
        if not self.encoder or not self.decoder:
            raise ConfigError("Architecture needs at least one encoder and one decoder layer")
        channels = self.in_channels
        planned = [(layer, "conv") for layer in self.encoder] + [(layer, "upconv") for layer in self.decoder]
        for layer, expected_kind in planned:
            if layer.kind != expected_kind:
                raise ConfigError(f"Layer {layer.name}: kind '{layer.kind}' where '{expected_kind}' is expected")
            if layer.in_channels != channels:
                raise ConfigError(
                    f"Layer {layer.name}: in_channels {layer.in_channels} does not match the "
                    f"{channels} channels produced by the previous layer"
                )
            if layer.kernel % 2 == 0 or layer.kernel < 1:
                raise ConfigError(f"Layer {layer.name}: kernel size {layer.kernel} must be odd")
            if layer.stride < 1 or layer.padding < 0 or not 0 <= layer.output_padding < layer.stride:
                raise ConfigError(f"Layer {layer.name}: invalid stride/padding/output_padding")
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"Layer {layer.name}: unknown activation '{layer.activation}'")
            channels = layer.out_channels
        if channels != self.in_channels:
            raise ConfigError(
                f"Layer {self.decoder[-1].name}: decoder ends with {channels} channels, "
                f"input has {self.in_channels}"
            )
        decoder_stride = int(np.prod([layer.stride for layer in self.decoder]))
        if decoder_stride != self.total_stride:
            raise ConfigError(
                f"Layer {self.decoder[0].name}: decoder upsamples by {decoder_stride}, "
                f"encoder downsamples by {self.total_stride}"
            )
        return self

    def to_dict(self) -> Dict:
        return {
            "in_channels": self.in_channels,
            "encoder": [asdict(layer) for layer in self.encoder],
            "decoder": [asdict(layer) for layer in self.decoder],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Dict) -> "ArchConfig":
        try:
            return cls(
                in_channels=int(data["in_channels"]),
                encoder=tuple(LayerSpec(**layer) for layer in data["encoder"]),
                decoder=tuple(LayerSpec(**layer) for layer in data["decoder"]),
            ).validate()
        except (KeyError, TypeError) as e:
            raise ConfigError(f"Malformed architecture metadata: {e}") from e

    def bottleneck_shape(self, height: int, width: int) -> Tuple[int, int, int]:
        for layer in self.encoder:
            height = (height + 2 * layer.padding - layer.kernel) // layer.stride + 1
            width = (width + 2 * layer.padding - layer.kernel) // layer.stride + 1
        return (self.encoder[-1].out_channels, height, width)


def build_arch(in_channels: int,
               encoder_channels: Sequence[int] = (32, 32, 64, 64),
               encoder_strides: Sequence[int] = (1, 2, 1, 2),
               decoder_channels: Sequence[int] = (32, 16),
               decoder_strides: Sequence[int] = (2, 2, 1),
               kernel: int = 3) -> ArchConfig:
    """
    Build the conv/up-conv plan from channel and stride lists

    The decoder's last layer maps back to ``in_channels`` with a sigmoid; every
    up-conv uses output_padding = stride - 1 so stride-2 layers exactly double.
    """
    if len(encoder_channels) != len(encoder_strides):
        raise ConfigError("encoder_channels and encoder_strides must have the same length")
    if len(decoder_channels) + 1 != len(decoder_strides):
        raise ConfigError("decoder_strides needs one more entry than decoder_channels")

    encoder = []
    channels = in_channels
    for index, (out_channels, stride) in enumerate(zip(encoder_channels, encoder_strides), start=1):
        encoder.append(LayerSpec(f"conv{index}", "conv", channels, int(out_channels), kernel, int(stride), kernel // 2))
        channels = int(out_channels)

    decoder = []
    outputs = list(decoder_channels) + [in_channels]
    for index, (out_channels, stride) in enumerate(zip(outputs, decoder_strides), start=1):
        last = index == len(outputs)
        decoder.append(LayerSpec(
            f"upconv{index}", "upconv", channels, int(out_channels), kernel, int(stride), kernel // 2,
            int(stride) - 1, "sigmoid" if last else "relu",
        ))
        channels = int(out_channels)
    return ArchConfig(in_channels, tuple(encoder), tuple(decoder)).validate()


ARCH_PRESETS = {
    "mnist": lambda: build_arch(1),
    "cifar10": lambda: build_arch(3),
}


@dataclass
class ModelParams:
    """Ordered named parameter tensors plus the architecture that produced them"""

    arch: ArchConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name) for name, t in self.tensors.items()
        })

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, {
            name: Tensor(t.data.astype(dtype), requires_grad=True, name=name) for name, t in self.tensors.items()
        })

    def is_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    def checksum(self) -> str:
        digest = hashlib.sha256(self.arch.to_json().encode("utf-8"))
        for name, tensor in self.tensors.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
        return digest.hexdigest()

    def fingerprint(self) -> str:
        return self.checksum()[:12]


def init_params(arch: ArchConfig, seed: int, dtype=np.float32) -> ModelParams:
    """
    Kaiming (fan-in) normal kernels and zero biases, deterministic per seed

    Args:
        arch: Validated architecture
        seed: RNG seed
        dtype: Storage dtype

    Returns:
        Freshly initialised parameters
    """
    arch.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer in arch.layers:
        std = math.sqrt(2.0 / layer.fan_in)
        weight = rng.normal(0.0, std, size=layer.weight_shape).astype(dtype)
        tensors[f"{layer.name}.weight"] = Tensor(weight, requires_grad=True, name=f"{layer.name}.weight")
        tensors[f"{layer.name}.bias"] = Tensor(np.zeros(layer.out_channels, dtype=dtype), requires_grad=True,
                                               name=f"{layer.name}.bias")
    logger.debug(f"Initialised {arch.in_channels}-channel LapDAE with {sum(t.size for t in tensors.values())} parameters")
    return ModelParams(arch, tensors)


@dataclass
class EncodedBatch:
    """Spatial bottleneck plus the per-layer encoder feature maps"""

    bottleneck: Tensor
    features: Dict[str, Tensor] = field(default_factory=dict)


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return relu(x)
    if activation == "sigmoid":
        return sigmoid(x)
    return x


def _apply(params: ModelParams, layer: LayerSpec, x: Tensor) -> Tensor:
    weight, bias = params[f"{layer.name}.weight"], params[f"{layer.name}.bias"]
    if layer.kind == "conv":
        out = conv2d(x, weight, bias, layer.stride, layer.padding)
    else:
        out = conv_transpose2d(x, weight, bias, layer.stride, layer.padding, layer.output_padding)
    return _activate(out, layer.activation)


def encode(params: ModelParams, x: Union[Tensor, np.ndarray]) -> EncodedBatch:
    """
    Encoder forward pass

    Args:
        params: Model parameters
        x: Corrupted batch (B, C, H, W); H and W must be multiples of the total stride

    Returns:
        EncodedBatch with the bottleneck and conv1..conv4 feature maps
    """
    x = as_tensor(x)
    arch = params.arch
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise DimensionError(f"encode: expected (batch, {arch.in_channels}, H, W) input, got shape {x.shape}")
    stride = arch.total_stride
    if x.shape[2] % stride or x.shape[3] % stride:
        raise DimensionError(
            f"encode: spatial extents {x.shape[2]}x{x.shape[3]} (axes 2, 3) must be multiples of the "
            f"encoder stride {stride}"
        )
    features = {}
    out = x
    for layer in arch.encoder:
        out = _apply(params, layer, out)
        features[layer.name] = out
    return EncodedBatch(bottleneck=out, features=features)


def decode(params: ModelParams, y: Union[EncodedBatch, Tensor]) -> Tensor:
    """Decoder forward pass; output matches the encoder input shape, values in (0, 1)"""
    out = y.bottleneck if isinstance(y, EncodedBatch) else as_tensor(y)
    first = params.arch.decoder[0]
    if out.ndim != 4 or out.shape[1] != first.in_channels:
        raise DimensionError(f"decode: expected (batch, {first.in_channels}, h, w) bottleneck, got shape {out.shape}")
    for layer in params.arch.decoder:
        out = _apply(params, layer, out)
    return out


def autoencode(params: ModelParams, x: Union[Tensor, np.ndarray]) -> Tensor:
    return decode(params, encode(params, x))


def pooled_grid(channels: int, height: int, width: int, budget: Optional[int]) -> Tuple[int, int]:
    """Largest square-capped grid such that channels * gh * gw fits the element budget"""
    if budget is None or channels * height * width <= budget:
        return height, width
    side = max(1, int(math.isqrt(max(budget // channels, 1))))
    return min(height, side), min(width, side)


def adaptive_avg_pool(x: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
    """Average-pool (N, C, H, W) onto a (gh, gw) grid of near-equal bins"""
    height, width = x.shape[-2:]
    grid_h, grid_w = grid
    if (grid_h, grid_w) == (height, width):
        return x
    out = np.empty(x.shape[:-2] + (grid_h, grid_w), dtype=np.float64)
    for i in range(grid_h):
        top, bottom = (i * height) // grid_h, -((-(i + 1) * height) // grid_h)
        for j in range(grid_w):
            left, right = (j * width) // grid_w, -((-(j + 1) * width) // grid_w)
            out[..., i, j] = x[..., top:bottom, left:right].mean(axis=(-2, -1))
    return out.astype(x.dtype)


def _layer_output(params: ModelParams, batch: np.ndarray, layer: str) -> np.ndarray:
    if layer == PIXELS_TAG:
        return batch
    encoded = encode(params, batch)
    if layer == "bottleneck":
        return encoded.bottleneck.data
    return encoded.features[layer].data


def extract_embedding(params: Optional[ModelParams], x: np.ndarray, layer: str = "bottleneck",
                      budget: Optional[int] = None, batch_size: int = 256, workers: int = 1) -> np.ndarray:
    """
    Flattened per-sample features of one encoder layer

    Args:
        params: Frozen parameters (unused for the ``pixels`` identity backbone)
        x: Images (N, C, H, W)
        layer: conv1..conv4, bottleneck, or pixels
        budget: Optional element budget; larger maps are average-pooled to fit
        batch_size: Samples per forward pass
        workers: Thread pool size for the forward passes

    Returns:
        (N, D) float32 array
    """
    if layer not in LAYER_TAGS and layer != PIXELS_TAG:
        valid = ", ".join(LAYER_TAGS + (PIXELS_TAG,))
        raise UsageError(f"Unknown layer tag '{layer}' (valid: {valid})")
    if layer != PIXELS_TAG and params is None:
        raise UsageError(f"Layer '{layer}' needs model parameters")
    x = np.asarray(x, dtype=np.float32)
    starts = list(range(0, x.shape[0], batch_size))

    def _chunk(start: int) -> np.ndarray:
        maps = _layer_output(params, x[start:start + batch_size], layer)
        maps = adaptive_avg_pool(maps, pooled_grid(*maps.shape[1:], budget))
        return maps.reshape(maps.shape[0], -1)

    if workers > 1 and len(starts) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            chunks = list(executor.map(_chunk, starts))
    else:
        chunks = [_chunk(start) for start in starts]
    if not chunks:
        return np.zeros((0, 0), dtype=np.float32)
    return np.concatenate(chunks).astype(np.float32)
