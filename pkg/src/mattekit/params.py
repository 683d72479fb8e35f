"""Model configuration, parameter initialization and flat-file storage."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .tensor import ConvSpec, ShapeError

MAGIC = b"MKPARAM1"
FORMAT_VERSION = 1
DEFAULT_FEATHER_HIDDEN = 8
FEATHER_STACK_CHANNELS = 11  # image(3) + scores(2) + image^2(3) + image*fg(3)


@dataclass(frozen=True)
class LdnConfig:
    """Architecture of the segmentation network (plus feathering width).

    The dense block has exactly four dilated layers; the initial block
    concatenates a stride-2 conv with a stride-2 max-pool of the input.
    """

    initial_conv_channels: int = 13
    growth_channels: int = 12
    dilation_rates: tuple[int, int, int, int] = (1, 2, 4, 8)
    input_size: tuple[int, int] = (128, 128)
    feather_hidden: int = DEFAULT_FEATHER_HIDDEN

    def __post_init__(self):
        if len(self.dilation_rates) != 4:
            raise ShapeError("exactly 4 dilation rates required")
        if min(self.dilation_rates) < 1:
            raise ShapeError("dilation rates must be positive")
        if self.initial_conv_channels < 1 or self.growth_channels < 1:
            raise ShapeError("channel counts must be positive")
        if self.feather_hidden < 1:
            raise ShapeError("feather_hidden must be positive")


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str           # "conv" or "pool"
    block: str          # "ldn" or "feather"
    spec: ConvSpec | None = None


def build_layer_table(config: LdnConfig) -> list[LayerDef]:
    """Full layer list in storage order, pools included.

    LDN: initial conv (stride 2) in parallel with one 2x2 max-pool of the
    input, concatenated; four dense layers, the first at stride 2, each
    consuming the (subsampled) block input plus all previous outputs; a
    1x1 classifier over the concatenated four outputs.  Feathering: two
    3x3 convs mapping the 11-channel stack to 3 coefficient maps.
    """
    g = config.growth_channels
    cat = config.initial_conv_channels + 3
    d1, d2, d3, d4 = config.dilation_rates
    table = [
        LayerDef("ldn.initial_conv", "conv", "ldn",
                 ConvSpec(3, config.initial_conv_channels, (3, 3),
                          stride=2, padding=1, dilation=1)),
        LayerDef("ldn.initial_pool", "pool", "ldn"),
        LayerDef("ldn.dense1", "conv", "ldn",
                 ConvSpec(cat, g, (3, 3), stride=2, padding=d1, dilation=d1)),
        LayerDef("ldn.dense2", "conv", "ldn",
                 ConvSpec(cat + g, g, (3, 3), stride=1, padding=d2, dilation=d2)),
        LayerDef("ldn.dense3", "conv", "ldn",
                 ConvSpec(cat + 2 * g, g, (3, 3), stride=1, padding=d3, dilation=d3)),
        LayerDef("ldn.dense4", "conv", "ldn",
                 ConvSpec(cat + 3 * g, g, (3, 3), stride=1, padding=d4, dilation=d4)),
        LayerDef("ldn.classifier", "conv", "ldn",
                 ConvSpec(4 * g, 2, (1, 1))),
        LayerDef("feather.conv1", "conv", "feather",
                 ConvSpec(FEATHER_STACK_CHANNELS, config.feather_hidden,
                          (3, 3), stride=1, padding=1)),
        LayerDef("feather.conv2", "conv", "feather",
                 ConvSpec(config.feather_hidden, 3, (3, 3), stride=1, padding=1)),
    ]
    return table


def conv_layers(config: LdnConfig, block: str | None = None) -> list[LayerDef]:
    return [l for l in build_layer_table(config)
            if l.kind == "conv" and (block is None or l.block == block)]


@dataclass
class ModelParams:
    """All conv weights/biases, keyed by layer name in table order."""

    config: LdnConfig
    layers: dict[str, tuple[np.ndarray, np.ndarray]]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config,
                           {k: (w.copy(), b.copy())
                            for k, (w, b) in self.layers.items()})

    def names(self, block: str | None = None) -> list[str]:
        return [l.name for l in conv_layers(self.config, block)]

    def count(self) -> int:
        return sum(w.size + b.size for w, b in self.layers.values())

    def zeros_like(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {k: (np.zeros_like(w), np.zeros_like(b))
                for k, (w, b) in self.layers.items()}


def init_params(config: LdnConfig, seed: int) -> ModelParams:
    """Seeded init: weights uniform in +-sqrt(6/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    layers = {}
    for layer in conv_layers(config):
        spec = layer.spec
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=spec.weight_shape).astype(np.float32)
        b = np.zeros(spec.out_channels, dtype=np.float32)
        layers[layer.name] = (w, b)
    return ModelParams(config, layers)


def _header_text(config: LdnConfig) -> str:
    lines = [
        f"format_version={FORMAT_VERSION}",
        f"initial_conv_channels={config.initial_conv_channels}",
        f"growth_channels={config.growth_channels}",
        "dilation_rates=" + ",".join(str(d) for d in config.dilation_rates),
        "input_size=" + ",".join(str(s) for s in config.input_size),
        f"feather_hidden={config.feather_hidden}",
    ]
    return "\n".join(lines) + "\n"


def _parse_header(text: str) -> LdnConfig:
    kv = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    version = int(kv.get("format_version", "-1"))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported params format version {version}")
    return LdnConfig(
        initial_conv_channels=int(kv["initial_conv_channels"]),
        growth_channels=int(kv["growth_channels"]),
        dilation_rates=tuple(int(d) for d in kv["dilation_rates"].split(",")),
        input_size=tuple(int(s) for s in kv["input_size"].split(",")),
        feather_hidden=int(kv["feather_hidden"]),
    )


def save_params(path, params: ModelParams) -> None:
    """Write magic, length-prefixed key=value header, then float32 LE
    weight/bias arrays concatenated in layer-table order."""
    header = _header_text(params.config).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for layer in conv_layers(params.config):
            w, b = params.layers[layer.name]
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a parameter file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        config = _parse_header(f.read(hlen).decode("utf-8"))
        layers = {}
        for layer in conv_layers(config):
            spec = layer.spec
            wn = int(np.prod(spec.weight_shape))
            raw = f.read(4 * (wn + spec.out_channels))
            if len(raw) != 4 * (wn + spec.out_channels):
                raise ValueError(f"{path}: truncated parameter file")
            w = np.frombuffer(raw[:4 * wn], dtype="<f4").reshape(spec.weight_shape)
            b = np.frombuffer(raw[4 * wn:], dtype="<f4")
            layers[layer.name] = (w.astype(np.float32), b.astype(np.float32))
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after parameters")
    return ModelParams(config, layers)


def with_input_size(params: ModelParams, size: tuple[int, int]) -> ModelParams:
    """Same weights, different nominal input size (fully convolutional)."""
    return ModelParams(replace(params.config, input_size=size), params.layers)
