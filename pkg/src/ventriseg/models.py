"""DeepVentricle (symmetric UNet variant) and FastVentricle (ENet variant) builders.

Both builders return a :class:`~ventriseg.graph.ModelGraph` whose output is
the per-structure *logit* map ``(B, out_channels, H, W)``. The sigmoid that
turns logits into per-channel probabilities lives in the loss and in
inference, where it can be evaluated stably.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ConfigError
from .graph import INPUT, ModelGraph
from .layers import (Add, BatchNorm, Concat, Conv2D, ConvSpec, MaxPool, MaxUnpool, PadChannels,
                     PReLU, ReLU, SpatialDropout, UpsampleNearest)
from .tensor import Rng


@dataclass
class DeepVentricleConfig:
    num_pool_layers: int = 4
    convs_per_block: int = 2
    initial_filters: int = 32
    use_batchnorm: bool = True
    dropout_p: float = 0.0
    input_size: int = 64
    out_channels: int = 3
    in_channels: int = 1

    def __post_init__(self):
        for key in ("num_pool_layers", "convs_per_block", "initial_filters", "input_size",
                    "out_channels", "in_channels"):
            if getattr(self, key) < (0 if key == "num_pool_layers" else 1):
                raise ConfigError(key, f"must be positive, got {getattr(self, key)}")
        if self.input_size % (2 ** self.num_pool_layers):
            raise ConfigError("input_size", f"{self.input_size} is not divisible by "
                                            f"2^{self.num_pool_layers}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p", f"must lie in [0, 1), got {self.dropout_p}")


@dataclass
class FastVentricleConfig:
    asym_kernel: int = 5
    section2_repeats: int = 1
    initial_bottlenecks: int = 4
    initial_filters: int = 16
    projection_ratio: int = 4
    use_skip_connections: bool = True
    dropout_p: float = 0.1
    input_size: int = 64
    out_channels: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if self.asym_kernel < 3 or self.asym_kernel % 2 == 0:
            raise ConfigError("asym_kernel", f"must be odd and >= 3, got {self.asym_kernel}")
        if self.section2_repeats < 0:
            raise ConfigError("section2_repeats", "must be >= 0")
        if self.initial_bottlenecks < 0:
            raise ConfigError("initial_bottlenecks", "must be >= 0")
        if self.initial_filters <= self.in_channels:
            raise ConfigError("initial_filters", "must exceed in_channels (initial block concat)")
        if self.projection_ratio < 1 or self.initial_filters % self.projection_ratio:
            raise ConfigError("projection_ratio", f"{self.projection_ratio} must be >= 1 and divide "
                                                  f"initial_filters={self.initial_filters}")
        if self.input_size % 8:
            raise ConfigError("input_size", f"{self.input_size} is not divisible by 8")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p", f"must lie in [0, 1), got {self.dropout_p}")
        if self.out_channels < 1 or self.in_channels < 1:
            raise ConfigError("out_channels", "channel counts must be positive")


# reference pair used for complexity comparisons and the phantom training runs
FV_REF = FastVentricleConfig(asym_kernel=5, section2_repeats=1, initial_bottlenecks=4,
                             initial_filters=16, projection_ratio=4, use_skip_connections=True,
                             dropout_p=0.1, input_size=64)
DV_REF = DeepVentricleConfig(num_pool_layers=4, convs_per_block=2, initial_filters=32,
                             use_batchnorm=True, input_size=64)


class _Builder:
    """Appends uniquely named layers to a graph, drawing init weights from one stream."""

    def __init__(self, graph, rng):
        self.g = graph
        self.rng = rng
        self.stage = ""

    def add(self, name, layer, *inputs):
        return self.g.add(name, layer, *inputs, stage=self.stage)

    def conv(self, name, x, kh, kw, cin, cout, stride=1, dilation=1, bias=False):
        spec = ConvSpec(kh, kw, cin, cout, stride=stride, dilation=dilation, has_bias=bias)
        return self.add(name, Conv2D(spec, rng=self.rng.child(name)), x)

    def conv_bn_act(self, name, x, kh, kw, cin, cout, act="prelu", bn=True, **opts):
        h = self.conv(name, x, kh, kw, cin, cout, bias=not bn, **opts)
        if bn:
            h = self.add(f"{name}.bn", BatchNorm(cout), h)
        if act == "prelu":
            return self.add(f"{name}.prelu", PReLU(cout), h)
        return self.add(f"{name}.relu", ReLU(), h)


# --------------------------------------------------------------------------
# DeepVentricle


def build_deepventricle(config: DeepVentricleConfig, seed=0) -> ModelGraph:
    """Symmetric encoder/decoder with same-padded 3x3 convolutions and concat skips.

    Each encoder level runs ``convs_per_block`` conv(+BN)+ReLU units and then
    a 2x2 max pool; filters double per level. The decoder mirrors it with a
    nearest-neighbour upsample, concatenation with the equal-resolution
    encoder output, and the same number of convolutions at half the filters.
    A final 1x1 convolution produces one logit map per structure.
    """
    c = config
    g = ModelGraph(in_channels=c.in_channels, config=c)
    b = _Builder(g, Rng(seed, ("deepventricle",)))
    x, ch = INPUT, c.in_channels
    skips = []
    b.stage = "encoder"
    for level in range(c.num_pool_layers + 1):
        width = c.initial_filters * 2 ** level
        for k in range(c.convs_per_block):
            x = b.conv_bn_act(f"enc{level}.conv{k}", x, 3, 3, ch, width, act="relu",
                              bn=c.use_batchnorm)
            ch = width
        if level < c.num_pool_layers:
            skips.append((x, ch))
            x = b.add(f"enc{level}.pool", MaxPool(2), x)
    if c.dropout_p > 0:
        x = b.add("bottom.dropout", SpatialDropout(c.dropout_p), x)
    b.stage = "decoder"
    for level in reversed(range(c.num_pool_layers)):
        width = c.initial_filters * 2 ** level
        up = b.add(f"dec{level}.up", UpsampleNearest(2), x)
        skip, skip_ch = skips[level]
        x = b.add(f"dec{level}.concat", Concat(), up, skip)
        ch += skip_ch
        for k in range(c.convs_per_block):
            x = b.conv_bn_act(f"dec{level}.conv{k}", x, 3, 3, ch, width, act="relu",
                              bn=c.use_batchnorm)
            ch = width
    b.conv("head", x, 1, 1, ch, c.out_channels, bias=True)
    g.validate((1, c.in_channels, c.input_size, c.input_size))
    return g


# --------------------------------------------------------------------------
# FastVentricle


SECTION2_PATTERN = (("regular", 1), ("dilated", 2), ("asymmetric", 1), ("dilated", 4),
                    ("regular", 1), ("dilated", 8), ("asymmetric", 1), ("dilated", 16))


def _regular_bottleneck(b, name, x, ch, ratio, kind="regular", dilation=1, asym=5, p=0.0):
    inner = ch // ratio
    h = b.conv_bn_act(f"{name}.proj", x, 1, 1, ch, inner)
    if kind == "asymmetric":
        h = b.conv(f"{name}.conv1x{asym}", h, 1, asym, inner, inner)
        h = b.conv_bn_act(f"{name}.conv{asym}x1", h, asym, 1, inner, inner)
    else:
        h = b.conv_bn_act(f"{name}.conv", h, 3, 3, inner, inner, dilation=dilation)
    h = b.conv_bn_act(f"{name}.expand", h, 1, 1, inner, ch)
    if p > 0:
        h = b.add(f"{name}.dropout", SpatialDropout(p), h)
    out = b.add(f"{name}.add", Add(), x, h)
    return b.add(f"{name}.out", PReLU(ch), out)


def _downsampling_bottleneck(b, name, x, cin, cout, ratio, p=0.0):
    inner = cin // ratio
    pool = MaxPool(2)
    main = b.add(f"{name}.pool", pool, x)
    main = b.add(f"{name}.padch", PadChannels(cout), main)
    h = b.conv_bn_act(f"{name}.proj", x, 2, 2, cin, inner, stride=2)
    h = b.conv_bn_act(f"{name}.conv", h, 3, 3, inner, inner)
    h = b.conv_bn_act(f"{name}.expand", h, 1, 1, inner, cout)
    if p > 0:
        h = b.add(f"{name}.dropout", SpatialDropout(p), h)
    out = b.add(f"{name}.add", Add(), main, h)
    return b.add(f"{name}.out", PReLU(cout), out), pool


def _upsampling_bottleneck(b, name, x, cin, cout, ratio, pool, p=0.0):
    inner = cin // ratio
    main = b.conv(f"{name}.main", x, 1, 1, cin, cout)
    main = b.add(f"{name}.main.bn", BatchNorm(cout), main)
    main = b.add(f"{name}.unpool", MaxUnpool(pool), main)
    h = b.conv_bn_act(f"{name}.proj", x, 1, 1, cin, inner)
    h = b.add(f"{name}.up", UpsampleNearest(2), h)
    h = b.conv_bn_act(f"{name}.conv", h, 3, 3, inner, inner)
    h = b.conv_bn_act(f"{name}.expand", h, 1, 1, inner, cout)
    if p > 0:
        h = b.add(f"{name}.dropout", SpatialDropout(p), h)
    out = b.add(f"{name}.add", Add(), main, h)
    return b.add(f"{name}.out", PReLU(cout), out)


def _skip_merge(b, name, x, skip, ch):
    """Concatenate an encoder tensor and restore ``ch`` channels with a 1x1 conv."""
    size = b.g.config.input_size
    shapes = b.g.shapes((1, b.g.in_channels, size, size))
    if shapes[x][2:] != shapes[skip][2:]:
        raise ValueError(f"skip {skip} -> {x}: spatial size mismatch "
                         f"{shapes[skip][2:]} vs {shapes[x][2:]}")
    cat = b.add(f"{name}.concat", Concat(), x, skip)
    return b.conv_bn_act(f"{name}.fuse", cat, 1, 1, 2 * ch, ch)


def build_fastventricle(config: FastVentricleConfig, seed=0) -> ModelGraph:
    """ENet-style asymmetric encoder/decoder with optional encoder-to-decoder skips.

    Layout (``f`` = initial_filters, resolution relative to the input):

    - initial block, 1/2: stride-2 3x3 conv to ``f - in_channels`` maps,
      concatenated with a 2x2 max pool of the input
    - section 1, 1/4: downsampling bottleneck to ``4f``, then
      ``initial_bottlenecks`` regular bottlenecks
    - section 2, 1/8: downsampling bottleneck to ``8f``, then the eight-block
      regular/dilated/asymmetric pattern
    - section 3, 1/8: the same pattern ``section2_repeats`` times
    - section 4, 1/4: upsampling bottleneck to ``4f`` (+ skip from section 1),
      two regular bottlenecks
    - section 5, 1/2: upsampling bottleneck to ``f`` (+ skip from the initial
      block), one regular bottleneck
    - nearest upsample to full resolution and a 1x1 conv to the logits
    """
    c = config
    f, r, p = c.initial_filters, c.projection_ratio, c.dropout_p
    g = ModelGraph(in_channels=c.in_channels, config=c)
    b = _Builder(g, Rng(seed, ("fastventricle",)))

    b.stage = "encoder.initial"
    main = b.conv("initial.conv", INPUT, 3, 3, c.in_channels, f - c.in_channels, stride=2)
    ext = b.add("initial.pool", MaxPool(2), INPUT)
    x = b.add("initial.concat", Concat(), main, ext)
    x = b.add("initial.bn", BatchNorm(f), x)
    initial = x = b.add("initial.prelu", PReLU(f), x)

    b.stage = "encoder.section1"
    x, pool1 = _downsampling_bottleneck(b, "s1.down", x, f, 4 * f, r, p)
    for i in range(c.initial_bottlenecks):
        x = _regular_bottleneck(b, f"s1.reg{i}", x, 4 * f, r, p=p)
    section1 = x

    b.stage = "encoder.section2"
    x, pool2 = _downsampling_bottleneck(b, "s2.down", x, 4 * f, 8 * f, r, p)
    sections = [("encoder.section2", "s2")]
    sections += [("encoder.section3", f"s3r{k}") for k in range(c.section2_repeats)]
    for stage, prefix in sections:
        b.stage = stage
        for i, (kind, dil) in enumerate(SECTION2_PATTERN):
            x = _regular_bottleneck(b, f"{prefix}.{kind}{i}", x, 8 * f, r, kind=kind,
                                    dilation=dil, asym=c.asym_kernel, p=p)

    b.stage = "decoder.section4"
    x = _upsampling_bottleneck(b, "s4.up", x, 8 * f, 4 * f, r, pool2, p)
    if c.use_skip_connections:
        x = _skip_merge(b, "s4.skip", x, section1, 4 * f)
    for i in range(2):
        x = _regular_bottleneck(b, f"s4.reg{i}", x, 4 * f, r, p=p)

    b.stage = "decoder.section5"
    x = _upsampling_bottleneck(b, "s5.up", x, 4 * f, f, r, pool1, p)
    if c.use_skip_connections:
        x = _skip_merge(b, "s5.skip", x, initial, f)
    x = _regular_bottleneck(b, "s5.reg0", x, f, r, p=p)

    b.stage = "decoder.head"
    x = b.add("head.up", UpsampleNearest(2), x)
    b.conv("head", x, 1, 1, f, c.out_channels, bias=True)
    g.validate((1, c.in_channels, c.input_size, c.input_size))
    return g


def build(config, seed=0) -> ModelGraph:
    if isinstance(config, DeepVentricleConfig):
        return build_deepventricle(config, seed)
    if isinstance(config, FastVentricleConfig):
        return build_fastventricle(config, seed)
    raise TypeError(f"unknown architecture config {type(config).__name__}")


ARCHS = {"deepventricle": DeepVentricleConfig, "fastventricle": FastVentricleConfig}


def arch_name(config):
    for name, cls in ARCHS.items():
        if isinstance(config, cls):
            return name
    raise TypeError(f"unknown architecture config {type(config).__name__}")
