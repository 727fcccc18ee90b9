"""Stack-Net encoder-decoder.

Topology for kernel size ``r``, stack depth ``L`` and widths ``(c1, c2, c3, c4)``::

    stack1   L x [conv r x r -> c1, ReLU]          -> skip1, maxpool
    stack2   L x [conv r x r -> c2, ReLU]          -> skip2, maxpool
    stage3   2 x [conv 3x3  -> c3, ReLU]           -> skip3, maxpool
    bottom   2 x [conv 3x3  -> c4, ReLU]
    up3      tconv 2x2/2 -> c3, concat skip3, 2 x [conv 3x3 -> c3, ReLU]
    up2      tconv 2x2/2 -> c2, concat skip2, 2 x [conv 3x3 -> c2, ReLU]
    up1      tconv 2x2/2 -> c1, concat skip1, 2 x [conv 3x3 -> c1, ReLU]
    head     conv 1x1 -> 1, sigmoid

which gives ``14 + 2 L`` convolution / transposed-convolution layers.
"""

import io
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DimensionError, StateError

CHECKPOINT_MAGIC = b"SNET"
CHECKPOINT_VERSION = 1
_CONFIG_STRUCT = struct.Struct("<7i2iQ")


@dataclass(frozen=True)
class StackNetConfig:
    kernel_r: int = 3
    stack_depth: int = 5
    in_channels: int = 2
    channel_widths: tuple = (64, 96, 128, 256)
    height: int = 200
    width: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(int(c) for c in self.channel_widths))
        self.validate()

    def validate(self):
        if self.kernel_r < 1 or self.kernel_r % 2 == 0:
            raise ConfigError(f"kernel_r must be odd and positive, got {self.kernel_r}")
        if self.stack_depth < 1:
            raise ConfigError(f"stack_depth must be >= 1, got {self.stack_depth}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if len(self.channel_widths) != 4 or min(self.channel_widths) < 1:
            raise ConfigError(
                f"channel_widths needs 4 positive entries, got {self.channel_widths}"
            )
        if self.height % 8 or self.width % 8 or self.height < 8 or self.width < 8:
            raise ConfigError(
                f"input size must be a positive multiple of 8, got {self.height}x{self.width}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 bits, got {self.seed}")

    def to_dict(self):
        d = asdict(self)
        d["channel_widths"] = list(self.channel_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def expected_layer_count(stack_depth):
    return 14 + 2 * stack_depth


class Conv:
    """Convolution with optional fused ReLU."""

    def __init__(self, name, in_c, out_c, r, activation, rng, dtype):
        self.name = name
        fan_in = in_c * r * r
        w = rng.standard_normal((out_c, in_c, r, r)) * np.sqrt(2.0 / fan_in)
        self.weight = tc.Parameter(w.astype(dtype))
        self.bias = tc.Parameter(np.zeros(out_c, dtype=dtype))
        self.activation = activation
        self._cache = None

    def forward(self, x, cache=True):
        pre = tc.conv2d(x, self.weight.value, self.bias.value)
        out = tc.relu(pre) if self.activation else pre
        if cache:
            self._cache = (x, pre)
        return out

    def backward(self, grad):
        if self._cache is None:
            raise StateError(f"layer {self.name}: backward called without cached forward")
        x, pre = self._cache
        if self.activation:
            grad = tc.relu_adjoint(pre, grad)
        gx, gw, gb = tc.conv2d_adjoint(x, self.weight.value, grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def parameters(self):
        return [self.weight, self.bias]


class UpConv:
    """2x2 stride-2 transposed convolution."""

    def __init__(self, name, in_c, out_c, rng, dtype):
        self.name = name
        fan_in = in_c * 4
        w = rng.standard_normal((in_c, out_c, 2, 2)) * np.sqrt(2.0 / fan_in)
        self.weight = tc.Parameter(w.astype(dtype))
        self.bias = tc.Parameter(np.zeros(out_c, dtype=dtype))
        self._cache = None

    def forward(self, x, cache=True):
        if cache:
            self._cache = x
        return tc.transposed_conv2d(x, self.weight.value, self.bias.value)

    def backward(self, grad):
        if self._cache is None:
            raise StateError(f"layer {self.name}: backward called without cached forward")
        gx, gw, gb = tc.transposed_conv2d_adjoint(self._cache, self.weight.value, grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def parameters(self):
        return [self.weight, self.bias]


class StackNet:
    """A built Stack-Net; use :func:`build_stacknet` to construct one."""

    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        r, depth = config.kernel_r, config.stack_depth
        c1, c2, c3, c4 = config.channel_widths
        rng = np.random.default_rng(config.seed)

        def stack(prefix, in_c, out_c, n, k):
            convs = []
            for i in range(n):
                convs.append(Conv(f"{prefix}.{i}", in_c, out_c, k, True, rng, dtype))
                in_c = out_c
            return convs

        self.enc1 = stack("stack1", config.in_channels, c1, depth, r)
        self.enc2 = stack("stack2", c1, c2, depth, r)
        self.enc3 = stack("stage3", c2, c3, 2, 3)
        self.bottom = stack("bottom", c3, c4, 2, 3)
        self.up3 = UpConv("up3.tconv", c4, c3, rng, dtype)
        self.dec3 = stack("up3", 2 * c3, c3, 2, 3)
        self.up2 = UpConv("up2.tconv", c3, c2, rng, dtype)
        self.dec2 = stack("up2", 2 * c2, c2, 2, 3)
        self.up1 = UpConv("up1.tconv", c2, c1, rng, dtype)
        self.dec1 = stack("up1", 2 * c1, c1, 2, 3)
        self.head = Conv("head", c1, 1, 1, False, rng, dtype)
        self._pool_cache = None
        self._out_cache = None

    @property
    def layers(self):
        """All conv / transposed-conv layers in topology order."""
        return [
            *self.enc1, *self.enc2, *self.enc3, *self.bottom,
            self.up3, *self.dec3, self.up2, *self.dec2, self.up1, *self.dec1,
            self.head,
        ]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Return a copy of the model with parameters cast to ``dtype``."""
        other = StackNet(self.config, dtype=dtype)
        for dst, src in zip(other.parameters(), self.parameters()):
            dst.value[...] = src.value
        return other


def build_stacknet(config, dtype=np.float32):
    """Build a Stack-Net with He (fan-in) weights and zero biases drawn from ``config.seed``."""
    if not isinstance(config, StackNetConfig):
        raise ConfigError("config must be a StackNetConfig")
    config.validate()
    return StackNet(config, dtype=dtype)


def layer_count(model):
    return len(model.layers)


def _run(convs, x, cache):
    for conv in convs:
        x = conv.forward(x, cache)
    return x


def _run_back(convs, grad):
    for conv in reversed(convs):
        grad = conv.backward(grad)
    return grad


def forward(model, batch, cache=True):
    """Run the network on a (N, in_channels, H, W) batch; returns (N, 1, H, W) probabilities."""
    x = tc.check_tensor(batch, "batch")
    n, c, h, w = x.shape
    if c != model.config.in_channels:
        raise DimensionError(f"model expects {model.config.in_channels} channels, got {c}")
    if h % 8 or w % 8 or h == 0 or w == 0:
        raise DimensionError(f"H and W must be positive multiples of 8, got {h}x{w}")
    x = x.astype(model.dtype, copy=False)

    s1 = _run(model.enc1, x, cache)
    p1, a1 = tc.maxpool2x2(s1)
    s2 = _run(model.enc2, p1, cache)
    p2, a2 = tc.maxpool2x2(s2)
    s3 = _run(model.enc3, p2, cache)
    p3, a3 = tc.maxpool2x2(s3)
    b = _run(model.bottom, p3, cache)

    d3 = _run(model.dec3, tc.concat_channels(model.up3.forward(b, cache), s3), cache)
    d2 = _run(model.dec2, tc.concat_channels(model.up2.forward(d3, cache), s2), cache)
    d1 = _run(model.dec1, tc.concat_channels(model.up1.forward(d2, cache), s1), cache)
    out = tc.sigmoid(model.head.forward(d1, cache))

    if cache:
        model._pool_cache = ((a1, s1.shape), (a2, s2.shape), (a3, s3.shape))
        model._out_cache = out
    return out


def backward(model, loss_grad):
    """Accumulate d(loss)/d(param) into every ``Parameter.grad``.

    ``loss_grad`` is the gradient of the loss with respect to the network's
    probability output from the most recent cached :func:`forward`.
    """
    if model._out_cache is None or model._pool_cache is None:
        raise StateError("backward called without a cached forward pass")
    out = model._out_cache
    loss_grad = np.asarray(loss_grad)
    if loss_grad.shape != out.shape:
        raise DimensionError(f"loss_grad shape {loss_grad.shape} != output {out.shape}")
    (a1, sh1), (a2, sh2), (a3, sh3) = model._pool_cache
    c1, c2, c3, _ = model.config.channel_widths

    g = tc.sigmoid_adjoint(out, loss_grad.astype(model.dtype, copy=False))
    g = model.head.backward(g)

    g_up, g_s1 = tc.split_channels(_run_back(model.dec1, g), c1)
    g_d2 = model.up1.backward(g_up)
    g_up, g_s2 = tc.split_channels(_run_back(model.dec2, g_d2), c2)
    g_d3 = model.up2.backward(g_up)
    g_up, g_s3 = tc.split_channels(_run_back(model.dec3, g_d3), c3)
    g_b = model.up3.backward(g_up)

    g_p3 = _run_back(model.bottom, g_b)
    g_s3 = g_s3 + tc.maxpool2x2_adjoint(g_p3, a3, sh3)
    g_p2 = _run_back(model.enc3, g_s3)
    g_s2 = g_s2 + tc.maxpool2x2_adjoint(g_p2, a2, sh2)
    g_p1 = _run_back(model.enc2, g_s2)
    g_s1 = g_s1 + tc.maxpool2x2_adjoint(g_p1, a1, sh1)
    return _run_back(model.enc1, g_s1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model):
    """Serialize config and float32 parameters to little-endian bytes."""
    cfg = model.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(
        _CONFIG_STRUCT.pack(
            cfg.kernel_r, cfg.stack_depth, cfg.in_channels, *cfg.channel_widths,
            cfg.height, cfg.width, cfg.seed,
        )
    )
    for p in model.parameters():
        buf.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    return buf.getvalue()


def load_checkpoint(data, dtype=np.float32):
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise ConfigError("not a Stack-Net checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    off = 8
    if len(data) < off + _CONFIG_STRUCT.size:
        raise ConfigError("checkpoint truncated in config block")
    vals = _CONFIG_STRUCT.unpack_from(data, off)
    off += _CONFIG_STRUCT.size
    config = StackNetConfig(
        kernel_r=vals[0], stack_depth=vals[1], in_channels=vals[2],
        channel_widths=tuple(vals[3:7]), height=vals[7], width=vals[8], seed=vals[9],
    )
    model = StackNet(config, dtype=dtype)
    for p in model.parameters():
        nbytes = p.value.size * 4
        if len(data) < off + nbytes:
            raise ConfigError("checkpoint truncated in parameter block")
        arr = np.frombuffer(data, dtype="<f4", count=p.value.size, offset=off)
        p.value[...] = arr.reshape(p.value.shape)
        off += nbytes
    if off != len(data):
        raise ConfigError(f"checkpoint has {len(data) - off} trailing bytes")
    return model


def write_checkpoint(model, path):
    with open(path, "wb") as f:
        f.write(save_checkpoint(model))


def read_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as f:
        return load_checkpoint(f.read(), dtype=dtype)
