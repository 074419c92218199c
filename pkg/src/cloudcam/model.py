"""CAM network: a compact two-level UNet with channel attention on the skips
and one convolutional head per retrieved property.

Input is the two-channel radiance window (0.66 um, 2.13 um); outputs are
log(COT + 1) and CER / 30, both linear.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import BadMagicError, CheckpointShapeError, ConfigError, ShapeError, TruncatedFileError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CAMC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 32
    in_channels: int = 2
    kernel: int = 3
    use_attention: bool = True
    use_dual_heads: bool = True
    attention_reduction: int = 8
    window: int = 64

    def validate(self):
        if self.base_width < 1 or self.window < 4:
            raise ConfigError("base_width and window must be positive (window >= 4)")
        if self.in_channels != 2:
            raise ConfigError(f"in_channels must be 2 (two radiance bands), got {self.in_channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd for same padding, got {self.kernel}")
        if self.window % 4:
            raise ConfigError(f"window {self.window} must be divisible by 4 (two pooling stages)")
        if self.attention_reduction < 1 or self.base_width % self.attention_reduction:
            raise ConfigError(
                f"base_width {self.base_width} must be divisible by attention_reduction {self.attention_reduction}")
        return self

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def layer_specs(cfg):
    """Ordered (name, shape, fan_in) for every parameter implied by ``cfg``."""
    W, k, cin = cfg.base_width, cfg.kernel, cfg.in_channels
    specs = []

    def conv(name, ci, co, ks=k):
        specs.append((f"{name}.weight", (co, ci, ks, ks), ci * ks * ks))
        specs.append((f"{name}.bias", (co,), None))

    def tconv(name, ci, co):
        # each output pixel sees exactly one tap per input channel
        specs.append((f"{name}.weight", (ci, co, 2, 2), ci))
        specs.append((f"{name}.bias", (co,), None))

    def attention(name, c):
        h = c // cfg.attention_reduction
        specs.extend([(f"{name}.w0", (h, c), c), (f"{name}.b0", (h,), None),
                      (f"{name}.w1", (c, h), h), (f"{name}.b1", (c,), None)])

    conv("enc1.conv1", cin, W)
    conv("enc1.conv2", W, W)
    conv("enc2.conv1", W, 2 * W)
    conv("enc2.conv2", 2 * W, 2 * W)
    conv("bottleneck.conv1", 2 * W, 4 * W)
    conv("bottleneck.conv2", 4 * W, 4 * W)
    tconv("up1", 4 * W, 2 * W)
    if cfg.use_attention:
        attention("att2", 2 * W)
    conv("dec2.conv1", 4 * W, 2 * W)
    conv("dec2.conv2", 2 * W, 2 * W)
    tconv("up2", 2 * W, W)
    if cfg.use_attention:
        attention("att1", W)
    conv("dec1.conv1", 2 * W, W)
    conv("dec1.conv2", W, W)
    if cfg.use_dual_heads:
        for head in ("head_cot", "head_cer"):
            conv(f"{head}.conv1", 2 * W, W)
            conv(f"{head}.out", W, 1, ks=1)
    else:
        conv("head.out", W, 2, ks=1)
    return specs


class Model:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise CheckpointShapeError("state keys do not match model parameters")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise CheckpointShapeError(f"{k}: shape {arr.shape}, model expects {p.shape}")
            p.data[...] = arr

    def __call__(self, radiance):
        return forward(self, radiance)


def build_model(config=None, seed=0):
    cfg = (config or ModelConfig()).validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in layer_specs(cfg):
        if fan_in is None:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(cfg, params)


def _conv(m, name, x):
    return L.conv2d(x, L.Conv2dParams.same(m.params[f"{name}.weight"], m.params[f"{name}.bias"]))


def _block(m, name, x):
    x = T.relu(_conv(m, f"{name}.conv1", x))
    return T.relu(_conv(m, f"{name}.conv2", x))


def _attend(m, name, x):
    if not m.config.use_attention:
        return x
    p = m.params
    cap = L.ChannelAttentionParams(p[f"{name}.w0"], p[f"{name}.b0"], p[f"{name}.w1"], p[f"{name}.b1"],
                                   m.config.attention_reduction)
    return L.channel_attention(x, cap)


def forward(model, radiance):
    """Map radiance [2, w, w] (or [N, 2, w, w]) to (log-COT, scaled CER), each [1, w, w] (or [N, 1, w, w])."""
    cfg = model.config
    x = radiance if isinstance(radiance, Tensor) else Tensor(radiance)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.window, cfg.window):
        raise ShapeError(
            f"radiance must be [{cfg.in_channels},{cfg.window},{cfg.window}] (optionally batched), got {radiance.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ShapeError("radiance contains non-finite values")
    p = model.params

    e1 = _block(model, "enc1", x)
    e2 = _block(model, "enc2", L.maxpool2(e1))
    bott = _block(model, "bottleneck", L.maxpool2(e2))
    u1 = L.transposed_conv2(bott, p["up1.weight"], p["up1.bias"])
    d2 = _block(model, "dec2", L.concat_channels(u1, _attend(model, "att2", e2)))
    u2 = L.transposed_conv2(d2, p["up2.weight"], p["up2.bias"])
    d1 = _block(model, "dec1", L.concat_channels(u2, _attend(model, "att1", e1)))

    if cfg.use_dual_heads:
        feats = L.concat_channels(d1, e1)
        outs = [_conv(model, f"{h}.out", T.relu(_conv(model, f"{h}.conv1", feats)))
                for h in ("head_cot", "head_cer")]
    else:
        both = _conv(model, "head.out", d1)
        outs = [both[:, 0:1], both[:, 1:2]]
    if single:
        outs = [T.reshape(o, o.shape[1:]) for o in outs]
    return outs[0], outs[1]


def predict(model, radiance, batch=16):
    """Gradient-free batched inference on raw arrays; returns numpy (cot, cer)."""
    radiance = np.asarray(radiance, dtype=np.float64)
    single = radiance.ndim == 3
    if single:
        radiance = radiance[None]
    cots, cers = [], []
    with T.no_grad():
        for i in range(0, len(radiance), batch):
            c, r = forward(model, radiance[i:i + batch])
            cots.append(c.data)
            cers.append(r.data)
    cot, cer = np.concatenate(cots), np.concatenate(cers)
    return (cot[0], cer[0]) if single else (cot, cer)


# -- checkpoint I/O ------------------------------------------------------

def checkpoint_bytes(model):
    cfg = model.config.to_json().encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<I", len(cfg)), cfg,
           struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        out.append(p.data.astype("<f4").tobytes())
    return b"".join(out)


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(buf, expected_config=None):
    r = _Reader(buf)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not a CAM checkpoint (magic {magic!r})")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise BadMagicError(f"unsupported checkpoint version {version}")
    (clen,) = r.unpack("<I")
    cfg = ModelConfig.from_dict(json.loads(r.take(clen).decode("utf-8"))).validate()
    if expected_config is not None and expected_config != cfg:
        raise CheckpointShapeError(f"checkpoint config {cfg} disagrees with expected {expected_config}")
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(dims)
    if r.pos != len(buf):
        raise CheckpointShapeError(f"{len(buf) - r.pos} trailing bytes after last parameter")
    expected = {name: shape for name, shape, _ in layer_specs(cfg)}
    if set(expected) != set(state):
        raise CheckpointShapeError("parameter names disagree with the embedded config")
    for name, shape in expected.items():
        if state[name].shape != shape:
            raise CheckpointShapeError(f"{name}: stored shape {state[name].shape}, config implies {shape}")
    model = build_model(cfg, seed=0)
    model.params = {name: Tensor(state[name], requires_grad=True) for name in expected}
    return model


def load_checkpoint(path, expected_config=None):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), expected_config)
