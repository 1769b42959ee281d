"""Fused and independent CNN regressors built from :mod:`deepgait.nn` layers."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import nn

AXES = ("x", "y", "z")

CONV9_CHANNELS = (64, 64, 128, 128, 256, 256, 512, 512, 1024)
CONV9_DENSE = (1024, 512)
CONV5_CHANNELS = (64, 128, 256, 512, 1024)
CONV5_DENSE = (512,)

# Published totals, used only for the reconciliation report.
REFERENCE_PARAMS = {"conv9": 16_274_711, "conv5": 17_069_015}


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "fused"          # fused | independent
    depth: str = "conv9"            # conv9 | conv5
    channels: tuple | None = None   # None -> depth default
    dense: tuple | None = None
    out_len: int = 29
    dropout_p: float = 0.5
    channel_scale: Fraction = Fraction(1)
    init: str = "normal"            # normal | he
    init_sigma: float = 0.01
    block_order: str = "relu_bn"    # relu_bn (Conv-ReLU-BN-Pool) | bn_relu
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    n_sensors: int = 6
    in_len: int = 149
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "channel_scale", Fraction(self.channel_scale))
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.dense is not None:
            object.__setattr__(self, "dense", tuple(int(c) for c in self.dense))
        self.validate()

    def validate(self):
        if self.variant not in ("fused", "independent"):
            raise InvalidConfig(f"variant must be fused or independent, got {self.variant!r}")
        if self.depth not in ("conv9", "conv5"):
            raise InvalidConfig(f"depth must be conv9 or conv5, got {self.depth!r}")
        if self.out_len != 29:
            raise InvalidConfig("out_len is fixed at 29")
        if self.channel_scale <= 0:
            raise InvalidConfig("channel_scale must be positive")
        if not 0 <= self.dropout_p < 1:
            raise InvalidConfig("dropout_p must be in [0, 1)")
        if self.init not in ("normal", "he"):
            raise InvalidConfig(f"init must be normal or he, got {self.init!r}")
        if self.block_order not in ("relu_bn", "bn_relu"):
            raise InvalidConfig(f"block_order must be relu_bn or bn_relu, got {self.block_order!r}")
        if self.dtype not in ("float64", "float32"):
            raise InvalidConfig("dtype must be float64 or float32")
        n_pool = self.n_pools
        if self.in_len >> n_pool < 1:
            raise InvalidConfig(f"input length {self.in_len} too short for {n_pool} poolings")

    @property
    def base_channels(self):
        if self.channels is not None:
            return self.channels
        return CONV9_CHANNELS if self.depth == "conv9" else CONV5_CHANNELS

    @property
    def base_dense(self):
        if self.dense is not None:
            return self.dense
        return CONV9_DENSE if self.depth == "conv9" else CONV5_DENSE

    def scaled(self, width):
        return max(1, round(width * self.channel_scale))

    @property
    def conv_widths(self):
        return [self.scaled(c) for c in self.base_channels]

    @property
    def dense_widths(self):
        return [self.scaled(c) for c in self.base_dense]

    @property
    def pooled(self):
        """Per conv layer, whether a 1x2 time pooling follows it."""
        n = len(self.base_channels)
        if self.depth == "conv9":
            return [i >= 2 for i in range(n)]
        return [True] * n

    @property
    def n_pools(self):
        return sum(self.pooled)

    @property
    def flatten_width(self):
        t = self.in_len
        for p in self.pooled:
            if p:
                t //= 2
        return self.n_sensors * t * self.conv_widths[-1]

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            d[f.name] = "" if v is None else str(v)
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in d.items():
            if k not in types:
                continue
            if k in ("channels", "dense"):
                kw[k] = tuple(int(i) for i in v.split(",")) if v else None
            elif k == "channel_scale":
                kw[k] = Fraction(v)
            elif k in ("out_len", "n_sensors", "in_len"):
                kw[k] = int(v)
            elif k in ("dropout_p", "init_sigma", "bn_momentum", "bn_eps"):
                kw[k] = float(v)
            else:
                kw[k] = v
        return cls(**kw)


class Net:
    """One conv trunk followed by dense layers and ``n_heads`` linear heads."""

    def __init__(self, cfg: ModelConfig, n_heads: int, rng: np.random.Generator):
        dt = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.trunk: list[nn.Layer] = []
        c_in = 1
        for width, pool in zip(cfg.conv_widths, cfg.pooled):
            conv = nn.Conv2D(c_in, width, dtype=dt)
            bn = nn.BatchNorm(width, momentum=cfg.bn_momentum, eps=cfg.bn_eps, dtype=dt)
            block = [conv, nn.ReLU(), bn] if cfg.block_order == "relu_bn" else [conv, bn, nn.ReLU()]
            self.trunk += block
            if pool:
                self.trunk.append(nn.MaxPoolTime())
            c_in = width
        self.trunk.append(nn.Flatten())
        n_in = cfg.flatten_width
        for width in cfg.dense_widths:
            drop_rng = np.random.default_rng(rng.integers(2**63))
            self.trunk += [nn.Dense(n_in, width, dtype=dt), nn.ReLU(), nn.Dropout(cfg.dropout_p, drop_rng)]
            n_in = width
        self.heads = [nn.Dense(n_in, cfg.out_len, dtype=dt) for _ in range(n_heads)]
        self._init(rng)

    def _init(self, rng):
        for layer in self.layers:
            if isinstance(layer, (nn.Conv2D, nn.Dense)):
                w = layer.params["w"]
                if self.cfg.init == "he":
                    sigma = np.sqrt(2.0 / (w.size / w.shape[0]))
                else:
                    sigma = self.cfg.init_sigma
                w[...] = rng.normal(0.0, sigma, size=w.shape) if sigma > 0 else 0.0

    @property
    def layers(self):
        return self.trunk + self.heads

    def forward(self, x, train=False):
        h = x[None].astype(self.cfg.dtype, copy=False)
        for layer in self.trunk:
            h = layer.forward(h, train)
        return [head.forward(h, train) for head in self.heads]

    def backward(self, head_grads):
        g = None
        for head, gh in zip(self.heads, head_grads):
            gi = head.backward(gh)
            g = gi if g is None else g + gi
        for layer in reversed(self.trunk):
            g = layer.backward(g)
        return g[0]


class Model:
    """Fused: one net, three heads. Independent: three single-head nets (x, y, z)."""

    def __init__(self, cfg: ModelConfig, nets: list[Net]):
        self.cfg = cfg
        self.nets = nets

    def forward(self, x, train=False):
        """Return the three per-axis predictions, each ``(B, 29)``."""
        if x.ndim != 3 or x.shape[1:] != (self.cfg.n_sensors, self.cfg.in_len):
            raise nn.ShapeMismatch(
                f"model input must be (B, {self.cfg.n_sensors}, {self.cfg.in_len}), got {x.shape}")
        if self.cfg.variant == "fused":
            return self.nets[0].forward(x, train)
        return [net.forward(x, train)[0] for net in self.nets]

    def backward(self, grads):
        if self.cfg.variant == "fused":
            return self.nets[0].backward(grads)
        gx = None
        for net, g in zip(self.nets, grads):
            gi = net.backward([g])
            gx = gi if gx is None else gx + gi
        return gx

    def named_layers(self):
        for ni, net in enumerate(self.nets):
            for li, layer in enumerate(net.trunk):
                yield f"net{ni}.trunk{li:02d}", layer
            for hi, layer in enumerate(net.heads):
                yield f"net{ni}.head{hi}", layer

    def named_tensors(self):
        """(name, array) for every parameter and batch-norm buffer, in a fixed order."""
        for prefix, layer in self.named_layers():
            for k, v in layer.params.items():
                yield f"{prefix}.{k}", v
            for k, v in layer.buffers.items():
                yield f"{prefix}.{k}", v

    def parameters(self):
        """(layer, name) pairs for every trainable tensor."""
        for _, layer in self.named_layers():
            for k in layer.params:
                yield layer, k


def build_model(cfg: ModelConfig, rng=None, seed=0) -> Model:
    """Weights ~ N(0, sigma^2) (or He-scaled), biases zero, BN identity."""
    if rng is None:
        rng = np.random.default_rng(seed)
    n_nets, n_heads = (1, 3) if cfg.variant == "fused" else (3, 1)
    return Model(cfg, [Net(cfg, n_heads, rng) for _ in range(n_nets)])


def count_parameters(model_or_cfg):
    """Total trainable parameters plus a per-layer breakdown ``[(name, desc, n)]``."""
    model = model_or_cfg
    if isinstance(model_or_cfg, ModelConfig):
        # shape-only build; zero init skips the RNG cost at full scale
        model = build_model(replace(model_or_cfg, init="normal", init_sigma=0.0, dtype="float32"))
    rows = []
    for name, layer in model.named_layers():
        n = layer.param_count()
        if n:
            rows.append((name, layer.describe(), n))
    return sum(r[2] for r in rows), rows


def format_breakdown(total, rows, reference=None) -> str:
    lines = [f"{'layer':<18}{'type':<24}{'params':>14}"]
    lines += [f"{name:<18}{desc:<24}{n:>14,}" for name, desc, n in rows]
    lines.append(f"{'total':<42}{total:>14,}")
    if reference is not None:
        diff = total - reference
        lines.append(f"{'reference':<42}{reference:>14,}")
        lines.append(f"{'difference':<42}{diff:>+14,} ({100 * diff / reference:+.4f}%)")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# checkpoints: <dir>/manifest.txt (key=value) + <dir>/<tensor>.bin

def save_checkpoint(model: Model, path, extra: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = dict(model.cfg.to_dict())
    for k, v in (extra or {}).items():
        meta[f"meta.{k}"] = str(v)
    names = []
    for name, arr in model.named_tensors():
        nn.save_tensor(path / f"{name}.bin", arr)
        names.append(name)
    meta["tensors"] = ",".join(names)
    (path / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def load_checkpoint(path) -> Model:
    path = Path(path)
    meta = read_manifest(path / "manifest.txt")
    cfg = ModelConfig.from_dict(meta)
    model = build_model(replace(cfg, init="normal", init_sigma=0.0))
    model.cfg = cfg
    for name, arr in model.named_tensors():
        arr[...] = nn.load_tensor(path / f"{name}.bin")
    return model
