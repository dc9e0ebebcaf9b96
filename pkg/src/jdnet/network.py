"""The deraining network: pairwise self-attention, scale-aggregation and
self-calibrated convolution composed into dense-connected joint units.

The network predicts the rain-streak layer r_hat from a rainy image o and
recovers the background as b_hat = o - r_hat. Stage k of the backbone consumes
the channel concatenation of the stem feature and all previous stage outputs,
compressed back to the working width by a 1x1 convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import BatchNormParams, ConvParams, ShapeError, Tensor

ABLATIONS = ("R1", "R2", "R3")
LEAK = 0.2

__all__ = [
    "ABLATIONS",
    "SelfAttentionParams",
    "ScaleAggParams",
    "SelfCalibConvParams",
    "JointUnitParams",
    "JDNetParams",
    "init_conv",
    "init_batch_norm",
    "init_self_attention",
    "init_scale_agg",
    "init_sc_conv",
    "build_jdnet",
    "self_attention_aggregate",
    "self_attention_forward",
    "scale_agg_forward",
    "sc_conv_forward",
    "joint_unit_forward",
    "jdnet_forward",
]


# ---------------------------------------------------------------------------
# initialization


def init_conv(rng, c_in, c_out, k, stride=1, padding=None, dtype=np.float32) -> ConvParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero bias; padding defaults to
    shape-preserving (k-1)//2 for stride 1."""
    if padding is None:
        padding = (k - 1) // 2
    bound = 1.0 / math.sqrt(c_in * k * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
    return ConvParams(
        weight=Tensor(w, requires_grad=True, dtype=dtype),
        bias=Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype),
        stride=stride,
        padding=padding,
    )


def init_batch_norm(c, dtype=np.float32, momentum=0.1, epsilon=1e-5) -> BatchNormParams:
    return BatchNormParams(
        scale=Tensor(np.ones(c), requires_grad=True, dtype=dtype),
        shift=Tensor(np.zeros(c), requires_grad=True, dtype=dtype),
        running_mean=np.zeros(c, dtype=dtype),
        running_var=np.ones(c, dtype=dtype),
        momentum=momentum,
        epsilon=epsilon,
    )


def _conv_entries(prefix, p: ConvParams):
    yield f"{prefix}.weight", p.weight
    yield f"{prefix}.bias", p.bias


# ---------------------------------------------------------------------------
# pairwise self-attention


@dataclass
class SelfAttentionParams:
    """Local vector attention over an odd footprint window.

    Two reduced-width 1x1 projections feed a subtraction relation; a two-layer
    1x1 map turns each relation vector into per-group logits, normalized over
    the window. The weighted value features pass through BatchNorm, LeakyReLU
    and an expanding 1x1 convolution before the residual add.
    """

    phi: ConvParams
    psi: ConvParams
    beta: ConvParams
    gamma1: ConvParams
    gamma2: ConvParams
    expand: ConvParams
    bn: BatchNormParams
    footprint: int
    red: int
    share: int
    normalize: str = "softmax"

    def __post_init__(self):
        c = self.phi.in_channels
        if c % self.red:
            raise ShapeError(f"{c} channels not divisible by reduction {self.red}")
        if (c // self.red) % self.share:
            raise ShapeError(f"reduced width {c // self.red} not divisible by share {self.share}")
        if self.footprint % 2 == 0 or self.footprint < 1:
            raise ShapeError(f"footprint must be odd, got {self.footprint}")
        if self.normalize not in ("softmax", "none"):
            raise ValueError(f"unknown attention normalization {self.normalize!r}")

    @property
    def channels(self):
        return self.phi.in_channels

    def named_params(self):
        for tag, conv in (
            ("phi", self.phi),
            ("psi", self.psi),
            ("beta", self.beta),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("expand", self.expand),
        ):
            yield from _conv_entries(tag, conv)
        yield "bn.scale", self.bn.scale
        yield "bn.shift", self.bn.shift

    def named_buffers(self):
        yield "bn.running_mean", self.bn.running_mean
        yield "bn.running_var", self.bn.running_var


def init_self_attention(
    rng, c, footprint=7, red=4, share=1, normalize="softmax", dtype=np.float32
) -> SelfAttentionParams:
    cr = c // red
    cg = cr // share
    return SelfAttentionParams(
        phi=init_conv(rng, c, cr, 1, dtype=dtype),
        psi=init_conv(rng, c, cr, 1, dtype=dtype),
        beta=init_conv(rng, c, cr, 1, dtype=dtype),
        gamma1=init_conv(rng, cr, cr, 1, dtype=dtype),
        gamma2=init_conv(rng, cr, cg, 1, dtype=dtype),
        expand=init_conv(rng, cr, c, 1, dtype=dtype),
        bn=init_batch_norm(cr, dtype=dtype),
        footprint=footprint,
        red=red,
        share=share,
        normalize=normalize,
    )


_mask_cache: dict = {}


def _footprint_mask(h, w, f, dtype):
    """(f*f, h, w) indicator of window offsets landing inside the image."""
    key = (h, w, f, np.dtype(dtype).name)
    m = _mask_cache.get(key)
    if m is None:
        f2 = f // 2
        ys = np.arange(h)[None, :, None]
        xs = np.arange(w)[None, None, :]
        offs = np.arange(f) - f2
        dy = np.repeat(offs, f)[:, None, None]
        dx = np.tile(offs, f)[:, None, None]
        inside = (ys + dy >= 0) & (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w)
        m = inside.astype(dtype)
        _mask_cache[key] = m
    return m


def _pos_to_group_major(positions, channels):
    """Permutation taking position-major (p*C + c) to group-major (c*P + p)."""
    idx = np.empty(positions * channels, dtype=np.int64)
    k = np.arange(positions * channels)
    c, p = k // positions, k % positions
    idx[k] = p * channels + c
    return idx


def self_attention_aggregate(x: Tensor, p: SelfAttentionParams, return_weights=False):
    """The window-weighted value sum (reduced width), before BN/expand/residual.

    Per output position i the relation phi(x_i) - psi(x_j) is mapped through
    the two-layer logit head for every window offset j; weights are normalized
    over the window per attention group (out-of-image offsets are excluded)
    and multiply the matching value channels of beta(x_j).
    """
    n, c, h, w = x.shape
    f = p.footprint
    if f > 2 * min(h, w) + 1:
        raise ShapeError(f"footprint {f} exceeds 2*min(H,W)+1 = {2 * min(h, w) + 1} for shape {x.shape}")
    pos = f * f
    cr = c // p.red
    groups = cr // p.share

    phi = T.conv2d(x, p.phi)
    psi = T.conv2d(x, p.psi)
    beta = T.conv2d(x, p.beta)

    # relation tensor for all window offsets at once, position-major layout
    delta = T.sub(T.tile_channels(phi, pos), T.neighbor_stack(psi, f))
    d2 = T.reshape(delta, (n * pos, cr, h, w))
    logits = T.conv2d(T.leaky_relu(T.conv2d(d2, p.gamma1), LEAK), p.gamma2)
    logits = T.reshape(logits, (n, pos * groups, h, w))
    logits = T.permute_channels(logits, _pos_to_group_major(pos, groups))

    mask = _footprint_mask(h, w, f, x.dtype)  # (pos, h, w)
    mask_g = np.tile(mask, (groups, 1, 1))[None]  # (1, groups*pos, h, w)
    if p.normalize == "softmax":
        # out-of-image offsets get a -1e9 logit, i.e. exactly zero weight
        weights = T.softmax_over_positions(
            T.add_array(logits, (mask_g - 1.0) * 1e9), groups, pos
        )
    else:
        weights = T.mul_array(logits, mask_g)

    if p.share > 1:
        weights = T.repeat_channel_blocks(weights, p.share, block=pos)
    beta_stack = T.permute_channels(T.neighbor_stack(beta, f), _pos_to_group_major(pos, cr))
    agg = T.sum_channel_groups(T.mul(weights, beta_stack), group=pos)
    if return_weights:
        return agg, weights
    return agg


def self_attention_forward(x: Tensor, p: SelfAttentionParams, training=False) -> Tensor:
    if x.shape[1] != p.channels:
        raise ShapeError(f"attention expects {p.channels} channels, got shape {x.shape}")
    agg = self_attention_aggregate(x, p)
    out = T.conv2d(T.leaky_relu(T.batch_norm(agg, p.bn, training), LEAK), p.expand)
    return T.add(out, x)


# ---------------------------------------------------------------------------
# scale aggregation


@dataclass
class ScaleAggParams:
    """Stride-2 pyramid with a residual block per scale, fused at full size."""

    down: list
    res: list  # (conv, conv) per scale
    fuse: ConvParams
    n: int

    def __post_init__(self):
        if self.n < 1 or len(self.down) != self.n or len(self.res) != self.n:
            raise ShapeError(f"scale count {self.n} disagrees with parameter lists")

    @property
    def channels(self):
        return self.fuse.out_channels

    def named_params(self):
        for i, conv in enumerate(self.down, start=1):
            yield from _conv_entries(f"down{i}", conv)
        for i, (a, b) in enumerate(self.res, start=1):
            yield from _conv_entries(f"res{i}.conv1", a)
            yield from _conv_entries(f"res{i}.conv2", b)
        yield from _conv_entries("fuse", self.fuse)

    def named_buffers(self):
        return iter(())


def init_scale_agg(rng, c, scales=4, dtype=np.float32) -> ScaleAggParams:
    down = [init_conv(rng, c, c, 3, stride=2, padding=1, dtype=dtype) for _ in range(scales)]
    res = [
        (init_conv(rng, c, c, 3, dtype=dtype), init_conv(rng, c, c, 3, dtype=dtype))
        for _ in range(scales)
    ]
    fuse = init_conv(rng, (scales + 1) * c, c, 1, dtype=dtype)
    return ScaleAggParams(down=down, res=res, fuse=fuse, n=scales)


def scale_agg_forward(x: Tensor, p: ScaleAggParams) -> Tensor:
    n, c, h, w = x.shape
    div = 1 << p.n
    if h % div or w % div:
        raise ShapeError(
            f"scale aggregation with {p.n} scales needs H,W divisible by {div}, got {h}x{w}"
        )
    feats = [x]
    cur = x
    for i in range(p.n):
        cur = T.leaky_relu(T.conv2d(cur, p.down[i]), LEAK)
        a, b = p.res[i]
        cur = T.add(cur, T.conv2d(T.leaky_relu(T.conv2d(cur, a), LEAK), b))
        feats.append(cur)
    ups = [feats[0]] + [T.upsample_bilinear(f, h, w) for f in feats[1:]]
    return T.conv2d(T.concat_channels(ups), p.fuse)


# ---------------------------------------------------------------------------
# self-calibrated convolution


@dataclass
class SelfCalibConvParams:
    """Four-way filter split; one branch gates the full-resolution response
    with a sigmoid computed from a pooled, upsampled view."""

    split1: ConvParams
    split2: ConvParams
    k1: ConvParams
    k2: ConvParams
    k3: ConvParams
    k4: ConvParams
    r: int

    def __post_init__(self):
        half = self.split1.out_channels
        for tag, part in (("k1", self.k1), ("k2", self.k2), ("k3", self.k3), ("k4", self.k4)):
            if part.weight.shape[:2] != (half, half):
                raise ShapeError(f"{tag} must map {half}->{half} channels, got {part.weight.shape}")
        if self.r < 1:
            raise ShapeError(f"pooling rate must be positive, got {self.r}")

    @property
    def channels(self):
        return self.split1.in_channels

    def named_params(self):
        for tag, conv in (
            ("split1", self.split1),
            ("split2", self.split2),
            ("k1", self.k1),
            ("k2", self.k2),
            ("k3", self.k3),
            ("k4", self.k4),
        ):
            yield from _conv_entries(tag, conv)

    def named_buffers(self):
        return iter(())


def init_sc_conv(rng, c, pool_r=4, dtype=np.float32) -> SelfCalibConvParams:
    if c % 2:
        raise ShapeError(f"self-calibrated convolution needs an even width, got {c}")
    half = c // 2
    return SelfCalibConvParams(
        split1=init_conv(rng, c, half, 1, dtype=dtype),
        split2=init_conv(rng, c, half, 1, dtype=dtype),
        k1=init_conv(rng, half, half, 3, dtype=dtype),
        k2=init_conv(rng, half, half, 3, dtype=dtype),
        k3=init_conv(rng, half, half, 3, dtype=dtype),
        k4=init_conv(rng, half, half, 3, dtype=dtype),
        r=pool_r,
    )


def sc_conv_forward(x: Tensor, p: SelfCalibConvParams) -> Tensor:
    n, c, h, w = x.shape
    if c != p.channels:
        raise ShapeError(f"self-calibrated conv expects {p.channels} channels, got shape {x.shape}")
    if c % 2:
        raise ShapeError(f"self-calibrated conv needs an even channel count, got {c}")
    if h % p.r or w % p.r:
        raise ShapeError(f"pooling rate {p.r} does not divide spatial size {h}x{w}")
    x1 = T.conv2d(x, p.split1)
    x2 = T.conv2d(x, p.split2)
    pooled = T.avg_pool(x1, p.r)
    x1_up = T.upsample_bilinear(T.conv2d(pooled, p.k2), h, w)
    gate = T.sigmoid(T.add(x1, x1_up))
    y1 = T.conv2d(T.mul(T.conv2d(x1, p.k3), gate), p.k4)
    y2 = T.conv2d(x2, p.k1)
    return T.concat_channels([y1, y2])


# ---------------------------------------------------------------------------
# joint unit and full network


@dataclass
class JointUnitParams:
    compress: ConvParams
    scale_agg: ScaleAggParams
    sc_conv: SelfCalibConvParams | None = None
    self_att: SelfAttentionParams | None = None

    def named_params(self):
        yield from _conv_entries("compress", self.compress)
        for name, t in self.scale_agg.named_params():
            yield f"agg.{name}", t
        if self.sc_conv is not None:
            for name, t in self.sc_conv.named_params():
                yield f"sc.{name}", t
        if self.self_att is not None:
            for name, t in self.self_att.named_params():
                yield f"att.{name}", t

    def named_buffers(self):
        if self.self_att is not None:
            for name, buf in self.self_att.named_buffers():
                yield f"att.{name}", buf


def joint_unit_forward(dense_in: Tensor, p: JointUnitParams, ablation: str, training=False) -> Tensor:
    """Compress the dense input to the working width, then apply the blocks
    the ablation tag enables: R1 scale-aggregation only, R2 adds the
    self-calibrated convolution, R3 adds self-attention."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation tag {ablation!r}; expected one of {ABLATIONS}")
    if dense_in.shape[1] != p.compress.in_channels:
        raise ShapeError(
            f"joint unit expects {p.compress.in_channels} dense input channels, "
            f"got shape {dense_in.shape}"
        )
    h = T.conv2d(dense_in, p.compress)
    h = scale_agg_forward(h, p.scale_agg)
    if ablation in ("R2", "R3"):
        if p.sc_conv is None:
            raise ValueError(f"ablation {ablation} needs the calibrated-conv branch, "
                             "but this unit was built without it")
        h = sc_conv_forward(h, p.sc_conv)
    if ablation == "R3":
        if p.self_att is None:
            raise ValueError("ablation R3 needs the attention branch, "
                             "but this unit was built without it")
        h = self_attention_forward(h, p.self_att, training)
    return h


@dataclass
class JDNetParams:
    head: ConvParams
    units: list
    tail: ConvParams
    channels: int
    ablation: str
    scales: int
    pool_r: int
    footprint: int = 7
    red: int = 4
    share: int = 1
    attention_normalize: str = "softmax"

    @property
    def unit_count(self):
        return len(self.units)

    @property
    def spatial_divisor(self) -> int:
        d = 1 << self.scales
        if self.ablation in ("R2", "R3"):
            d = d * self.pool_r // math.gcd(d, self.pool_r)
        return d

    def named_params(self):
        yield from _conv_entries("head", self.head)
        for k, unit in enumerate(self.units, start=1):
            for name, t in unit.named_params():
                yield f"unit{k}.{name}", t
        yield from _conv_entries("tail", self.tail)

    def named_buffers(self):
        for k, unit in enumerate(self.units, start=1):
            for name, buf in unit.named_buffers():
                yield f"unit{k}.{name}", buf

    def zero_grads(self):
        for _, t in self.named_params():
            t.zero_grad()

    def config(self) -> dict:
        return {
            "channels": self.channels,
            "units": self.unit_count,
            "scales": self.scales,
            "pool_r": self.pool_r,
            "footprint": self.footprint,
            "red": self.red,
            "share": self.share,
            "ablation": self.ablation,
            "attention_normalize": self.attention_normalize,
        }


def build_jdnet(
    channels=32,
    units=32,
    scales=4,
    pool_r=4,
    footprint=7,
    red=4,
    share=1,
    ablation="R3",
    attention_normalize="softmax",
    rng=None,
    dtype=np.float32,
) -> JDNetParams:
    """Construct the full parameter set. Stage k's compress layer takes k*C
    input channels (stem feature plus the k-1 previous stage outputs); this
    dense-connection arithmetic is asserted at build time."""
    if units < 1:
        raise ShapeError(f"need at least one joint unit, got {units}")
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation tag {ablation!r}; expected one of {ABLATIONS}")
    rng = rng if rng is not None else np.random.default_rng(0)
    head = init_conv(rng, 3, channels, 3, dtype=dtype)
    unit_list = []
    for k in range(1, units + 1):
        compress = init_conv(rng, k * channels, channels, 1, dtype=dtype)
        assert compress.in_channels == k * channels
        unit_list.append(
            JointUnitParams(
                compress=compress,
                scale_agg=init_scale_agg(rng, channels, scales=scales, dtype=dtype),
                sc_conv=(
                    init_sc_conv(rng, channels, pool_r=pool_r, dtype=dtype)
                    if ablation in ("R2", "R3")
                    else None
                ),
                self_att=(
                    init_self_attention(
                        rng,
                        channels,
                        footprint=footprint,
                        red=red,
                        share=share,
                        normalize=attention_normalize,
                        dtype=dtype,
                    )
                    if ablation == "R3"
                    else None
                ),
            )
        )
    tail = init_conv(rng, channels, 3, 3, dtype=dtype)
    return JDNetParams(
        head=head,
        units=unit_list,
        tail=tail,
        channels=channels,
        ablation=ablation,
        scales=scales,
        pool_r=pool_r,
        footprint=footprint,
        red=red,
        share=share,
        attention_normalize=attention_normalize,
    )


def jdnet_forward(o: Tensor, p: JDNetParams, ablation=None, training=False):
    """Predict (b_hat, r_hat) from a rainy image batch in [0,1].

    The stem is a 3x3 convolution plus LeakyReLU; each joint unit consumes the
    concatenation of the stem feature and every previous unit output; the tail
    applies LeakyReLU then a 3x3 convolution to emit the (unbounded) streak
    map, and b_hat = o - r_hat. Clamping to [0,1] is the caller's concern at
    inference time and must never happen inside a training loss.
    """
    ablation = ablation or p.ablation
    n, c, h, w = o.shape
    if c != 3:
        raise ShapeError(f"expected a 3-channel image batch, got shape {o.shape}")
    div = p.spatial_divisor
    if h % div or w % div:
        raise ShapeError(
            f"input {h}x{w} must have spatial sides divisible by {div} "
            f"({p.scales} pyramid scales, pooling rate {p.pool_r})"
        )
    f0 = T.leaky_relu(T.conv2d(o, p.head), LEAK)
    feats = [f0]
    for unit in p.units:
        dense = feats[0] if len(feats) == 1 else T.concat_channels(feats)
        feats.append(joint_unit_forward(dense, unit, ablation, training))
    r_hat = T.conv2d(T.leaky_relu(feats[-1], LEAK), p.tail)
    b_hat = T.sub(o, r_hat)
    return b_hat, r_hat
