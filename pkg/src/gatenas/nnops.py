"""Neural operators of the search space.

Candidate bottleneck: ghost expansion (pointwise + cheap depthwise, ratio 2)
-> depthwise KxK (carries the stride) -> squeeze-excitation -> ghost
projection, residual when shape-preserving. Four fusion variants merge the
multi-scale taps at the quarter-resolution grid. All convs are bias-free;
affine freedom lives in the batch norms.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, BatchNormState

SE_REDUCTION = 4          # on the expanded channel count
ATTENTION_MASK_KERNEL = 7


def se_reduced_channels(channels, reduction=SE_REDUCTION):
    return max(1, round(channels / reduction))


def ghost_split(c_out):
    """(primary, cheap) channel split of a ratio-2 ghost module."""
    m = math.ceil(c_out / 2)
    return m, c_out - m


def kaiming_uniform(rng, shape):
    """He-uniform fan-in init for a conv weight (c_out, c_in/g, kh, kw)."""
    fan_in = shape[1] * shape[2] * shape[3]
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


@dataclass
class ConvBN:
    """Conv weight with its batch norm site."""

    w: Tensor
    gamma: Tensor
    beta: Tensor
    state: BatchNormState
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    @classmethod
    def build(cls, rng, c_in, c_out, k, stride=1, dilation=1, groups=1):
        pad = dilation * (k - 1) // 2
        w = kaiming_uniform(rng, (c_out, c_in // groups, k, k))
        return cls(w=w,
                   gamma=Tensor(np.ones((1, c_out, 1, 1))),
                   beta=Tensor(np.zeros((1, c_out, 1, 1))),
                   state=BatchNormState(c_out),
                   stride=stride, padding=pad, dilation=dilation, groups=groups)

    def forward(self, x, mode):
        y = T.conv2d(x, self.w, stride=self.stride, padding=self.padding,
                     dilation=self.dilation, groups=self.groups)
        return T.batchnorm2d(y, self.gamma, self.beta, self.state, mode)


@dataclass
class GhostModule:
    """Ratio-2 ghost expansion: pointwise primary + cheap depthwise ghost.

    The cheap branch reads the activated primary output; activation is SiLU
    for expansion modules and identity for projection modules.
    """

    primary: ConvBN
    cheap: ConvBN
    activated: bool
    c_in: int
    c_out: int

    @classmethod
    def build(cls, rng, c_in, c_out, k_ghost, activated):
        m, cheap_c = ghost_split(c_out)
        primary = ConvBN.build(rng, c_in, m, 1)
        cheap = ConvBN.build(rng, cheap_c, cheap_c, k_ghost, groups=cheap_c)
        return cls(primary=primary, cheap=cheap, activated=activated,
                   c_in=c_in, c_out=c_out)

    def forward(self, x, mode):
        if x.shape[1] != self.c_in:
            raise T.ShapeError(f"ghost module expects {self.c_in} channels, got {x.shape[1]}")
        prim = self.primary.forward(x, mode)
        if self.activated:
            prim = T.silu(prim)
        cheap_c = self.c_out - prim.shape[1]
        cheap_in = T.slice_channels(prim, 0, cheap_c)
        cheap = self.cheap.forward(cheap_in, mode)
        if self.activated:
            cheap = T.silu(cheap)
        return T.concat_channels([prim, cheap])


@dataclass
class SEModule:
    """Squeeze-excitation: GAP -> 1x1 reduce + SiLU -> 1x1 expand + sigmoid scale."""

    reduce_w: Tensor
    expand_w: Tensor

    @classmethod
    def build(cls, rng, channels, reduction=SE_REDUCTION):
        c_r = se_reduced_channels(channels, reduction)
        return cls(reduce_w=kaiming_uniform(rng, (c_r, channels, 1, 1)),
                   expand_w=kaiming_uniform(rng, (channels, c_r, 1, 1)))

    def forward(self, x, mode):
        if x.shape[1] != self.expand_w.shape[0]:
            raise T.ShapeError(f"SE expects {self.expand_w.shape[0]} channels, got {x.shape[1]}")
        s = T.global_avg_pool(x)
        s = T.silu(T.conv2d(s, self.reduce_w))
        s = T.sigmoid(T.conv2d(s, self.expand_w))
        return T.mul(x, s)


@dataclass
class CandidateBlock:
    """One searchable ghost-bottleneck candidate."""

    ghost_expand: GhostModule
    dw: ConvBN
    se: SEModule
    ghost_project: GhostModule
    stride: int
    residual: bool

    @classmethod
    def build(cls, rng, c_in, c_out, stride, k, e, k_ghost):
        c_mid = e * c_in
        return cls(
            ghost_expand=GhostModule.build(rng, c_in, c_mid, k_ghost, activated=True),
            dw=ConvBN.build(rng, c_mid, c_mid, k, stride=stride, groups=c_mid),
            se=SEModule.build(rng, c_mid),
            ghost_project=GhostModule.build(rng, c_mid, c_out, k_ghost, activated=False),
            stride=stride,
            residual=(stride == 1 and c_in == c_out),
        )

    def forward(self, x, mode):
        h = self.ghost_expand.forward(x, mode)
        h = T.silu(self.dw.forward(h, mode))
        h = self.se.forward(h, mode)
        y = self.ghost_project.forward(h, mode)
        if self.residual:
            y = T.add(y, x)
        return y


@dataclass
class SkipPath:
    """Skip candidate: identity when shape-preserving, else strided 1x1 + BN."""

    proj: ConvBN | None

    @classmethod
    def build(cls, rng, c_in, c_out, stride):
        if stride == 1 and c_in == c_out:
            return cls(proj=None)
        return cls(proj=ConvBN.build(rng, c_in, c_out, 1, stride=stride))

    def forward(self, x, mode):
        if self.proj is None:
            return x
        return self.proj.forward(x, mode)


@dataclass
class FusionModule:
    """One fusion variant over the four stage taps.

    Every variant projects each tap to the fusion width (1x1 + BN + SiLU),
    resizes bilinearly to the quarter-resolution grid and sums; the variant
    then refines the merged map.
    """

    variant: str
    projections: list
    out_hw: tuple
    dilated: ConvBN | None = None
    se: SEModule | None = None
    mask_w: Tensor | None = None

    @classmethod
    def build(cls, rng, variant, tap_channels, fusion_channels, out_hw):
        projections = [ConvBN.build(rng, c, fusion_channels, 1) for c in tap_channels]
        mod = cls(variant=variant, projections=projections, out_hw=out_hw)
        if variant == "dilated":
            mod.dilated = ConvBN.build(rng, fusion_channels, fusion_channels, 3, dilation=2)
        elif variant == "se":
            mod.se = SEModule.build(rng, fusion_channels)
        elif variant == "attention":
            k = ATTENTION_MASK_KERNEL
            mod.mask_w = kaiming_uniform(rng, (1, 2, k, k))
        elif variant != "simple":
            raise T.UsageError(f"unknown fusion variant {variant!r}")
        return mod

    def forward(self, features, mode):
        if len(features) != len(self.projections):
            raise T.ShapeError(f"fusion expects {len(self.projections)} taps, "
                               f"got {len(features)}")
        merged = None
        for feat, proj in zip(features, self.projections):
            t = T.silu(proj.forward(feat, mode))
            t = T.resize_bilinear(t, *self.out_hw)
            merged = t if merged is None else T.add(merged, t)
        if self.variant == "simple":
            return merged
        if self.variant == "dilated":
            return T.silu(self.dilated.forward(merged, mode))
        if self.variant == "se":
            return self.se.forward(merged, mode)
        # attention: spatial mask from pooled channel statistics
        stats = T.concat_channels([T.reduce(merged, "mean", "channel"),
                                   T.channel_max(merged)])
        pad = (ATTENTION_MASK_KERNEL - 1) // 2
        mask = T.sigmoid(T.conv2d(stats, self.mask_w, padding=pad))
        return T.mul(merged, mask)


FUSION_VARIANTS = ("simple", "dilated", "se", "attention")


# ---------------------------------------------------------------------------
# Fused layer evaluation
#
# All candidates of a layer read the same input, and batch norm, SiLU and
# depthwise convolution act per channel, so the candidates' ghost/dw stages
# can run on one concatenated array without changing any per-channel math.
# This exists purely to cut dispatch overhead; block_forward stays the
# reference single-candidate path.

def _fused_bn(x, convbns, mode):
    if len(convbns) == 1:
        cb = convbns[0]
        return T.batchnorm2d(x, cb.gamma, cb.beta, cb.state, mode)
    gamma = T.concat_channels([cb.gamma for cb in convbns])
    beta = T.concat_channels([cb.beta for cb in convbns])
    slices = []
    off = 0
    for cb in convbns:
        c = cb.gamma.shape[1]
        slices.append((off, off + c, cb.state))
        off += c
    return T.batchnorm2d(x, gamma, beta, slices, mode)


def _group_by(items, key):
    groups = {}
    for i, item in enumerate(items):
        groups.setdefault(key(item), []).append(i)
    return groups


def forward_blocks_fused(blocks, x, mode):
    """Evaluate several CandidateBlocks on one input jointly.

    Returns per-block outputs excluding the residual term (the caller owns
    residual/gate algebra). Identical math to block_forward per block.
    """
    nb = len(blocks)
    # ghost expansion: one pointwise conv over all blocks
    prim_w = T.concat_rows([b.ghost_expand.primary.w for b in blocks])
    prim = T.conv2d(x, prim_w)
    prim = _fused_bn(prim, [b.ghost_expand.primary for b in blocks], mode)
    prim = T.silu(prim)
    m = [b.ghost_expand.primary.w.shape[0] for b in blocks]
    cheap_c = [b.ghost_expand.c_out - mi for b, mi in zip(blocks, m)]
    mid_c = [b.ghost_expand.c_out for b in blocks]
    prim_off = _offsets(m)

    # cheap ghost branch, grouped by ghost kernel
    cheap_pos = {}
    cheap_arr = {}
    for kg, idxs in _group_by(blocks, lambda b: b.ghost_expand.cheap.w.shape[2]).items():
        gin = T.gather_pieces([(prim, prim_off[i], prim_off[i] + cheap_c[i])
                               for i in idxs])
        w = T.concat_rows([blocks[i].ghost_expand.cheap.w for i in idxs])
        y = T.conv2d(gin, w, padding=(kg - 1) // 2, groups=gin.shape[1])
        y = _fused_bn(y, [blocks[i].ghost_expand.cheap for i in idxs], mode)
        y = T.silu(y)
        cheap_arr[kg] = y
        off = 0
        for i in idxs:
            cheap_pos[i] = (kg, off)
            off += cheap_c[i]

    # main depthwise + SE, grouped by kernel size
    dw_groups = _group_by(blocks, lambda b: b.dw.w.shape[2])
    se_out = {}
    for k, idxs in dw_groups.items():
        pieces = []
        for i in idxs:
            pieces.append((prim, prim_off[i], prim_off[i] + m[i]))
            kg, off = cheap_pos[i]
            pieces.append((cheap_arr[kg], off, off + cheap_c[i]))
        gin = T.gather_pieces(pieces)
        w = T.concat_rows([blocks[i].dw.w for i in idxs])
        y = T.conv2d(gin, w, stride=blocks[idxs[0]].stride,
                     padding=(k - 1) // 2, groups=gin.shape[1])
        y = _fused_bn(y, [blocks[i].dw for i in idxs], mode)
        y = T.silu(y)
        gap = T.global_avg_pool(y)
        scales = []
        off = 0
        for i in idxs:
            se = blocks[i].se
            s = T.slice_channels(gap, off, off + mid_c[i])
            s = T.silu(T.conv2d(s, se.reduce_w))
            s = T.sigmoid(T.conv2d(s, se.expand_w))
            scales.append(s)
            off += mid_c[i]
        scale = scales[0] if len(scales) == 1 else T.concat_channels(scales)
        y = T.mul(y, scale)
        off = 0
        for i in idxs:
            se_out[i] = (y, off, off + mid_c[i])
            off += mid_c[i]

    # ghost projection: per-block pointwise convs, fused norm, grouped cheap
    pm = [b.ghost_project.primary.w.shape[0] for b in blocks]
    pcheap_c = [b.ghost_project.c_out - pmi for b, pmi in zip(blocks, pm)]
    pp_parts = []
    for i, b in enumerate(blocks):
        src, a, bnd = se_out[i]
        h = T.slice_channels(src, a, bnd)
        pp_parts.append(T.conv2d(h, b.ghost_project.primary.w))
    pp = pp_parts[0] if nb == 1 else T.concat_channels(pp_parts)
    pp = _fused_bn(pp, [b.ghost_project.primary for b in blocks], mode)
    pp_off = _offsets(pm)

    pcheap_pos = {}
    pcheap_arr = {}
    for kg, idxs in _group_by(blocks, lambda b: b.ghost_project.cheap.w.shape[2]).items():
        gin = T.gather_pieces([(pp, pp_off[i], pp_off[i] + pcheap_c[i])
                               for i in idxs])
        w = T.concat_rows([blocks[i].ghost_project.cheap.w for i in idxs])
        y = T.conv2d(gin, w, padding=(kg - 1) // 2, groups=gin.shape[1])
        y = _fused_bn(y, [blocks[i].ghost_project.cheap for i in idxs], mode)
        pcheap_arr[kg] = y
        off = 0
        for i in idxs:
            pcheap_pos[i] = (kg, off)
            off += pcheap_c[i]

    outs = []
    for i in range(nb):
        kg, off = pcheap_pos[i]
        outs.append(T.gather_pieces([(pp, pp_off[i], pp_off[i] + pm[i]),
                                     (pcheap_arr[kg], off, off + pcheap_c[i])]))
    return outs


def _offsets(sizes):
    out = [0]
    for s in sizes:
        out.append(out[-1] + s)
    return out


def _add_gates(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a = a if isinstance(a, Tensor) else Tensor(np.full((1, 1, 1, 1), float(a)))
        b = b if isinstance(b, Tensor) else Tensor(np.full((1, 1, 1, 1), float(b)))
        return T.add(a, b)
    return float(a) + float(b)


def forward_layer(modules, gates, x, mode, out_shape):
    """Gate-weighted candidate sum for one layer (fused evaluation).

    Identity contributions (shape-preserving skip, block residuals) are
    folded into a single x term whose gate is the sum of the contributing
    gates. Float gates of exactly 0 skip their candidate entirely.
    """
    active = [(mod, gv) for mod, gv in zip(modules, gates)
              if isinstance(gv, Tensor) or float(gv) != 0.0]
    if not active:
        return T.zeros(out_shape)
    parts = []
    part_gates = []
    x_gate = None
    block_items = []
    for mod, gv in active:
        if isinstance(mod, SkipPath):
            if mod.proj is None:
                x_gate = gv if x_gate is None else _add_gates(x_gate, gv)
            else:
                parts.append(mod.forward(x, mode))
                part_gates.append(gv)
        else:
            block_items.append((mod, gv))
    if block_items:
        outs = forward_blocks_fused([mod for mod, _ in block_items], x, mode)
        for (mod, gv), y in zip(block_items, outs):
            parts.append(y)
            part_gates.append(gv)
            if mod.residual:
                x_gate = gv if x_gate is None else _add_gates(x_gate, gv)
    if x_gate is not None:
        parts.append(x)
        part_gates.append(x_gate)
    if len(parts) == 1 and not isinstance(part_gates[0], Tensor) \
            and float(part_gates[0]) == 1.0:
        return parts[0]
    return T.gated_sum(parts, part_gates)


@dataclass
class Stem:
    """Fixed 3x3 stride-2 conv + BN + SiLU."""

    conv: ConvBN

    @classmethod
    def build(cls, rng, c_out):
        return cls(conv=ConvBN.build(rng, 3, c_out, 3, stride=2))

    def forward(self, x, mode):
        if x.shape[1] != 3:
            raise T.ShapeError(f"stem expects 3 input channels, got {x.shape[1]}")
        return T.silu(self.conv.forward(x, mode))


@dataclass
class Head:
    """Depthwise-separable heatmap head, linear output."""

    dw_w: Tensor
    pw_w: Tensor

    @classmethod
    def build(cls, rng, c_in, k_kp):
        return cls(dw_w=kaiming_uniform(rng, (c_in, 1, 3, 3)),
                   pw_w=kaiming_uniform(rng, (k_kp, c_in, 1, 1)))

    def forward(self, x, mode):
        c = self.dw_w.shape[0]
        if x.shape[1] != c:
            raise T.ShapeError(f"head expects {c} channels, got {x.shape[1]}")
        h = T.conv2d(x, self.dw_w, padding=1, groups=c)
        return T.conv2d(h, self.pw_w)


def iter_params(obj, prefix):
    """Yield (name, Tensor) pairs of all trainable weights, depth-first.

    The traversal order is the dataclass field order, which fixes the
    serialization and optimizer-state layout.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, ConvBN):
        yield from iter_params(obj.w, prefix + "/w")
        yield from iter_params(obj.gamma, prefix + "/gamma")
        yield from iter_params(obj.beta, prefix + "/beta")
    elif isinstance(obj, GhostModule):
        yield from iter_params(obj.primary, prefix + "/primary")
        yield from iter_params(obj.cheap, prefix + "/cheap")
    elif isinstance(obj, SEModule):
        yield prefix + "/reduce_w", obj.reduce_w
        yield prefix + "/expand_w", obj.expand_w
    elif isinstance(obj, CandidateBlock):
        yield from iter_params(obj.ghost_expand, prefix + "/expand")
        yield from iter_params(obj.dw, prefix + "/dw")
        yield from iter_params(obj.se, prefix + "/se")
        yield from iter_params(obj.ghost_project, prefix + "/project")
    elif isinstance(obj, SkipPath):
        if obj.proj is not None:
            yield from iter_params(obj.proj, prefix + "/proj")
    elif isinstance(obj, FusionModule):
        for i, p in enumerate(obj.projections):
            yield from iter_params(p, f"{prefix}/proj{i}")
        if obj.dilated is not None:
            yield from iter_params(obj.dilated, prefix + "/dilated")
        if obj.se is not None:
            yield from iter_params(obj.se, prefix + "/se")
        if obj.mask_w is not None:
            yield prefix + "/mask_w", obj.mask_w
    elif isinstance(obj, Stem):
        yield from iter_params(obj.conv, prefix + "/conv")
    elif isinstance(obj, Head):
        yield prefix + "/dw_w", obj.dw_w
        yield prefix + "/pw_w", obj.pw_w
    else:
        raise TypeError(f"cannot iterate params of {type(obj).__name__}")


def iter_bn_states(obj, prefix):
    """Yield (name, BatchNormState) pairs in the same order as iter_params."""
    if isinstance(obj, ConvBN):
        yield prefix + "/bn", obj.state
    elif isinstance(obj, GhostModule):
        yield from iter_bn_states(obj.primary, prefix + "/primary")
        yield from iter_bn_states(obj.cheap, prefix + "/cheap")
    elif isinstance(obj, CandidateBlock):
        yield from iter_bn_states(obj.ghost_expand, prefix + "/expand")
        yield from iter_bn_states(obj.dw, prefix + "/dw")
        yield from iter_bn_states(obj.ghost_project, prefix + "/project")
    elif isinstance(obj, SkipPath):
        if obj.proj is not None:
            yield from iter_bn_states(obj.proj, prefix + "/proj")
    elif isinstance(obj, FusionModule):
        for i, p in enumerate(obj.projections):
            yield from iter_bn_states(p, f"{prefix}/proj{i}")
        if obj.dilated is not None:
            yield from iter_bn_states(obj.dilated, prefix + "/dilated")
    elif isinstance(obj, Stem):
        yield from iter_bn_states(obj.conv, prefix + "/conv")
    elif isinstance(obj, (Tensor, SEModule, Head)):
        return
    else:
        raise TypeError(f"cannot iterate bn states of {type(obj).__name__}")
