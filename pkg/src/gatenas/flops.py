"""Analytic FLOPs model, expected-cost aggregate and budget penalty.

Counting convention, used consistently by the analytic model and the
instrumented oracle: one multiply-accumulate inside a convolution kernel
counts as 2 FLOPs; batch norm, activations, pooling and elementwise ops
are free. All table entries are exact integers. The budget penalty
operates in units of 1e9 FLOPs regardless of network scale.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import gating, nnops, searchspace, tensor as T

GIGA = 1e9


@dataclass(frozen=True)
class FlopsTable:
    """Per-(layer, candidate) and per-fusion-variant costs for one macro."""

    backbone: tuple        # num_layers rows of 19 ints
    fusion: tuple          # 4 ints, order = nnops.FUSION_VARIANTS
    stem_head: int
    input_hw: tuple

    def backbone_array(self):
        return np.array(self.backbone, dtype=np.float64)


@dataclass(frozen=True)
class Budget:
    """FLOPs target in the same raw unit as the table."""

    budget_flops: float

    def __post_init__(self):
        if self.budget_flops <= 0:
            raise gating.ConfigError("budget must be > 0")


def conv_flops(c_in, c_out, k, h_out, w_out, groups=1):
    """2 * Hout * Wout * Cout * K^2 * Cin/groups, bias-free."""
    return 2 * h_out * w_out * c_out * k * k * (c_in // groups)


def _ghost_flops(c_in, c_out, k_ghost, h, w):
    # arithmetic intentionally re-derived here, independent of nnops
    m = math.ceil(c_out / 2)
    cheap = c_out - m
    total = conv_flops(c_in, m, 1, h, w)
    total += conv_flops(cheap, cheap, k_ghost, h, w, groups=max(cheap, 1))
    return total


def _se_flops(channels):
    c_r = max(1, round(channels / nnops.SE_REDUCTION))
    return conv_flops(channels, c_r, 1, 1, 1) + conv_flops(c_r, channels, 1, 1, 1)


def block_flops(spec, layer, resolution):
    """Cost of one candidate at a layer whose input map is resolution (h, w)."""
    h, w = resolution
    h_out, w_out = h // layer.stride, w // layer.stride
    if spec.kind == "skip":
        if layer.stride == 1 and layer.c_in == layer.c_out:
            return 0
        return conv_flops(layer.c_in, layer.c_out, 1, h_out, w_out)
    c_mid = spec.e * layer.c_in
    total = _ghost_flops(layer.c_in, c_mid, spec.k_ghost, h, w)
    total += conv_flops(c_mid, c_mid, spec.k, h_out, w_out, groups=c_mid)
    total += _se_flops(c_mid)
    total += _ghost_flops(c_mid, layer.c_out, spec.k_ghost, h_out, w_out)
    return total


def fusion_flops(variant, macro, resolution=None):
    """Projection convs at tap resolutions plus the variant-specific stage."""
    if resolution is None:
        resolution = macro.input_hw
    h, w = resolution
    if h < 1 or w < 1:
        raise gating.ConfigError(f"resolution must be positive, got {resolution}")
    fc = macro.fusion_channels
    fh, fw = h // 4, w // 4
    out_reso = {}
    cur_h, cur_w = h // 2, w // 2
    for spec in macro.layers:
        cur_h, cur_w = cur_h // spec.stride, cur_w // spec.stride
        out_reso[spec.index] = (cur_h, cur_w)
    total = 0
    for tap in macro.fusion_tap_layers:
        th, tw = out_reso[tap]
        total += conv_flops(macro.layers[tap].c_out, fc, 1, th, tw)
    if variant == "simple":
        pass
    elif variant == "dilated":
        total += conv_flops(fc, fc, 3, fh, fw)
    elif variant == "se":
        total += _se_flops(fc)
    elif variant == "attention":
        total += conv_flops(2, 1, nnops.ATTENTION_MASK_KERNEL, fh, fw)
    else:
        raise T.UsageError(f"unknown fusion variant {variant!r}")
    return total


def stem_head_flops(macro, resolution=None):
    if resolution is None:
        resolution = macro.input_hw
    h, w = resolution
    sh, sw = h // 2, w // 2
    fh, fw = h // 4, w // 4
    total = conv_flops(3, macro.stem_channels, 3, sh, sw)
    fc = macro.fusion_channels
    total += conv_flops(fc, fc, 3, fh, fw, groups=fc)   # head depthwise
    total += conv_flops(fc, macro.k_kp, 1, fh, fw)      # head pointwise
    return total


def build_flops_table(macro, resolution=None):
    if resolution is None:
        resolution = macro.input_hw
    grid = searchspace.enumerate_candidates()
    rows = []
    res = _layer_input_resolutions(macro, resolution)
    for spec in macro.layers:
        rows.append(tuple(block_flops(c, spec, res[spec.index]) for c in grid))
    fus = tuple(fusion_flops(v, macro, resolution) for v in nnops.FUSION_VARIANTS)
    return FlopsTable(backbone=tuple(rows), fusion=fus,
                      stem_head=stem_head_flops(macro, resolution),
                      input_hw=tuple(resolution))


def _layer_input_resolutions(macro, resolution):
    h, w = resolution[0] // 2, resolution[1] // 2
    out = {}
    for spec in macro.layers:
        out[spec.index] = (h, w)
        h, w = h // spec.stride, w // spec.stride
    return out


def total_expected_flops(table, gates, fusion_weights):
    """Eq.-style aggregate: gate-weighted candidate costs + fusion mix + fixed."""
    gates = np.asarray(gates, dtype=np.float64)
    back = table.backbone_array()
    if gates.shape != back.shape:
        raise T.UsageError(f"gate matrix {gates.shape} does not match "
                           f"table {back.shape}")
    fw = np.asarray(fusion_weights, dtype=np.float64)
    if fw.shape != (len(table.fusion),):
        raise T.UsageError(f"need {len(table.fusion)} fusion weights, got {fw.shape}")
    return float((gates * back).sum()
                 + float(np.dot(fw, np.asarray(table.fusion, dtype=np.float64)))
                 + table.stem_head)


def all_on_expected_flops(table):
    """Cost with every gate at 1 and an undecided (uniform) fusion mix."""
    ones = np.ones_like(table.backbone_array())
    uniform = np.full(len(table.fusion), 1.0 / len(table.fusion))
    return total_expected_flops(table, ones, uniform)


def budget_penalty(total, budget, lambda_t):
    """lambda * ReLU(total - budget), both converted to units of 1e9 FLOPs."""
    if lambda_t < 0:
        raise gating.ConfigError(f"lambda must be >= 0, got {lambda_t}")
    b = budget.budget_flops if isinstance(budget, Budget) else budget
    return lambda_t * max(0.0, (total - b) / GIGA)


def lambda_schedule(state, t):
    """Linear ramp lam_start -> lam_end over the run."""
    if not 0 <= t <= state.total_steps:
        raise gating.ConfigError(f"step {t} outside schedule 0..{state.total_steps}")
    frac = t / state.total_steps
    return state.lam_start + (state.lam_end - state.lam_start) * frac


def instrumented_count(forward_fn, x):
    """Count 2x the multiplies a forward actually executes inside convs.

    Independent oracle for the analytic model: the count comes from the
    realized array shapes at run time, not from layer specs. The input must
    be a single sample (N == 1) so the count matches per-inference cost.
    """
    if x.shape[0] != 1:
        raise T.UsageError(f"instrumented_count needs batch size 1, got {x.shape[0]}")
    with T.count_conv_flops() as counter:
        forward_fn(x)
    return counter.count


def candidate_counter(spec, layer, seed=0):
    """Build the candidate and return a forward closure for instrumentation."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    if spec.kind == "skip":
        mod = nnops.SkipPath.build(rng, layer.c_in, layer.c_out, layer.stride)
    else:
        mod = nnops.CandidateBlock.build(rng, layer.c_in, layer.c_out,
                                         layer.stride, spec.k, spec.e, spec.k_ghost)
    return lambda x: mod.forward(x, "eval")
