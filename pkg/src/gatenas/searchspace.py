"""Candidate grid, macro architecture and the gated supernet.

The backbone has 16 searchable layers; each layer picks any non-empty
subset of 19 candidates (18 ghost-bottleneck configurations plus a skip),
and one of 4 fusion variants merges the stage taps. A layer's output is
the gate-weighted sum of its candidate outputs, so one-hot gates reproduce
the corresponding single-path network exactly.
"""

from dataclasses import dataclass

import numpy as np

from . import nnops, tensor as T
from .nnops import FUSION_VARIANTS
from .tensor import Tensor

KERNEL_SIZES = (3, 5, 7)
EXPANSION_RATES = (1, 3, 6)
GHOST_KERNELS = (3, 5)
NUM_CANDIDATES = 19

# Backbone plan: (stage tag, out channels, repeats, first stride). The first
# layer of each group carries the stride and channel change; repeats are
# shape-preserving. Fusion taps sit at the last layer of the S1/S2/S4/S6
# groups (quarter to 1/32 resolution).
_BACKBONE_PLAN = (
    ("S0", 16, 1, 1),
    ("S1", 24, 1, 2),
    ("S2", 40, 2, 2),
    ("S3", 80, 2, 2),
    ("S4", 112, 3, 1),
    ("S5", 192, 3, 2),
    ("S6", 320, 4, 1),
)
_TAP_STAGES = ("S1", "S2", "S4", "S6")
_STEM_CHANNELS = 32
_FUSION_CHANNELS = 64
_DESK_DIVISOR = 4


class ConfigError(ValueError):
    """Raised for invalid search-space configuration."""


@dataclass(frozen=True)
class CandidateSpec:
    """One entry of the per-layer candidate grid."""

    kind: str                  # "block" | "skip"
    index: int
    k: int = 0
    e: int = 0
    k_ghost: int = 0

    def label(self):
        if self.kind == "skip":
            return "skip"
        return f"k{self.k}e{self.e}g{self.k_ghost}"


def enumerate_candidates():
    """The 19 candidate specs: K-major, then e, then ghost kernel; skip last."""
    specs = []
    for k in KERNEL_SIZES:
        for e in EXPANSION_RATES:
            for kg in GHOST_KERNELS:
                specs.append(CandidateSpec("block", len(specs), k, e, kg))
    specs.append(CandidateSpec("skip", len(specs)))
    assert len(specs) == NUM_CANDIDATES
    return specs


@dataclass(frozen=True)
class LayerSpec:
    index: int
    c_in: int
    c_out: int
    stride: int
    stage: str


@dataclass(frozen=True)
class MacroArch:
    """Fixed skeleton the search operates in."""

    profile: str
    input_hw: tuple
    stem_channels: int
    layers: tuple                # LayerSpec per searchable layer
    fusion_tap_layers: tuple     # layer indices feeding the fusion
    fusion_channels: int
    k_kp: int

    @property
    def num_layers(self):
        return len(self.layers)

    def layer_resolutions(self):
        """(h_in, w_in, h_out, w_out) per layer, after the stride-2 stem."""
        h, w = self.input_hw[0] // 2, self.input_hw[1] // 2
        out = []
        for spec in self.layers:
            ho, wo = h // spec.stride, w // spec.stride
            out.append((h, w, ho, wo))
            h, w = ho, wo
        return out

    def fusion_hw(self):
        return (self.input_hw[0] // 4, self.input_hw[1] // 4)

    def tap_channels(self):
        return tuple(self.layers[i].c_out for i in self.fusion_tap_layers)


def _scaled(c, profile):
    if profile == "paper":
        return c
    return max(4, c // _DESK_DIVISOR)


def build_macro(profile, input_hw, k_kp):
    """Instantiate the backbone plan at the paper or desk ("/4") scale."""
    if profile not in ("paper", "desk"):
        raise ConfigError(f"unknown profile {profile!r}")
    if isinstance(input_hw, int):
        input_hw = (input_hw, input_hw)
    h, w = input_hw
    if h % 32 or w % 32:
        raise ConfigError(f"input size {h}x{w} must be divisible by 32")
    if k_kp < 1:
        raise ConfigError("k_kp must be >= 1")

    layers = []
    taps = {}
    c_in = _scaled(_STEM_CHANNELS, profile)
    for stage, c_out, repeats, stride in _BACKBONE_PLAN:
        c_out = _scaled(c_out, profile)
        for r in range(repeats):
            layers.append(LayerSpec(index=len(layers), c_in=c_in, c_out=c_out,
                                    stride=stride if r == 0 else 1, stage=stage))
            c_in = c_out
        taps[stage] = len(layers) - 1
    return MacroArch(
        profile=profile,
        input_hw=(h, w),
        stem_channels=_scaled(_STEM_CHANNELS, profile),
        layers=tuple(layers),
        fusion_tap_layers=tuple(taps[s] for s in _TAP_STAGES),
        fusion_channels=_scaled(_FUSION_CHANNELS, profile),
        k_kp=k_kp,
    )


def build_custom_macro(input_hw, k_kp, stem_channels, plan, tap_layers,
                       fusion_channels, profile="custom"):
    """Small hand-rolled skeletons for tests and demos.

    plan is a sequence of (c_out, stride) pairs; tap_layers may repeat
    indices when there are fewer layers than taps.
    """
    if isinstance(input_hw, int):
        input_hw = (input_hw, input_hw)
    layers = []
    c_in = stem_channels
    for c_out, stride in plan:
        layers.append(LayerSpec(index=len(layers), c_in=c_in, c_out=c_out,
                                stride=stride, stage=f"S{len(layers)}"))
        c_in = c_out
    return MacroArch(profile=profile, input_hw=tuple(input_hw),
                     stem_channels=stem_channels, layers=tuple(layers),
                     fusion_tap_layers=tuple(tap_layers),
                     fusion_channels=fusion_channels, k_kp=k_kp)


@dataclass
class SupernetLayer:
    spec: LayerSpec
    candidate_indices: tuple     # indices into the 19-wide grid
    modules: list                # CandidateBlock | SkipPath, aligned


@dataclass
class Supernet:
    """All instantiated candidates plus fusion variants and stem/head.

    Gate values are supplied per forward call rather than stored here, so
    alternative weighting strategies reuse the identical network.
    """

    macro: MacroArch
    stem: nnops.Stem
    layers: list
    fusions: list
    head: nnops.Head

    def parameters(self):
        """Ordered (name, Tensor) pairs over every trainable weight."""
        out = list(nnops.iter_params(self.stem, "stem"))
        for layer in self.layers:
            for idx, mod in zip(layer.candidate_indices, layer.modules):
                out.extend(nnops.iter_params(mod, f"layer{layer.spec.index:02d}/cand{idx:02d}"))
        for k, fmod in enumerate(self.fusions):
            out.extend(nnops.iter_params(fmod, f"fusion{k}_{fmod.variant}"))
        out.extend(nnops.iter_params(self.head, "head"))
        return out

    def bn_states(self):
        out = list(nnops.iter_bn_states(self.stem, "stem"))
        for layer in self.layers:
            for idx, mod in zip(layer.candidate_indices, layer.modules):
                out.extend(nnops.iter_bn_states(mod, f"layer{layer.spec.index:02d}/cand{idx:02d}"))
        for k, fmod in enumerate(self.fusions):
            out.extend(nnops.iter_bn_states(fmod, f"fusion{k}_{fmod.variant}"))
        return out


def _build_candidate(rng, spec, layer):
    if spec.kind == "skip":
        return nnops.SkipPath.build(rng, layer.c_in, layer.c_out, layer.stride)
    return nnops.CandidateBlock.build(rng, layer.c_in, layer.c_out, layer.stride,
                                      spec.k, spec.e, spec.k_ghost)


def build_supernet(macro, seed, layer_subsets=None, fusion_subset=None):
    """Instantiate candidates with seeded Kaiming-uniform weights.

    layer_subsets restricts each layer to the given candidate indices
    (defaults to all 19); fusion_subset likewise (defaults to all 4).
    The same seed always produces bit-identical weights.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    grid = enumerate_candidates()
    if layer_subsets is None:
        layer_subsets = [list(range(len(grid)))] * macro.num_layers
    if len(layer_subsets) != macro.num_layers:
        raise ConfigError(f"need {macro.num_layers} layer subsets, got {len(layer_subsets)}")
    if fusion_subset is None:
        fusion_subset = list(range(len(FUSION_VARIANTS)))

    stem = nnops.Stem.build(rng, macro.stem_channels)
    layers = []
    for spec, subset in zip(macro.layers, layer_subsets):
        subset = sorted(set(subset))
        if not subset:
            raise ConfigError(f"layer {spec.index} has an empty candidate subset")
        if subset[0] < 0 or subset[-1] >= len(grid):
            raise ConfigError(f"layer {spec.index} candidate index outside 0..{len(grid) - 1}")
        mods = [_build_candidate(rng, grid[i], spec) for i in subset]
        layers.append(SupernetLayer(spec=spec, candidate_indices=tuple(subset), modules=mods))

    tap_ch = [macro.layers[i].c_out for i in macro.fusion_tap_layers]
    fusions = [nnops.FusionModule.build(rng, FUSION_VARIANTS[k], tap_ch,
                                        macro.fusion_channels, macro.fusion_hw())
               for k in sorted(set(fusion_subset))]
    head = nnops.Head.build(rng, macro.fusion_channels, macro.k_kp)
    return Supernet(macro=macro, stem=stem, layers=layers, fusions=fusions, head=head)


def supernet_forward(net, x, gates, fusion_weights, mode="train",
                     return_features=False):
    """Gated forward pass: stem -> weighted candidate sums -> fusion mix -> head.

    gates is one row per layer (floats or scalar Tensors, aligned with the
    layer's candidate subset); fusion_weights has one entry per fusion
    variant, nonnegative and summing to at most 1. Candidates with a float
    gate of exactly 0 are skipped, so one-hot gates run (and match) the
    derived single-path network.
    """
    macro = net.macro
    if len(gates) != len(net.layers):
        raise T.UsageError(f"need {len(net.layers)} gate rows, got {len(gates)}")
    if len(fusion_weights) != len(net.fusions):
        raise T.UsageError(f"need {len(net.fusions)} fusion weights, "
                           f"got {len(fusion_weights)}")
    fvals = [w.item() if isinstance(w, Tensor) else float(w) for w in fusion_weights]
    if min(fvals) < 0.0 or sum(fvals) > 1.0 + 1e-9:
        raise T.UsageError(f"fusion weights must be >= 0 and sum <= 1, got {fvals}")

    h = net.stem.forward(x, mode)
    features = []
    res = macro.layer_resolutions()
    for layer, row in zip(net.layers, gates):
        if len(row) != len(layer.modules):
            raise T.UsageError(f"layer {layer.spec.index} expects {len(layer.modules)} "
                               f"gates, got {len(row)}")
        _, _, ho, wo = res[layer.spec.index]
        h = nnops.forward_layer(layer.modules, row, h, mode,
                                (x.shape[0], layer.spec.c_out, ho, wo))
        features.append(h)

    taps = [features[i] for i in macro.fusion_tap_layers]
    parts = []
    part_gates = []
    for fmod, gv in zip(net.fusions, fusion_weights):
        if not isinstance(gv, Tensor) and float(gv) == 0.0:
            continue
        parts.append(fmod.forward(taps, mode))
        part_gates.append(gv)
    if not parts:
        fh, fw = macro.fusion_hw()
        fused = T.zeros((x.shape[0], macro.fusion_channels, fh, fw))
    elif len(parts) == 1 and not isinstance(part_gates[0], Tensor) \
            and float(part_gates[0]) == 1.0:
        fused = parts[0]
    else:
        fused = T.gated_sum(parts, part_gates)
    out = net.head.forward(fused, mode)
    if return_features:
        return out, features
    return out


def unit_gates(net):
    """All-ones float gate rows matching the net's candidate subsets."""
    return [[1.0] * len(layer.modules) for layer in net.layers]


def space_cardinality(num_layers, num_candidates, num_fusion):
    """Exact count of architectures: fusion choices x non-empty subsets per layer."""
    if min(num_layers, num_candidates, num_fusion) < 1:
        raise ConfigError("cardinality arguments must be >= 1")
    return num_fusion * (2 ** num_candidates - 1) ** num_layers
