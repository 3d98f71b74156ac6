"""Discretization of trained gates into architecture genomes.

A genome is the extracted architecture: one non-empty candidate subset per
layer plus a single fusion choice. Genomes serialize to canonical JSON,
cost exactly against the FLOPs table, and can be sampled at random under a
budget as a search baseline.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import gating

GENOME_VERSION = 1
NUM_FUSION = 4


class GenomeError(ValueError):
    """Raised for malformed or infeasible genomes."""


@dataclass
class ArchGenome:
    layers: list               # per layer: sorted list of candidate indices
    fusion: int
    profile: str
    input_hw: int
    meta: dict = field(default_factory=dict)

    def validate(self, num_candidates=19):
        if not isinstance(self.layers, list) or not self.layers:
            raise GenomeError("genome needs a non-empty layer list")
        for l, subset in enumerate(self.layers):
            if not subset:
                raise GenomeError(f"layer {l} selection is empty")
            if len(set(subset)) != len(subset):
                raise GenomeError(f"layer {l} selection has duplicates")
            if min(subset) < 0 or max(subset) >= num_candidates:
                raise GenomeError(f"layer {l} selection outside 0..{num_candidates - 1}")
            if sorted(subset) != list(subset):
                raise GenomeError(f"layer {l} selection is not sorted")
        if not 0 <= self.fusion < NUM_FUSION:
            raise GenomeError(f"fusion choice {self.fusion} outside 0..{NUM_FUSION - 1}")
        return self

    def hash(self):
        return hashlib.sha256(export_genome(self).encode()).hexdigest()


def discretize(gates, theta=0.5, strategy="gated", profile="desk", input_hw=64,
               meta=None):
    """Threshold trained gates into a genome.

    For gate strategies a layer keeps every candidate whose gate value at
    the current sharpness clears theta, falling back to the single best
    candidate when none does; the softmax baseline keeps exactly the
    argmax. Fusion is the argmax logit. Ties break to the lowest index
    (numpy argmax convention).
    """
    if not 0 < theta < 1:
        raise gating.ConfigError(f"theta must be in (0,1), got {theta}")
    alpha = np.asarray(gates.alpha_backbone, dtype=np.float64)
    if strategy == "darts":
        layers = [[int(np.argmax(row))] for row in alpha]
    else:
        if strategy == "gated":
            values = gating.gate(alpha, gates.epsilon)
        elif strategy == "dnal":
            values = gating.dnal_gate(alpha, 100.0)  # end-of-ramp sigmoid scale
        else:
            raise gating.ConfigError(f"unknown strategy {strategy!r}")
        layers = []
        for row in values:
            kept = [int(i) for i in np.flatnonzero(row >= theta)]
            if not kept:
                kept = [int(np.argmax(row))]
            layers.append(kept)
    fusion = int(np.argmax(gates.alpha_fusion))
    genome = ArchGenome(layers=layers, fusion=fusion, profile=profile,
                        input_hw=input_hw,
                        meta=dict(meta or {}, strategy=strategy, theta=theta))
    return genome.validate()


def genome_flops_exact(genome, table):
    """Integer cost of the discrete architecture under the table."""
    genome.validate()
    if len(genome.layers) != len(table.backbone):
        raise GenomeError(f"genome has {len(genome.layers)} layers, "
                          f"table has {len(table.backbone)}")
    total = 0
    for subset, row in zip(genome.layers, table.backbone):
        for i in subset:
            total += row[i]
    total += table.fusion[genome.fusion]
    total += table.stem_head
    return total


def export_genome(genome):
    """Canonical JSON: sorted keys, explicit version field."""
    genome.validate()
    doc = {
        "version": GENOME_VERSION,
        "profile": genome.profile,
        "input_hw": genome.input_hw,
        "layers": [list(map(int, s)) for s in genome.layers],
        "fusion": int(genome.fusion),
        "meta": genome.meta,
    }
    return json.dumps(doc, sort_keys=True)


def import_genome(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenomeError(f"genome is not valid JSON at position {exc.pos}: "
                          f"{exc.msg}") from exc
    if not isinstance(doc, dict):
        raise GenomeError("genome document must be a JSON object")
    version = doc.get("version")
    if version != GENOME_VERSION:
        raise GenomeError(f"unknown genome version {version!r}")
    missing = {"profile", "input_hw", "layers", "fusion"} - set(doc)
    if missing:
        raise GenomeError(f"genome is missing fields: {sorted(missing)}")
    genome = ArchGenome(layers=[list(map(int, s)) for s in doc["layers"]],
                        fusion=int(doc["fusion"]), profile=doc["profile"],
                        input_hw=doc["input_hw"], meta=doc.get("meta", {}))
    return genome.validate()


def min_cost_genome(table, profile, input_hw):
    """Cheapest feasible genome: per-layer cheapest candidate, cheapest fusion."""
    layers = [[int(np.argmin(row))] for row in table.backbone]
    fusion = int(np.argmin(table.fusion))
    return ArchGenome(layers=layers, fusion=fusion, profile=profile,
                      input_hw=input_hw, meta={"kind": "min-cost"}).validate()


def random_genome(budget, table, profile, input_hw, seed, max_tries=10_000):
    """Uniform non-empty subsets per layer, rejection-sampled under the budget."""
    floor = genome_flops_exact(min_cost_genome(table, profile, input_hw), table)
    if budget < floor:
        raise GenomeError(f"budget {budget:.3e} below the minimal genome cost "
                          f"{floor:.3e}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [int(seed) & 0xFFFFFFFFFFFFFFFF, 0xB00])))
    n_cand = len(table.backbone[0])
    for attempt in range(max_tries):
        layers = []
        for _ in table.backbone:
            mask = int(rng.integers(1, 2 ** n_cand))  # uniform non-empty subset
            layers.append([i for i in range(n_cand) if mask >> i & 1])
        genome = ArchGenome(layers=layers, fusion=int(rng.integers(0, NUM_FUSION)),
                            profile=profile, input_hw=input_hw,
                            meta={"kind": "random", "seed": int(seed),
                                  "attempt": attempt})
        if genome_flops_exact(genome, table) <= budget:
            return genome.validate()
    raise GenomeError(f"no genome under budget {budget:.3e} in {max_tries} tries; "
                      f"minimal cost is {floor:.3e}")
