"""gatenas: desk-scale gated differentiable architecture search.

A small, numpy-only engine: a float64 autodiff tensor core, a
ghost-bottleneck/fusion search space, polarized-gate candidate selection
with an analytic FLOPs budget, and deterministic search/retrain loops on
a synthetic keypoint-heatmap task.
"""

from .tensor import (Tensor, Tape, backward, grad_check,
                     ShapeError, DomainError, UsageError)
from .gating import (GateParams, ScheduleState, ConfigError,
                     gate, gate_grad, epsilon_schedule, tau_schedule,
                     gumbel_softmax, darts_weights, dnal_gate)
from .searchspace import (CandidateSpec, LayerSpec, MacroArch, Supernet,
                          enumerate_candidates, build_macro, build_supernet,
                          supernet_forward, space_cardinality)
from .flops import (FlopsTable, Budget, conv_flops, block_flops, fusion_flops,
                    build_flops_table, total_expected_flops, budget_penalty,
                    lambda_schedule, instrumented_count)
from .data import HeatmapSample, synth_dataset
from .trainer import (SearchConfig, AdamW, NumericsError, mse_loss, kl_loss,
                      cosine_lr, clip_grad_norm, pck_metric, run_search,
                      retrain_derived, search_step)
from .derive import (ArchGenome, GenomeError, discretize, genome_flops_exact,
                     export_genome, import_genome, random_genome)

__version__ = "0.1.0"
