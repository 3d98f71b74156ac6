"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error,
4 numeric failure. All randomness flows from the config seed, so repeated
invocations with identical inputs produce identical outputs (timestamps
live only in ``meta`` fields).
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt
from . import derive as dv
from . import flops as fl
from . import gating, nnops, searchspace, trainer
from . import tensor as T

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def cmd_search(args):
    config = trainer.SearchConfig.from_json_file(args.config)
    if args.strategy is not None:
        doc = config.to_dict()
        doc["strategy"] = args.strategy
        config = trainer.SearchConfig.from_dict(doc)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    hist_path = os.path.join(out_dir, "history.jsonl")
    genome_path = os.path.join(out_dir, "genome.json")

    net, gates, history = trainer.run_search(
        config, checkpoint_path=ckpt_path, history_path=hist_path,
        resume_from=args.resume)
    genome = dv.discretize(gates, theta=config.theta, strategy=config.strategy,
                           profile=config.profile, input_hw=config.input_hw,
                           meta={"seed": config.seed,
                                 "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ",
                                                             time.gmtime())})
    with open(genome_path, "w") as fh:
        fh.write(dv.export_genome(genome) + "\n")
    table = fl.build_flops_table(net.macro)
    print(f"search done: {len(history)} epochs, "
          f"expected FLOPs {history[-1]['expected_flops']:.3e} "
          f"(budget {history[-1]['budget_flops']:.3e})")
    print(f"genome FLOPs {dv.genome_flops_exact(genome, table):.3e} -> {genome_path}")
    return EXIT_OK


def cmd_derive(args):
    manifest, arrays = ckpt.load_checkpoint(args.checkpoint)
    if manifest.get("kind") != "search-checkpoint":
        raise ckpt.CheckpointError(f"{args.checkpoint} is not a search checkpoint")
    config = trainer.SearchConfig.from_dict(manifest["config"])
    gates = gating.GateParams(alpha_backbone=arrays["alpha/backbone"],
                              alpha_fusion=arrays["alpha/fusion"],
                              epsilon=manifest["epsilon"],
                              step=manifest["step"])
    genome = dv.discretize(gates, theta=args.theta, strategy=config.strategy,
                           profile=config.profile, input_hw=config.input_hw,
                           meta={"seed": config.seed, "checkpoint": str(args.checkpoint)})
    text = dv.export_genome(genome)
    macro = searchspace.build_macro(config.profile, config.input_hw, config.k_kp)
    table = fl.build_flops_table(macro)
    print(text)
    print(f"exact FLOPs: {dv.genome_flops_exact(genome, table)}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def _load_genome(path):
    try:
        with open(path) as fh:
            return dv.import_genome(fh.read())
    except OSError as exc:
        raise dv.GenomeError(f"cannot read genome {path}: {exc}") from exc


def cmd_retrain(args):
    genome = _load_genome(args.genome)
    config = trainer.SearchConfig.from_json_file(args.config)
    _, metrics = trainer.retrain_derived(genome, config)
    doc = {"genome": json.loads(dv.export_genome(genome)), "metrics": metrics}
    if args.out:
        _write_json(args.out, doc)
    print(f"retrained: final train loss {metrics['final_train_loss']:.5f}, "
          f"test loss {metrics['test_task_loss']:.5f}, PCK {metrics['pck']:.4f}")
    return EXIT_OK


def cmd_flops(args):
    macro = searchspace.build_macro(args.profile, args.resolution, args.k_kp)
    table = fl.build_flops_table(macro)
    grid = searchspace.enumerate_candidates()
    report = {
        "profile": args.profile,
        "resolution": args.resolution,
        "stem_head": table.stem_head,
        "fusion": {v: c for v, c in zip(nnops.FUSION_VARIANTS, table.fusion)},
        "layers": [
            {"layer": spec.index, "c_in": spec.c_in, "c_out": spec.c_out,
             "stride": spec.stride,
             "candidates": {grid[i].label(): row[i] for i in range(len(row))}}
            for spec, row in zip(macro.layers, table.backbone)
        ],
    }
    if args.genome:
        genome = _load_genome(args.genome)
        report["genome_exact_flops"] = dv.genome_flops_exact(genome, table)
    elif args.checkpoint:
        manifest, arrays = ckpt.load_checkpoint(args.checkpoint)
        config = trainer.SearchConfig.from_dict(manifest["config"])
        gates = gating.GateParams(alpha_backbone=arrays["alpha/backbone"],
                                  alpha_fusion=arrays["alpha/fusion"],
                                  epsilon=manifest["epsilon"])
        if config.strategy == "gated":
            gmat = gating.gate(gates.alpha_backbone, gates.epsilon)
        else:
            gmat = np.asarray([gating.darts_weights(r) for r in gates.alpha_backbone])
        fusion_soft = gating.darts_weights(gates.alpha_fusion)
        report["expected_flops"] = fl.total_expected_flops(table, gmat, fusion_soft)
    else:
        ones = np.ones((macro.num_layers, len(grid)))
        report["expected_flops_all_on"] = fl.total_expected_flops(
            table, ones, np.full(4, 0.25))
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _gradcheck_gate():
    rng = np.random.default_rng(7)
    alphas = rng.uniform(-3, 3, 4000)
    alphas = alphas[np.abs(alphas) > 1e-6]
    eps = rng.uniform(1e-3, 0.5, alphas.size)
    h = 1e-6
    num = (gating.gate(alphas + h, eps) - gating.gate(alphas - h, eps)) / (2 * h)
    ana = gating.gate_grad(alphas, eps)
    rel = np.abs(ana - num) / np.maximum(1e-8, np.abs(ana) + np.abs(num))
    return float(rel.max()), 1e-8


def _gradcheck_block():
    rng = np.random.default_rng(11)
    block = nnops.CandidateBlock.build(rng, 4, 4, 1, k=3, e=3, k_ghost=3)
    x = T.Tensor(rng.normal(size=(1, 4, 8, 8)))
    err = T.grad_check(lambda t: T.reduce(T.square(block.forward(t, "train")),
                                          "mean", "all"), x)
    return err, 1e-3


def _gradcheck_fusion():
    rng = np.random.default_rng(13)
    fmod = nnops.FusionModule.build(rng, "attention", [4, 6, 8, 10], 8, (8, 8))
    feats = [T.Tensor(rng.normal(size=(1, c, s, s)))
             for c, s in zip([4, 6, 8, 10], [8, 4, 2, 2])]
    err = T.grad_check(lambda t: T.reduce(
        T.square(fmod.forward([t] + feats[1:], "train")), "mean", "all"), feats[0])
    return err, 1e-3


def _gradcheck_supernet():
    rng = np.random.default_rng(17)
    macro = searchspace.build_custom_macro(32, 2, stem_channels=4,
                                           plan=[(4, 1), (6, 2)],
                                           tap_layers=[0, 0, 1, 1],
                                           fusion_channels=4)
    net = searchspace.build_supernet(macro, seed=3,
                                     layer_subsets=[[0, 18], [1, 18]])
    x = T.Tensor(rng.normal(size=(1, 3, 32, 32)))
    gates = [[0.7, 0.4], [0.6, 0.3]]
    err = T.grad_check(lambda t: T.reduce(T.square(
        searchspace.supernet_forward(net, t, gates, [0.4, 0.3, 0.2, 0.1], "train")),
        "mean", "all"), x)
    return err, 1e-3


def cmd_gradcheck(args):
    checks = {"gate": _gradcheck_gate, "block": _gradcheck_block,
              "fusion": _gradcheck_fusion, "supernet": _gradcheck_supernet}
    err, tol = checks[args.scope]()
    print(f"gradcheck {args.scope}: max relative error {err:.3e} (tolerance {tol:.0e})")
    if err > tol:
        raise trainer.NumericsError(f"gradcheck {args.scope} failed: {err:.3e} > {tol:.0e}")
    return EXIT_OK


def cmd_space(args):
    n = searchspace.space_cardinality(args.layers, args.candidates, args.fusion)
    print(n)
    print(f"digits: {len(str(n))}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gatenas",
        description="Gated differentiable architecture search, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run an architecture search")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default="search-out")
    p.add_argument("--strategy", choices=trainer.STRATEGIES)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("derive", help="discretize a checkpoint into a genome")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("retrain", help="retrain a derived genome from scratch")
    p.add_argument("--genome", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("flops", help="emit the FLOPs report")
    p.add_argument("--genome", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--k-kp", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scope", choices=("gate", "block", "fusion", "supernet"),
                   required=True)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("space", help="exact search-space cardinality")
    p.add_argument("--layers", type=int, default=16)
    p.add_argument("--candidates", type=int, default=19)
    p.add_argument("--fusion", type=int, default=4)
    p.set_defaults(func=cmd_space)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, which matches the config-error code
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (gating.ConfigError, searchspace.ConfigError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (ckpt.CheckpointError, dv.GenomeError, trainer.DegenerateTargetError) as exc:
        return _fail(EXIT_DATA, str(exc))
    except trainer.NumericsError as exc:
        if exc.snapshot:
            snap_path = "numerics-failure.json"
            _write_json(snap_path, exc.snapshot)
            print(f"diagnostic snapshot written to {snap_path}", file=sys.stderr)
        return _fail(EXIT_NUMERIC, str(exc))
    except (T.ShapeError, T.DomainError, T.UsageError) as exc:
        return _fail(EXIT_NUMERIC, str(exc))


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
