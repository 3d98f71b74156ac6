"""Search and retraining loops on the synthetic keypoint task.

The bilevel search alternates per batch: a weight step minimizes the task
loss on the training split with the architecture weighting held constant,
then an architecture step minimizes task loss on the validation split plus
the FLOPs budget penalty with the network weights held constant. A joint
single-level mode (one combined step on the training split) exists for
ablation. One run is strictly sequential and seeded; identical configs
reproduce bit-identical results.
"""

import json
import math
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from . import checkpoint as ckpt
from . import data as dat
from . import flops as fl
from . import gating, searchspace
from . import tensor as T
from .gating import ConfigError, GateParams, ScheduleState
from .tensor import Tape, Tensor

STRATEGIES = ("gated", "darts", "dnal")
BILEVEL_MODES = ("alternating", "joint")
TASK_LOSSES = ("kl", "mse")
PCK_RADIUS_PX = 4.0


class NumericsError(RuntimeError):
    """Raised on NaN/Inf loss; carries a diagnostic snapshot dict."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class DegenerateTargetError(ValueError):
    """Raised when a heatmap target channel is all zero."""


# ---------------------------------------------------------------------------
# Task losses

def mse_loss(pred, target):
    """Mean squared error over all entries; target is a plain array."""
    tgt = Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != tgt.shape:
        raise T.ShapeError(f"mse shapes differ: {pred.shape} vs {tgt.shape}")
    return T.reduce(T.square(T.sub(pred, tgt)), "mean", "all")


_LOG_FLOOR = 1e-300  # keeps log() off exact zeros without moving any real mass


def kl_loss(pred_logits, target):
    """KL(q || softmax(pred)) per keypoint channel, averaged.

    q is the target normalized per channel with a +1e-12 floor. The result
    is clamped at 0 so float round-off near convergence cannot turn the
    mathematically nonnegative divergence negative.
    """
    tgt = np.asarray(target, dtype=np.float64)
    if pred_logits.shape != tgt.shape:
        raise T.ShapeError(f"kl shapes differ: {pred_logits.shape} vs {tgt.shape}")
    if np.any(tgt < 0):
        raise DegenerateTargetError("kl target entries must be >= 0")
    sums = tgt.sum(axis=(2, 3), keepdims=True)
    if np.any(sums == 0.0):
        raise DegenerateTargetError("kl target has an all-zero channel")
    q = (tgt + 1e-12) / (sums + 1e-12 * tgt.shape[2] * tgt.shape[3])
    p = T.softmax(pred_logits, "spatial")
    log_p = T.log(T.add(p, Tensor(np.full((1, 1, 1, 1), _LOG_FLOOR))))
    per_cell = T.mul(Tensor(q), T.sub(Tensor(np.log(q)), log_p))
    per_channel = T.reduce(per_cell, "sum", "spatial")
    return T.relu(T.reduce(per_channel, "mean", "all"))


def task_loss(pred, target, kind):
    if kind == "kl":
        return kl_loss(pred, target)
    if kind == "mse":
        return mse_loss(pred, target)
    raise ConfigError(f"unknown task loss {kind!r}")


# ---------------------------------------------------------------------------
# Optimizer and schedules

class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments."""

    def __init__(self, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr):
        """In-place update of each named array: p -= lr*(mhat/(sqrt(vhat)+eps)) + lr*wd*p."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= lr * update

    def state_arrays(self, prefix):
        out = []
        for name in self.m:
            out.append((f"{prefix}/m/{name}", self.m[name]))
            out.append((f"{prefix}/v/{name}", self.v[name]))
        return out

    def load_state_arrays(self, prefix, arrays, t):
        self.t = t
        self.m = {}
        self.v = {}
        for full, arr in arrays.items():
            if full.startswith(f"{prefix}/m/"):
                self.m[full[len(prefix) + 3:]] = arr
            elif full.startswith(f"{prefix}/v/"):
                self.v[full[len(prefix) + 3:]] = arr


def cosine_lr(t, total, lr_max=1e-2, lr_min=1e-4):
    """Cosine decay from lr_max at t=0 to lr_min at t=total."""
    if not 0 <= t <= total:
        raise ConfigError(f"step {t} outside schedule 0..{total}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def clip_grad_norm(grads, max_norm=1.0):
    """Scale the whole gradient collection so its global L2 norm is <= max_norm.

    grads is an iterable of arrays, modified in place; returns the pre-clip norm.
    """
    arrays = list(grads)
    total = 0.0
    for g in arrays:
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in arrays:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Metrics

def pck_metric(pred_heatmaps, keypoints, radius_px=PCK_RADIUS_PX,
               stride=dat.HEATMAP_STRIDE):
    """Fraction of keypoints whose argmax cell lands within radius_px pixels."""
    if radius_px <= 0:
        raise ConfigError("pck radius must be > 0")
    pred = np.asarray(pred_heatmaps)
    n, k, hh, hw = pred.shape
    flat = pred.reshape(n, k, hh * hw).argmax(axis=2)
    cy, cx = np.divmod(flat, hw)
    px = cx * stride
    py = cy * stride
    kp = np.asarray(keypoints)
    dist = np.hypot(px - kp[:, :, 0], py - kp[:, :, 1])
    return float(np.mean(dist <= radius_px))


# ---------------------------------------------------------------------------
# Configuration

@dataclass
class SearchConfig:
    """Everything one run needs; unknown keys are rejected on load."""

    profile: str = "desk"
    input_hw: int = 64
    k_kp: int = 4
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    strategy: str = "gated"
    bilevel: str = "alternating"
    task_loss: str = "kl"
    budget_flops: float | None = None   # None -> budget_fraction of all-on cost
    budget_fraction: float = 0.6
    n_train: int = 512
    n_val: int = 512
    n_test: int = 256
    proxy_fraction: float = 1.0
    lr_weights: float = 1e-3
    lr_alpha_max: float = 1e-2
    lr_alpha_min: float = 1e-4
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    theta: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.bilevel not in BILEVEL_MODES:
            raise ConfigError(f"bilevel must be one of {BILEVEL_MODES}, got {self.bilevel!r}")
        if self.task_loss not in TASK_LOSSES:
            raise ConfigError(f"task_loss must be one of {TASK_LOSSES}, got {self.task_loss!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.proxy_fraction <= 1:
            raise ConfigError("proxy_fraction must be in (0, 1]")
        if not 0 < self.theta < 1:
            raise ConfigError("theta must be in (0, 1)")
        if self.budget_flops is not None and self.budget_flops <= 0:
            raise ConfigError("budget_flops must be > 0")
        if not 0 < self.budget_fraction:
            raise ConfigError("budget_fraction must be > 0")
        if self.n_train < self.batch_size or self.n_val < 1:
            raise ConfigError("need n_train >= batch_size and n_val >= 1")
        if self.n_test < 1:
            raise ConfigError("n_test must be >= 1")
        for name in ("lr_weights", "lr_alpha_max", "lr_alpha_min", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json_file(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(doc)


# ---------------------------------------------------------------------------
# Weighting strategies (values + vector-Jacobian products back to alpha)

def _rowwise_softmax(alpha):
    z = alpha - alpha.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def backbone_weights(strategy, alpha, sched, t):
    if strategy == "gated":
        return gating.gate(alpha, gating.epsilon_schedule(sched, t))
    if strategy == "darts":
        return _rowwise_softmax(alpha)
    if strategy == "dnal":
        return gating.dnal_gate(alpha, gating.dnal_gamma(t, sched.total_steps))
    raise ConfigError(f"unknown strategy {strategy!r}")


def backbone_weights_vjp(strategy, alpha, weights, upstream, sched, t):
    if strategy == "gated":
        return upstream * gating.gate_grad(alpha, gating.epsilon_schedule(sched, t))
    if strategy == "darts":
        dots = (upstream * weights).sum(axis=1, keepdims=True)
        return weights * (upstream - dots)
    if strategy == "dnal":
        gamma = gating.dnal_gamma(t, sched.total_steps)
        return upstream * gamma * weights * (1.0 - weights)
    raise ConfigError(f"unknown strategy {strategy!r}")


# ---------------------------------------------------------------------------
# Search run state

@dataclass
class SearchRun:
    config: SearchConfig
    macro: searchspace.MacroArch
    net: searchspace.Supernet
    gates: GateParams
    table: fl.FlopsTable
    budget: float
    sched: ScheduleState
    params: list
    opt_w: AdamW
    opt_a: AdamW
    rng_gumbel: np.random.Generator
    rng_data: np.random.Generator
    train_set: list
    val_set: list
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def steps_per_epoch(self):
        n = int(math.ceil(len(self.train_set) * self.config.proxy_fraction))
        return max(1, n // self.config.batch_size)


def _make_rng(seed, name):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, dat.stream_seed(seed, name)])))


def resolve_budget(config, table):
    if config.budget_flops is not None:
        return float(config.budget_flops)
    return config.budget_fraction * fl.all_on_expected_flops(table)


def init_search(config):
    macro = searchspace.build_macro(config.profile, config.input_hw, config.k_kp)
    table = fl.build_flops_table(macro)
    net = searchspace.build_supernet(macro, seed=dat.stream_seed(config.seed, "init"))
    gates = GateParams.initial(macro.num_layers)
    sched = ScheduleState(total_steps=max(1, config.epochs *
                                          _steps_per_epoch(config)))
    run = SearchRun(
        config=config, macro=macro, net=net, gates=gates, table=table,
        budget=resolve_budget(config, table), sched=sched,
        params=net.parameters(),
        opt_w=AdamW(weight_decay=config.weight_decay),
        opt_a=AdamW(weight_decay=0.0),
        rng_gumbel=_make_rng(config.seed, "gumbel"),
        rng_data=_make_rng(config.seed, "data-order"),
        train_set=dat.synth_dataset(dat.stream_seed(config.seed, "data-train"),
                                    config.n_train, config.input_hw,
                                    config.input_hw, config.k_kp),
        val_set=dat.synth_dataset(dat.stream_seed(config.seed, "data-val"),
                                  config.n_val, config.input_hw,
                                  config.input_hw, config.k_kp),
    )
    return run


def _steps_per_epoch(config):
    n = int(math.ceil(config.n_train * config.proxy_fraction))
    return max(1, n // config.batch_size)


def _check_finite(value, what, run):
    if math.isfinite(value):
        return value
    snapshot = {
        "failed_quantity": what,
        "value": repr(value),
        "step": run.step,
        "epoch": run.epoch,
        "epsilon": run.gates.epsilon,
        "alpha_backbone_minmax": [float(run.gates.alpha_backbone.min()),
                                  float(run.gates.alpha_backbone.max())],
        "alpha_fusion": run.gates.alpha_fusion.tolist(),
    }
    raise NumericsError(f"non-finite {what} at step {run.step}", snapshot)


def _gate_rows(values):
    return [list(map(float, row)) for row in values]


def search_step(run, xb_train, tgt_train, xb_val, tgt_val):
    """One alternating (or joint) bilevel step; advances run.step."""
    cfg = run.config
    t = run.step
    sched = run.sched
    alpha = run.gates.alpha_backbone
    if cfg.strategy == "gated":
        run.gates.epsilon = gating.epsilon_schedule(sched, t)
    tau_t = gating.tau_schedule(sched, t)
    lam_t = fl.lambda_schedule(sched, t)
    gmat = backbone_weights(cfg.strategy, alpha, sched, t)
    back_costs = run.table.backbone_array()
    fusion_costs = np.asarray(run.table.fusion, dtype=np.float64)

    if cfg.bilevel == "alternating":
        # (a) weight step: task loss on the train batch, weighting detached
        fw = gating.gumbel_softmax(run.gates.alpha_fusion, tau_t, run.rng_gumbel)
        with Tape() as tape:
            tape.watch(*[p for _, p in run.params])
            pred = searchspace.supernet_forward(run.net, Tensor(xb_train),
                                                _gate_rows(gmat),
                                                list(fw), "train")
            loss_w = task_loss(pred, tgt_train, cfg.task_loss)
        train_loss = _check_finite(loss_w.item(), "train task loss", run)
        grads = T.backward(tape, loss_w)
        named = {name: grads[p] for name, p in run.params}
        clip_grad_norm(named.values(), cfg.clip_norm)
        run.opt_w.step({name: p.data for name, p in run.params}, named, cfg.lr_weights)

        # (b) architecture step: task loss on the val batch + budget penalty,
        # network weights detached
        fw2 = gating.gumbel_softmax(run.gates.alpha_fusion, tau_t, run.rng_gumbel)
        val_loss, pen, exp_total = _arch_step(run, xb_val, tgt_val, gmat, fw2,
                                              tau_t, lam_t, t,
                                              back_costs, fusion_costs,
                                              watch_weights=False)
    else:
        # joint single-level ablation: one combined step on the train batch
        fw2 = gating.gumbel_softmax(run.gates.alpha_fusion, tau_t, run.rng_gumbel)
        val_loss, pen, exp_total = _arch_step(run, xb_train, tgt_train, gmat, fw2,
                                              tau_t, lam_t, t,
                                              back_costs, fusion_costs,
                                              watch_weights=True)
        train_loss = val_loss

    run.step += 1
    run.gates.step = run.step
    return {"train_task_loss": train_loss, "arch_task_loss": val_loss,
            "penalty": pen, "expected_flops": exp_total}


def _arch_step(run, xb, tgt, gmat, fw, tau_t, lam_t, t, back_costs, fusion_costs,
               watch_weights):
    cfg = run.config
    gate_tensors = [[Tensor(np.full((1, 1, 1, 1), gmat[l, i]))
                     for i in range(gmat.shape[1])]
                    for l in range(gmat.shape[0])]
    fusion_tensors = [Tensor(np.full((1, 1, 1, 1), v)) for v in fw]
    with Tape() as tape:
        for row in gate_tensors:
            tape.watch(*row)
        tape.watch(*fusion_tensors)
        if watch_weights:
            tape.watch(*[p for _, p in run.params])
        pred = searchspace.supernet_forward(run.net, Tensor(xb), gate_tensors,
                                            fusion_tensors, "train")
        loss = task_loss(pred, tgt, cfg.task_loss)
    loss_val = _check_finite(loss.item(), "architecture task loss", run)
    grads = T.backward(tape, loss)

    up_gates = np.array([[grads[g].item() for g in row] for row in gate_tensors])
    up_fusion = np.array([grads[f].item() for f in fusion_tensors])
    exp_total = fl.total_expected_flops(run.table, gmat, fw)
    pen = fl.budget_penalty(exp_total, run.budget, lam_t)
    if exp_total > run.budget:
        # d penalty / d weighting, in units of 1e9 FLOPs
        up_gates = up_gates + lam_t * back_costs / fl.GIGA
        up_fusion = up_fusion + lam_t * fusion_costs / fl.GIGA

    d_alpha = backbone_weights_vjp(cfg.strategy, run.gates.alpha_backbone, gmat,
                                   up_gates, run.sched, t)
    d_fusion = gating.gumbel_softmax_vjp(fw, up_fusion, tau_t)
    clip_grad_norm([d_alpha, d_fusion], cfg.clip_norm)
    run.opt_a.step({"backbone": run.gates.alpha_backbone,
                    "fusion": run.gates.alpha_fusion},
                   {"backbone": d_alpha, "fusion": d_fusion},
                   cosine_lr(t, run.sched.total_steps,
                             cfg.lr_alpha_max, cfg.lr_alpha_min))

    if watch_weights:
        named = {name: grads[p] for name, p in run.params}
        clip_grad_norm(named.values(), cfg.clip_norm)
        run.opt_w.step({name: p.data for name, p in run.params}, named,
                       cfg.lr_weights)
    return loss_val, pen, exp_total


def _epoch_record(run, step_metrics):
    cfg = run.config
    t = run.step
    gmat = backbone_weights(cfg.strategy, run.gates.alpha_backbone, run.sched, t)
    fusion_soft = gating.darts_weights(run.gates.alpha_fusion)  # noise-free mix
    expected = fl.total_expected_flops(run.table, gmat, fusion_soft)
    return {
        "epoch": run.epoch,
        "step": t,
        "train_task_loss": float(np.mean([m["train_task_loss"] for m in step_metrics])),
        "arch_task_loss": float(np.mean([m["arch_task_loss"] for m in step_metrics])),
        "penalty": float(np.mean([m["penalty"] for m in step_metrics])),
        "expected_flops": expected,
        "budget_flops": run.budget,
        "gates_ge_half": [int((gmat[l] >= 0.5).sum()) for l in range(gmat.shape[0])],
        "epsilon": run.gates.epsilon,
        "tau": gating.tau_schedule(run.sched, t),
        "lambda": fl.lambda_schedule(run.sched, t),
        "lr_alpha": cosine_lr(t, run.sched.total_steps,
                              cfg.lr_alpha_max, cfg.lr_alpha_min),
    }


def run_epoch(run):
    cfg = run.config
    n_train = int(math.ceil(len(run.train_set) * cfg.proxy_fraction))
    n_val = int(math.ceil(len(run.val_set) * cfg.proxy_fraction))
    perm_t = run.rng_data.permutation(n_train)
    perm_v = run.rng_data.permutation(n_val)
    bs = cfg.batch_size
    val_steps = max(1, n_val // bs)
    metrics = []
    for b in range(run.steps_per_epoch):
        idx_t = perm_t[b * bs:(b + 1) * bs]
        vb = b % val_steps
        idx_v = perm_v[vb * bs:(vb + 1) * bs]
        if len(idx_v) < len(idx_t):
            idx_v = perm_v[:bs]
        xb_t, tgt_t, _ = dat.batch_arrays(run.train_set, idx_t)
        xb_v, tgt_v, _ = dat.batch_arrays(run.val_set, idx_v)
        metrics.append(search_step(run, xb_t, tgt_t, xb_v, tgt_v))
    record = _epoch_record(run, metrics)
    run.history.append(record)
    run.epoch += 1
    return record


def run_search(config, *, checkpoint_path=None, history_path=None,
               resume_from=None, stop_after_epoch=None):
    """Full search loop; returns (net, gates, history).

    checkpoint_path, when given, receives the final (or stopped) state.
    resume_from restores a checkpoint written by this function and
    continues bit-identically to an uninterrupted run.
    """
    if resume_from is not None:
        run = load_search_checkpoint(resume_from, config)
    else:
        run = init_search(config)
    while run.epoch < config.epochs:
        run_epoch(run)
        if stop_after_epoch is not None and run.epoch >= stop_after_epoch:
            break
    if checkpoint_path is not None:
        save_search_checkpoint(run, checkpoint_path)
    if history_path is not None:
        with open(history_path, "w") as fh:
            for record in run.history:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return run.net, run.gates, run.history


# ---------------------------------------------------------------------------
# Search checkpointing

def save_search_checkpoint(run, path, meta=None):
    arrays = []
    for name, p in run.params:
        arrays.append((f"param/{name}", p.data))
    for name, st in run.net.bn_states():
        arrays.append((f"bnstat/{name}/mean", st.mean))
        arrays.append((f"bnstat/{name}/var", st.var))
    arrays.append(("alpha/backbone", run.gates.alpha_backbone))
    arrays.append(("alpha/fusion", run.gates.alpha_fusion))
    arrays.extend(run.opt_w.state_arrays("opt_w"))
    arrays.extend(run.opt_a.state_arrays("opt_a"))
    manifest = {
        "kind": "search-checkpoint",
        "version": 1,
        "config": run.config.to_dict(),
        "epoch": run.epoch,
        "step": run.step,
        "epsilon": run.gates.epsilon,
        "opt_w_t": run.opt_w.t,
        "opt_a_t": run.opt_a.t,
        "rng": {"gumbel": run.rng_gumbel.bit_generator.state,
                "data": run.rng_data.bit_generator.state},
        "history": run.history,
        "meta": meta or {},
    }
    ckpt.save_checkpoint(path, manifest, arrays)


def load_search_checkpoint(path, config=None):
    manifest, arrays = ckpt.load_checkpoint(path)
    if manifest.get("kind") != "search-checkpoint":
        raise ckpt.CheckpointError(f"{path} is not a search checkpoint")
    stored = SearchConfig.from_dict(manifest["config"])
    if config is not None and stored != config:
        raise ConfigError("resume config differs from checkpoint config")
    run = init_search(stored)
    for name, p in run.params:
        key = f"param/{name}"
        if key not in arrays:
            raise ckpt.CheckpointError(f"checkpoint missing array {key}")
        p.data[...] = arrays[key]
    for name, st in run.net.bn_states():
        st.mean[...] = arrays[f"bnstat/{name}/mean"]
        st.var[...] = arrays[f"bnstat/{name}/var"]
    run.gates.alpha_backbone[...] = arrays["alpha/backbone"]
    run.gates.alpha_fusion[...] = arrays["alpha/fusion"]
    run.gates.epsilon = manifest["epsilon"]
    run.gates.step = manifest["step"]
    run.opt_w.load_state_arrays("opt_w", arrays, manifest["opt_w_t"])
    run.opt_a.load_state_arrays("opt_a", arrays, manifest["opt_a_t"])
    run.rng_gumbel.bit_generator.state = manifest["rng"]["gumbel"]
    run.rng_data.bit_generator.state = manifest["rng"]["data"]
    run.step = manifest["step"]
    run.epoch = manifest["epoch"]
    run.history = list(manifest["history"])
    return run


# ---------------------------------------------------------------------------
# Retraining a derived architecture

def build_derived_net(genome, macro, seed):
    return searchspace.build_supernet(macro, seed, layer_subsets=genome.layers,
                                      fusion_subset=[genome.fusion])


def _eval_forward(net, images, batch_size):
    gates = searchspace.unit_gates(net)
    preds = []
    for start in range(0, images.shape[0], batch_size):
        xb = Tensor(images[start:start + batch_size])
        out = searchspace.supernet_forward(net, xb, gates, [1.0], "eval")
        preds.append(out.data)
    return np.concatenate(preds, axis=0)


def retrain_derived(genome, config):
    """Train a discretized architecture from scratch; returns (net, metrics).

    Kept blocks enter the layer sum with unit weights. Training uses the
    full synthetic set (train + val splits) at the fixed weight LR, and the
    report holds the final training loss plus held-out task loss and PCK.
    """
    for subset in genome.layers:
        if not subset:
            raise ValueError("genome has an empty layer selection")
    macro = searchspace.build_macro(genome.profile, genome.input_hw, config.k_kp)
    net = build_derived_net(genome, macro, dat.stream_seed(config.seed, "retrain-init"))
    params = net.parameters()
    opt = AdamW(weight_decay=config.weight_decay)
    rng = _make_rng(config.seed, "retrain-order")

    train = dat.synth_dataset(dat.stream_seed(config.seed, "data-train"),
                              config.n_train, config.input_hw, config.input_hw,
                              config.k_kp)
    train += dat.synth_dataset(dat.stream_seed(config.seed, "data-val"),
                               config.n_val, config.input_hw, config.input_hw,
                               config.k_kp)
    test = dat.synth_dataset(dat.stream_seed(config.seed, "data-test"),
                             config.n_test, config.input_hw, config.input_hw,
                             config.k_kp)

    gates = searchspace.unit_gates(net)
    bs = config.batch_size
    losses_by_epoch = []
    for _ in range(config.epochs):
        perm = rng.permutation(len(train))
        epoch_losses = []
        for b in range(len(train) // bs):
            idx = perm[b * bs:(b + 1) * bs]
            xb, tgt, _ = dat.batch_arrays(train, idx)
            with Tape() as tape:
                tape.watch(*[p for _, p in params])
                pred = searchspace.supernet_forward(net, Tensor(xb), gates,
                                                    [1.0], "train")
                loss = task_loss(pred, tgt, config.task_loss)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericsError(f"non-finite retrain loss {value}",
                                    {"epoch": len(losses_by_epoch)})
            grads = T.backward(tape, loss)
            named = {name: grads[p] for name, p in params}
            clip_grad_norm(named.values(), config.clip_norm)
            opt.step({name: p.data for name, p in params}, named, config.lr_weights)
            epoch_losses.append(value)
        losses_by_epoch.append(float(np.mean(epoch_losses)))

    test_images, test_targets, test_kps = dat.batch_arrays(test, range(len(test)))
    preds = _eval_forward(net, test_images, bs)
    with_loss = task_loss(Tensor(preds), test_targets, config.task_loss).item()
    metrics = {
        "train_loss_by_epoch": losses_by_epoch,
        "final_train_loss": losses_by_epoch[-1],
        "test_task_loss": with_loss,
        "pck": pck_metric(preds, test_kps),
        "pck_radius_px": PCK_RADIUS_PX,
    }
    return net, metrics
