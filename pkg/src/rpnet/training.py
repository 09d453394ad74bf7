"""Optimisation loops, schedules, early stopping and training diagnostics."""

from __future__ import annotations

import contextlib
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .data import ClassSplit, Dataset, PairBatch, random_augment, sample_pair_batch
from .exceptions import ConfigError, NumericalError
from .models import (DIFF, SAME, CorruptionConfig, DiscriminatorOutput, Generator,
                     SimilarityModel,
                     corrupt, discriminate)
from .objectives import (discriminator_loss, generator_loss, l2_penalty,
                         similarity_loss, weight_arrays)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss", "val_accuracy", "lr", "l2", "asymmetry",
                  "weight_ratio", "oneshot_accuracy")
GR_METRIC_COLUMNS = ("step", "loss_dis", "loss_gen", "p_same_generated", "val_accuracy",
                     "lr", "sample_spread", "oneshot_accuracy")


class CollapseWarning(UserWarning):
    """Generated samples have (nearly) stopped depending on their conditioning."""


@dataclass
class TrainConfig:
    lr_init: float = 8e-4
    lr_final: float = 8e-4
    total_updates: int = 100_000
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_init: float = 5e-7
    l2_late: float = 5e-7
    l2_switch_step: int = 0
    early_stop_patience: int = 20
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    val_pairs: int = 1024
    augment: bool = True
    max_rotation: float = 45.0
    max_shift: int = 6
    grad_clip: Optional[float] = None
    # spatial transform of the conditioning image on generated rows
    cond_rotation: float = 10.0
    cond_shift: int = 2
    collapse_threshold: float = 1e-3
    seed: int = 0

    def validate(self):
        if not self.lr_init >= self.lr_final > 0:
            raise ConfigError("need lr_init >= lr_final > 0")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.l2_init < 0 or self.l2_late < 0:
            raise ConfigError("L2 coefficients must be >= 0")
        if self.total_updates < 1 or self.batch_size < 2:
            raise ConfigError("total_updates must be >= 1 and batch_size >= 2")
        if self.eval_interval < 1 or self.checkpoint_interval < 1:
            raise ConfigError("eval_interval and checkpoint_interval must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def omniglot_reference(cls, gr=False):
        return cls(lr_init=8e-4, lr_final=8e-4, total_updates=100_000, batch_size=128,
                   beta1=0.5 if gr else 0.9, l2_init=0.0 if gr else 5e-7,
                   l2_late=0.0 if gr else 5e-7, augment=True)

    @classmethod
    def mini_imagenet_reference(cls):
        return cls(lr_init=5e-4, lr_final=1e-4, total_updates=100_000, batch_size=64,
                   l2_init=5e-7, l2_late=1e-6, l2_switch_step=60_000, augment=False)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear interpolation from ``lr_init`` at step 0 to ``lr_final`` at ``total_updates``."""
    if not 0 <= step <= cfg.total_updates:
        raise ValueError(f"step {step} outside [0, {cfg.total_updates}]")
    return cfg.lr_init + (cfg.lr_final - cfg.lr_init) * (step / cfg.total_updates)


def l2_schedule(step: int, cfg: TrainConfig) -> float:
    return cfg.l2_init if step < cfg.l2_switch_step else cfg.l2_late


def make_adam(params, cfg: TrainConfig, beta1=None):
    return torch.optim.Adam(params, lr=cfg.lr_init,
                            betas=(cfg.beta1 if beta1 is None else beta1, cfg.beta2),
                            eps=cfg.eps)


@contextlib.contextmanager
def deterministic():
    """Force deterministic kernels for the duration of the block."""
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def _param_dtype(module):
    return next(module.parameters()).dtype


def _tensor(a, like: nn.Module):
    p = next(like.parameters())
    return torch.as_tensor(np.asarray(a), dtype=p.dtype, device=p.device)


# ---------------------------------------------------------------- diagnostics

def pair_accuracy(model: SimilarityModel, pairs: PairBatch, chunk: int = 256) -> float:
    """Fraction of pairs whose same/different prediction matches ``y`` (inference mode)."""
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(pairs), chunk):
            out = model(_tensor(pairs.x[i:i + chunk], model), _tensor(pairs.x_t[i:i + chunk], model))
            if model.n_outputs == 1:
                pred = (out > 0).long()
            else:
                pred = (out[:, SAME] > out[:, DIFF]).long()
            correct += int((pred.cpu().numpy() == pairs.y[i:i + chunk]).sum())
    model.train(was_training)
    return correct / len(pairs)


def _mean_abs_weight(model) -> float:
    ws = weight_arrays(model)
    total = sum(float(w.detach().abs().sum()) for w in ws)
    count = sum(w.numel() for w in ws)
    return total / count if count else 0.0


def mean_weight_ratio(model_a, model_b) -> float:
    """Mean ``|w|`` over the weight arrays of ``model_a`` divided by that of ``model_b``."""
    den = _mean_abs_weight(model_b)
    if den == 0:
        raise NumericalError("model_b has zero mean absolute weight")
    return _mean_abs_weight(model_a) / den


def embedding_asymmetry(model, x, x_t) -> float:
    """Mean ``|f(x, x_t) - f(x_t, x)|`` of the pre-head pair embedding, inference mode.

    ``model`` is a :class:`SimilarityModel` or any callable ``f(a, b)``.
    """
    if isinstance(model, nn.Module) and hasattr(model, "embed"):
        was_training = model.training
        model.eval()
        with torch.no_grad():
            a, b = _tensor(x, model), _tensor(x_t, model)
            diff = (model.embed(a, b) - model.embed(b, a)).abs()
        model.train(was_training)
        return float(diff.mean())
    diff = np.abs(np.asarray(model(x, x_t), dtype=float) - np.asarray(model(x_t, x), dtype=float))
    return float(diff.mean())


def sample_spread(images: torch.Tensor) -> float:
    """Mean pairwise per-pixel RMS distance between samples."""
    flat = images.detach().reshape(len(images), -1).double()
    d = torch.cdist(flat, flat) / math.sqrt(flat.shape[1])
    n = len(flat)
    return float(d.sum() / (n * (n - 1))) if n > 1 else 0.0


def _grad_norms(module):
    return {name: float(p.grad.norm()) if p.grad is not None else 0.0
            for name, p in module.named_parameters()}


class MetricsLog:
    """Append-only tab-separated metrics file with a header row.

    Opening an existing log with ``resume_step`` drops rows recorded after
    that step so a resumed run continues the file seamlessly.
    """

    def __init__(self, path, columns=METRIC_COLUMNS, resume_step=None):
        self.path = Path(path)
        self.columns = tuple(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume_step is not None and self.path.exists():
            lines = self.path.read_text().splitlines()
            keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split("\t")[0]) <= resume_step]
            self.path.write_text("".join(ln + "\n" for ln in keep))
        else:
            self.path.write_text("\t".join(self.columns) + "\n")

    @staticmethod
    def _fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    def append(self, row: dict):
        with open(self.path, "a") as fh:
            fh.write("\t".join(self._fmt(row.get(c)) for c in self.columns) + "\n")


def read_metrics(path) -> dict:
    """Parse a metrics log into ``{column: [float | None, ...]}``.

    Raises ``ValueError`` naming the line number of a malformed row.
    """
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty metrics log")
    header = lines[0].split("\t")
    if "step" not in header:
        raise ValueError(f"{path}:1: header lacks a 'step' column")
    cols = {h: [] for h in header}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
        for h, v in zip(header, parts):
            try:
                cols[h].append(float(v) if v != "" else None)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value {v!r} in column {h}") from None
    return cols


# ---------------------------------------------------------------- similarity training

@dataclass
class TrainState:
    model: SimilarityModel
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    rng: np.random.Generator
    step: int = 0
    best_val_metric: float = -math.inf
    best_step: int = -1
    best_state: Optional[dict] = None
    evals_since_best: int = 0
    stopped_early: bool = False
    losses: list = field(default_factory=list)
    metric_history: list = field(default_factory=list)

    def save(self, path, extra_meta=None):
        models = {"model": self.model}
        specs = {"model": self.model.spec()}
        if self.best_state is not None:
            models["best"] = self.best_state
            specs["best"] = self.model.spec()
        meta = {"train_config": asdict(self.cfg), "best_val_metric": _finite_or_none(self.best_val_metric),
                "best_step": self.best_step, "evals_since_best": self.evals_since_best,
                "stopped_early": self.stopped_early, "metric_history": self.metric_history,
                "rng_state": self.rng.bit_generator.state}
        meta.update(extra_meta or {})
        return ckpt.save_checkpoint(path, models, specs, step=self.step,
                                    optimizers={"model": self.optimizer}, meta=meta,
                                    arrays={"losses": np.asarray(self.losses, dtype=np.float64)})

    def restore_best(self):
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)


def _finite_or_none(v):
    return v if math.isfinite(v) else None


def _snapshot(state_dict):
    return {k: v.detach().clone() for k, v in state_dict.items()}


def resume_training(path, model: SimilarityModel, cfg: TrainConfig = None) -> TrainState:
    """Rebuild a :class:`TrainState` from a checkpoint written by :meth:`TrainState.save`."""
    ck = ckpt.load_checkpoint(path)
    meta = ck.meta["meta"]
    cfg = cfg or TrainConfig(**meta["train_config"])
    ckpt.restore_module(model, ck, "model")
    opt = make_adam(model.parameters(), cfg)
    ckpt.restore_optimizer(opt, ck, "model")
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    best = meta["best_val_metric"]
    return TrainState(model, opt, cfg, rng, step=ck.step,
                      best_val_metric=-math.inf if best is None else best,
                      best_step=meta["best_step"],
                      best_state=ck.states.get("best"),
                      evals_since_best=meta["evals_since_best"],
                      stopped_early=meta["stopped_early"],
                      losses=[float(v) for v in ck.arrays["losses"]],
                      metric_history=meta["metric_history"])


def _validation_pairs(dataset, split, cfg):
    if len(split.validation) < 2 or cfg.val_pairs < 2:
        return None
    rng = np.random.default_rng([cfg.seed, 1])
    return sample_pair_batch(dataset, split.validation, cfg.val_pairs, rng)


def _augment_pairs(batch: PairBatch, rng, cfg):
    return PairBatch(random_augment(batch.x, rng, cfg.max_rotation, cfg.max_shift),
                     random_augment(batch.x_t, rng, cfg.max_rotation, cfg.max_shift),
                     batch.y, batch.class_x, batch.class_t)


def _next_pairs(dataset, split, cfg, rng, fixed_pairs):
    if fixed_pairs is not None:
        if cfg.batch_size >= len(fixed_pairs):
            return fixed_pairs
        return fixed_pairs.take(rng.choice(len(fixed_pairs), cfg.batch_size, replace=False))
    batch = sample_pair_batch(dataset, split.train, cfg.batch_size, rng)
    return _augment_pairs(batch, rng, cfg) if cfg.augment else batch


def train_similarity(model: SimilarityModel, dataset: Dataset, split: ClassSplit,
                     cfg: TrainConfig, *, fixed_pairs: PairBatch = None,
                     state: TrainState = None, out_dir=None,
                     reference_model: nn.Module = None,
                     oneshot_eval: Callable = None,
                     callback: Callable = None, meta: dict = None) -> TrainState:
    """Train a similarity model with binary cross-entropy, L2 and Adam.

    Pairs come from ``split.train`` (augmented when ``cfg.augment``) or,
    when given, from ``fixed_pairs``. Every ``eval_interval`` steps the
    validation pair accuracy is recorded and the best weights are kept;
    training stops after ``early_stop_patience`` evaluations without
    improvement and the best weights are restored into ``model``.

    With ``out_dir``, one metrics row per step goes to ``metrics.log`` and
    ``checkpoints/latest.npz`` is written every ``checkpoint_interval``
    steps. Passing a resumed ``state`` continues exactly where it stopped.
    ``callback(state)`` runs after every update; ``meta`` is stored in
    every checkpoint written.
    """
    cfg.validate()
    if not split.train and fixed_pairs is None:
        raise ValueError("split has no training classes")
    if state is None:
        state = TrainState(model, make_adam(model.parameters(), cfg), cfg,
                           np.random.default_rng(cfg.seed))
    opt = state.optimizer
    val_pairs = _validation_pairs(dataset, split, cfg)
    asym_pairs = val_pairs.take(slice(0, 64)) if val_pairs is not None else None
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        metrics = MetricsLog(out_dir / "metrics.log",
                             resume_step=state.step if state.step > 0 else None)

    while state.step < cfg.total_updates and not state.stopped_early:
        s = state.step
        lr, l2 = lr_schedule(s, cfg), l2_schedule(s, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = _next_pairs(dataset, split, cfg, state.rng, fixed_pairs)
        model.train()
        logits = model(_tensor(batch.x, model), _tensor(batch.x_t, model))
        y = torch.as_tensor(batch.y, device=logits.device)
        loss = similarity_loss(logits, y)
        if l2 > 0:
            loss = loss + l2_penalty(model, l2)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {s}",
                                 {"step": s, "lr": lr, "l2": l2,
                                  "grad_norms": _grad_norms(model)})
        if cfg.grad_clip is not None:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        state.step += 1
        value = float(loss.detach())
        state.losses.append(value)
        row = {"step": state.step, "loss": value, "lr": lr, "l2": l2}

        if state.step % cfg.eval_interval == 0 or state.step == cfg.total_updates:
            _evaluate(state, row, val_pairs, asym_pairs, reference_model, oneshot_eval)
        if metrics is not None:
            metrics.append(row)
            if state.step % cfg.checkpoint_interval == 0 or state.step == cfg.total_updates \
                    or state.stopped_early:
                state.save(out_dir / "checkpoints" / "latest.npz", meta)
        if callback is not None:
            callback(state)

    state.restore_best()
    if out_dir is not None:
        ckpt.save_checkpoint(out_dir / "checkpoints" / "best.npz", {"model": model},
                             {"model": model.spec()},
                             step=state.best_step if state.best_state is not None else state.step,
                             meta={"val_accuracy": _finite_or_none(state.best_val_metric),
                                   "train_config": asdict(cfg), **(meta or {})})
    return state


def _evaluate(state, row, val_pairs, asym_pairs, reference_model, oneshot_eval):
    model = state.model
    if val_pairs is not None:
        acc = pair_accuracy(model, val_pairs)
        row["val_accuracy"] = acc
        if acc > state.best_val_metric:
            state.best_val_metric, state.best_step = acc, state.step
            state.best_state = _snapshot(model.state_dict())
            state.evals_since_best = 0
        else:
            state.evals_since_best += 1
            if state.evals_since_best >= state.cfg.early_stop_patience:
                state.stopped_early = True
                log.info("early stop at step %d (best %.4f at %d)", state.step,
                         state.best_val_metric, state.best_step)
        row["asymmetry"] = embedding_asymmetry(model, asym_pairs.x, asym_pairs.x_t)
    if reference_model is not None:
        row["weight_ratio"] = mean_weight_ratio(reference_model, model)
    if oneshot_eval is not None:
        row["oneshot_accuracy"] = float(oneshot_eval(model))
    state.metric_history.append({k: v for k, v in row.items() if v is not None})


# ---------------------------------------------------------------- adversarial training

@dataclass
class AdversarialBatch:
    real: PairBatch
    cond: torch.Tensor  # transformed conditioning images for generated rows
    x_tilde: torch.Tensor


@dataclass
class AdversarialState:
    gen: Generator
    disc: SimilarityModel
    opt_gen: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    cfg: TrainConfig
    corruption: CorruptionConfig
    rng: np.random.Generator
    noise: torch.Generator
    step: int = 0
    best_val_metric: float = -math.inf
    best_step: int = -1
    best_state: Optional[dict] = None
    evals_since_best: int = 0
    stopped_early: bool = False
    losses_dis: list = field(default_factory=list)
    losses_gen: list = field(default_factory=list)
    collapsed: bool = False
    metric_history: list = field(default_factory=list)

    @property
    def model(self):
        return self.disc

    def save(self, path, extra_meta=None):
        models = {"model": self.disc, "generator": self.gen}
        specs = {"model": self.disc.spec(), "generator": self.gen.spec()}
        if self.best_state is not None:
            models["best"], specs["best"] = self.best_state, self.disc.spec()
        meta = {"train_config": asdict(self.cfg), "corruption": asdict(self.corruption),
                "best_val_metric": _finite_or_none(self.best_val_metric),
                "best_step": self.best_step, "evals_since_best": self.evals_since_best,
                "stopped_early": self.stopped_early, "collapsed": self.collapsed,
                "metric_history": self.metric_history,
                "rng_state": self.rng.bit_generator.state, "gr": True}
        meta.update(extra_meta or {})
        return ckpt.save_checkpoint(
            path, models, specs, step=self.step,
            optimizers={"model": self.opt_disc, "generator": self.opt_gen}, meta=meta,
            arrays={"losses_dis": np.asarray(self.losses_dis, dtype=np.float64),
                    "losses_gen": np.asarray(self.losses_gen, dtype=np.float64),
                    "noise_state": self.noise.get_state().numpy()})


def new_adversarial_state(gen, disc, cfg: TrainConfig, corruption=None) -> AdversarialState:
    if disc.n_outputs != 3:
        raise ValueError("the discriminator needs a 3-output head (see SimilarityModel.with_head)")
    noise = torch.Generator().manual_seed(cfg.seed)
    return AdversarialState(gen, disc, make_adam(gen.parameters(), cfg, beta1=cfg.beta1),
                            make_adam(disc.parameters(), cfg, beta1=cfg.beta1), cfg,
                            (corruption or gen.corruption).validate(),
                            np.random.default_rng(cfg.seed), noise)


def resume_adversarial(path, gen, disc, cfg=None) -> AdversarialState:
    ck = ckpt.load_checkpoint(path)
    meta = ck.meta["meta"]
    cfg = cfg or TrainConfig(**meta["train_config"])
    ckpt.restore_module(disc, ck, "model")
    ckpt.restore_module(gen, ck, "generator")
    st = new_adversarial_state(gen, disc, cfg, CorruptionConfig(**meta["corruption"]))
    ckpt.restore_optimizer(st.opt_disc, ck, "model")
    ckpt.restore_optimizer(st.opt_gen, ck, "generator")
    st.rng.bit_generator.state = meta["rng_state"]
    st.noise.set_state(torch.from_numpy(ck.arrays["noise_state"]))
    best = meta["best_val_metric"]
    st.step = ck.step
    st.best_val_metric = -math.inf if best is None else best
    st.best_step, st.best_state = meta["best_step"], ck.states.get("best")
    st.evals_since_best, st.stopped_early = meta["evals_since_best"], meta["stopped_early"]
    st.collapsed, st.metric_history = meta["collapsed"], meta["metric_history"]
    st.losses_dis = [float(v) for v in ck.arrays["losses_dis"]]
    st.losses_gen = [float(v) for v in ck.arrays["losses_gen"]]
    return st


def adversarial_batch(state: AdversarialState, dataset: Dataset, classes) -> AdversarialBatch:
    """Balanced real pairs plus an equal number of conditioning images for generated rows."""
    cfg, rng = state.cfg, state.rng
    real = sample_pair_batch(dataset, classes, cfg.batch_size, rng)
    if cfg.augment:
        real = _augment_pairs(real, rng, cfg)
    classes = np.array(sorted(classes))
    cls = classes[rng.integers(0, len(classes), size=cfg.batch_size)]
    cond = np.stack([dataset.images[c][rng.integers(dataset.class_size(c))] for c in cls])
    cond_view = random_augment(cond, rng, cfg.cond_rotation, cfg.cond_shift)
    cond_t = _tensor(cond, state.gen)
    x_tilde = corrupt(cond_t, state.corruption, state.noise)
    return AdversarialBatch(real, _tensor(cond_view, state.disc), x_tilde)


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Block gradient flow into ``module`` and leave its buffers untouched on exit."""
    flags = [p.requires_grad for p in module.parameters()]
    buffers = {k: v.clone() for k, v in module.named_buffers()}
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)
        with torch.no_grad():
            for k, v in module.named_buffers():
                v.copy_(buffers[k])


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _joint_forward(state, batch, fake):
    """Discriminator outputs for real rows and generated rows from one forward pass.

    Real and generated rows share a batch so batch-norm statistics cannot
    separate them.
    """
    disc = state.disc
    n = len(batch.real)
    x = torch.cat([_tensor(batch.real.x, disc), fake])
    x_t = torch.cat([_tensor(batch.real.x_t, disc), batch.cond])
    out = discriminate(disc, x, x_t)
    return DiscriminatorOutput(out.probs[:n]), DiscriminatorOutput(out.probs[n:])


def discriminator_update(state: AdversarialState, batch: AdversarialBatch,
                         fake: torch.Tensor) -> float:
    """One Adam step on the discriminator; ``fake`` is detached so the generator is untouched."""
    disc = state.disc
    disc.train()
    out_real, out_fake = _joint_forward(state, batch, fake.detach())
    y = torch.as_tensor(batch.real.y, device=out_real.probs.device)
    loss = discriminator_loss(out_real, y, out_fake)
    state.opt_disc.zero_grad(set_to_none=True)
    loss.backward()
    _check_finite(loss, state, "discriminator", disc)
    if state.cfg.grad_clip is not None:
        nn.utils.clip_grad_norm_(disc.parameters(), state.cfg.grad_clip)
    state.opt_disc.step()
    return float(loss.detach())


def generator_update(state: AdversarialState, batch: AdversarialBatch,
                     fake: torch.Tensor) -> float:
    """One Adam step on the generator with the discriminator frozen."""
    disc = state.disc
    disc.train()
    with frozen(disc):
        _, out_fake = _joint_forward(state, batch, fake)
        loss = generator_loss(out_fake)
        state.opt_gen.zero_grad(set_to_none=True)
        loss.backward()
    _check_finite(loss, state, "generator", state.gen)
    if state.cfg.grad_clip is not None:
        nn.utils.clip_grad_norm_(state.gen.parameters(), state.cfg.grad_clip)
    state.opt_gen.step()
    return float(loss.detach())


def _check_finite(loss, state, which, module):
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite {which} loss at step {state.step}",
                             {"step": state.step, "which": which,
                              "lr": state.opt_disc.param_groups[0]["lr"],
                              "grad_norms": _grad_norms(module)})


def adversarial_step(state: AdversarialState, dataset: Dataset, classes):
    """Discriminator step then generator step on the same generated samples."""
    lr = lr_schedule(state.step, state.cfg)
    _set_lr(state.opt_disc, lr)
    _set_lr(state.opt_gen, lr)
    batch = adversarial_batch(state, dataset, classes)
    state.gen.train()
    fake = state.gen(batch.x_tilde)
    l_dis = discriminator_update(state, batch, fake)
    l_gen = generator_update(state, batch, fake)
    state.step += 1
    state.losses_dis.append(l_dis)
    state.losses_gen.append(l_gen)
    return l_dis, l_gen, lr


def _probe_generator(state, probe):
    gen, disc = state.gen, state.disc
    gen_mode, disc_mode = gen.training, disc.training
    gen.eval()
    disc.eval()
    with torch.no_grad():
        x_tilde = corrupt(probe, state.corruption, torch.Generator().manual_seed(0))
        fake = gen(x_tilde)
        p_same = float(discriminate(disc, fake, probe).p_same.mean())
        spread = sample_spread(fake)
    gen.train(gen_mode)
    disc.train(disc_mode)
    return p_same, spread


def train_adversarial(gen: Generator, disc: SimilarityModel, dataset: Dataset,
                      split: ClassSplit, cfg: TrainConfig, *, corruption=None,
                      state: AdversarialState = None, out_dir=None,
                      oneshot_eval: Callable = None,
                      callback: Callable = None, meta: dict = None) -> AdversarialState:
    """Generative-regularizer training: alternate one discriminator and one generator step.

    The discriminator is a 3-output :class:`SimilarityModel` (diff / same /
    fake); no L2 penalty is applied. Early stopping follows validation pair
    accuracy of the discriminator, as in :func:`train_similarity`. A
    :class:`CollapseWarning` is issued when generated samples for 64 fixed
    conditioning images become nearly identical.
    """
    cfg.validate()
    if not split.train:
        raise ValueError("split has no training classes")
    if state is None:
        state = new_adversarial_state(gen, disc, cfg, corruption)
    classes = split.train
    val_pairs = _validation_pairs(dataset, split, cfg)
    probe_rng = np.random.default_rng([cfg.seed, 2])
    probe_cls = probe_rng.choice(sorted(classes), size=64)
    probe = _tensor(np.stack([dataset.images[c][probe_rng.integers(dataset.class_size(c))]
                              for c in probe_cls]), gen)
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        metrics = MetricsLog(out_dir / "metrics.log", GR_METRIC_COLUMNS,
                             resume_step=state.step if state.step > 0 else None)

    while state.step < cfg.total_updates and not state.stopped_early:
        l_dis, l_gen, lr = adversarial_step(state, dataset, classes)
        row = {"step": state.step, "loss_dis": l_dis, "loss_gen": l_gen, "lr": lr}
        if state.step % cfg.eval_interval == 0 or state.step == cfg.total_updates:
            p_same, spread = _probe_generator(state, probe)
            row["p_same_generated"], row["sample_spread"] = p_same, spread
            if spread < cfg.collapse_threshold and not state.collapsed:
                state.collapsed = True
                warnings.warn(f"generator collapse suspected at step {state.step} "
                              f"(sample spread {spread:.2e})", CollapseWarning)
            if val_pairs is not None:
                _track_best(state, row, pair_accuracy(disc, val_pairs))
            if oneshot_eval is not None:
                row["oneshot_accuracy"] = float(oneshot_eval(disc))
            state.metric_history.append({k: v for k, v in row.items() if v is not None})
        if metrics is not None:
            metrics.append(row)
            if state.step % cfg.checkpoint_interval == 0 or state.step == cfg.total_updates \
                    or state.stopped_early:
                state.save(out_dir / "checkpoints" / "latest.npz", meta)
        if callback is not None:
            callback(state)

    if state.best_state is not None:
        disc.load_state_dict(state.best_state)
    if out_dir is not None:
        state.save(out_dir / "checkpoints" / "best.npz", meta)
    return state


def _track_best(state, row, acc):
    row["val_accuracy"] = acc
    if acc > state.best_val_metric:
        state.best_val_metric, state.best_step = acc, state.step
        state.best_state = _snapshot(state.disc.state_dict())
        state.evals_since_best = 0
    else:
        state.evals_since_best += 1
        if state.evals_since_best >= state.cfg.early_stop_patience:
            state.stopped_early = True
