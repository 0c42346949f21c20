"""Adversarial training: losses, Adam, the train step/loop and a gradient checker."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import discriminator as disc
from . import generator as gen
from . import nn
from .core_types import as_seed, make_rng, stack_samples

log = logging.getLogger(__name__)

EPS = 1e-7
PROFILES = {"tiny": 1, "paper_scale": gen.PAPER_SCALE_MULTIPLIER}
GEN_LOSS_FORMS = ("non_saturating", "minimax")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0002
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 400
    batch_size: int = 128
    gen_loss_form: str = "non_saturating"
    seed: int = 0
    profile: str = "tiny"
    checkpoint_every: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.gen_loss_form not in GEN_LOSS_FORMS:
            raise ValueError(f"gen_loss_form must be one of {GEN_LOSS_FORMS}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {tuple(PROFILES)}")
        as_seed(self.seed)

    def to_dict(self):
        return asdict(self)


def default_generator_config(config: TrainConfig, variant="concat"):
    return gen.GeneratorConfig(variant=variant, width_multiplier=PROFILES[config.profile])


# --- losses ------------------------------------------------------------------

def _probs(p):
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty probability batch")
    return np.clip(p, EPS, 1.0 - EPS)


def disc_loss(d_real, d_fake) -> float:
    """-mean log D(real) - mean log(1 - D(fake)), probabilities clamped to [eps, 1-eps]."""
    r, f = _probs(d_real), _probs(d_fake)
    return float(-np.mean(np.log(r)) - np.mean(np.log1p(-f)))


def gen_loss(d_fake, form="non_saturating") -> float:
    f = _probs(d_fake)
    if form == "non_saturating":
        return float(-np.mean(np.log(f)))
    if form == "minimax":
        return float(np.mean(np.log1p(-f)))
    raise ValueError(f"unknown generator loss form {form!r}")


def _sigmoid_chain(logits, dloss_dp):
    # d p / d logit, zero where the clamp is active
    p = nn.sigmoid(logits)
    active = (p > EPS) & (p < 1.0 - EPS)
    return np.where(active, dloss_dp * p * (1.0 - p), 0.0).astype(logits.dtype)


def disc_loss_logit_grads(l_real, l_fake):
    """Loss value and gradients w.r.t. the real and fake logits."""
    p_r, p_f = nn.sigmoid(l_real), nn.sigmoid(l_fake)
    value = disc_loss(p_r, p_f)
    cr, cf = _probs(p_r), _probs(p_f)
    g_r = _sigmoid_chain(l_real, -1.0 / (len(cr) * cr))
    g_f = _sigmoid_chain(l_fake, 1.0 / (len(cf) * (1.0 - cf)))
    return value, g_r, g_f


def gen_loss_logit_grad(l_fake, form):
    p = nn.sigmoid(l_fake)
    value = gen_loss(p, form)
    c = _probs(p)
    if form == "non_saturating":
        dp = -1.0 / (len(c) * c)
    else:
        dp = -1.0 / (len(c) * (1.0 - c))
    return value, _sigmoid_chain(l_fake, dp)


# --- objectives shared by train_step and the gradient checker -----------------

def disc_objective(disc_params, gen_config, overheads, real, fake):
    """Discriminator loss and gradients on one batch (train-mode batch norm).

    Real and fake pairs run as separate passes; the overhead reduction is
    computed once and shared.  Returns ``(loss, grads, new_buffers)``.
    """
    buffers = {}
    reduced = disc.reduce_overhead(disc_params, gen_config, overheads)
    f_r, tape_r = disc.features_forward(disc_params, gen_config, real, overheads, True, True,
                                        buffers, reduced)
    after_real = {**disc_params, **buffers}
    f_f, tape_f = disc.features_forward(after_real, gen_config, fake, overheads, True, True,
                                        buffers, reduced)
    l_r, l_f = disc.linear(disc_params, f_r), disc.linear(disc_params, f_f)
    loss, g_r, g_f = disc_loss_logit_grads(l_r, l_f)
    w = disc_params["out.weight"]
    grads_r, grads_f = {}, {}
    dx_r = disc.features_backward(gen_config, tape_r, g_r[:, None] * w, grads_r)
    dx_f = disc.features_backward(gen_config, tape_f, g_f[:, None] * w, grads_f)
    grads = {k: grads_r[k] + grads_f[k] for k in grads_r}
    disc.overhead_backward(gen_config, tape_r, dx_r + dx_f, grads)
    grads["out.weight"] = f_r.T @ g_r + f_f.T @ g_f
    grads["out.bias"] = np.array([g_r.sum() + g_f.sum()], dtype=w.dtype)
    return loss, grads, buffers


def gen_objective_from_fake(disc_params, gen_config, overheads, fake, form):
    """Generator loss and d(loss)/d(fake image) with the discriminator frozen.

    Batch norm uses batch statistics but running estimates are left alone, so
    the discriminator state is untouched.
    """
    f, tape = disc.features_forward(disc_params, gen_config, fake, overheads, True,
                                    update_stats=False)
    logits = disc.linear(disc_params, f)
    loss, g = gen_loss_logit_grad(logits, form)
    dx = disc.features_backward(gen_config, tape, g[:, None] * disc_params["out.weight"], None)
    return loss, np.ascontiguousarray(disc.ground_grad(tape, dx))


def gen_objective(gen_params, disc_params, gen_config, overheads, form, rng=None):
    fake, gtape, buffers = gen.forward_train(gen_params, gen_config, overheads, rng)
    loss, dfake = gen_objective_from_fake(disc_params, gen_config, overheads, fake, form)
    return loss, gen.backward(gen_config, gtape, dfake), buffers


# --- Adam ----------------------------------------------------------------------

def trainable(params):
    return [k for k in params if not nn.is_buffer(k)]


def zeros_like_params(params):
    return {k: np.zeros_like(params[k]) for k in trainable(params)}


def adam_update(params, grads, m, v, t, lr, beta1, beta2, eps):
    """One Adam step (bias-corrected).  Returns new ``(params, m, v)``; inputs untouched."""
    new_p, new_m, new_v = dict(params), {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k in m:
        g = grads[k]
        dt = params[k].dtype.type
        mk = dt(beta1) * m[k] + dt(1.0 - beta1) * g
        vk = dt(beta2) * v[k] + dt(1.0 - beta2) * (g * g)
        step = dt(lr) * (mk / dt(c1)) / (np.sqrt(vk / dt(c2)) + dt(eps))
        new_p[k] = (params[k] - step).astype(params[k].dtype)
        new_m[k], new_v[k] = mk.astype(params[k].dtype), vk.astype(params[k].dtype)
    return new_p, new_m, new_v


# --- state ---------------------------------------------------------------------

@dataclass(frozen=True)
class TrainState:
    config: TrainConfig
    gen_config: gen.GeneratorConfig
    gen_params: Dict[str, np.ndarray]
    disc_params: Dict[str, np.ndarray]
    gen_m: Dict[str, np.ndarray]
    gen_v: Dict[str, np.ndarray]
    disc_m: Dict[str, np.ndarray]
    disc_v: Dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    d_losses: List[float] = field(default_factory=list)
    g_losses: List[float] = field(default_factory=list)


def init_state(config: TrainConfig, gen_config: Optional[gen.GeneratorConfig] = None) -> TrainState:
    gen_config = gen_config or default_generator_config(config)
    gp = gen.init_generator(gen_config, config.seed)
    dp = disc.init_discriminator(gen_config, config.seed)
    rng = make_rng(config.seed, 0x5EED)
    return TrainState(
        config=config, gen_config=gen_config, gen_params=gp, disc_params=dp,
        gen_m=zeros_like_params(gp), gen_v=zeros_like_params(gp),
        disc_m=zeros_like_params(dp), disc_v=zeros_like_params(dp),
        rng_state=rng.bit_generator.state,
    )


def _rng_from(state_dict):
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state_dict
    return rng


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; ``snapshot`` is the diagnostic checkpoint path."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class CheckpointError(OSError):
    pass


def _as_arrays(batch):
    if isinstance(batch, tuple):
        return batch[0], batch[1]
    o, g, _ = stack_samples(batch)
    return o, g


def disc_substep(state: TrainState, overheads, real, fake):
    """Discriminator Adam update on (real, fake) pairs; returns new disc params, moments, loss."""
    cfg = state.config
    d_loss, d_grads, d_buffers = disc_objective(state.disc_params, state.gen_config, overheads,
                                                real, fake)
    if not math.isfinite(d_loss):
        raise NonFiniteLoss(f"discriminator loss is {d_loss} at step {state.step + 1}", state)
    dp, dm, dv = adam_update(state.disc_params, d_grads, state.disc_m, state.disc_v,
                             state.step + 1, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                             cfg.adam_eps)
    dp.update(d_buffers)
    return dp, dm, dv, d_loss


def gen_substep(state: TrainState, disc_params, overheads, fake, gtape, g_buffers):
    """Generator Adam update through the frozen ``disc_params``."""
    cfg = state.config
    g_loss, dfake = gen_objective_from_fake(disc_params, state.gen_config, overheads, fake,
                                            cfg.gen_loss_form)
    if not math.isfinite(g_loss):
        raise NonFiniteLoss(f"generator loss is {g_loss} at step {state.step + 1}", state)
    g_grads = gen.backward(state.gen_config, gtape, dfake)
    gp, gm, gv = adam_update(state.gen_params, g_grads, state.gen_m, state.gen_v, state.step + 1,
                             cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    gp.update(g_buffers)
    return gp, gm, gv, g_loss


def train_step(state: TrainState, batch) -> TrainState:
    """One discriminator update followed by one generator update on ``batch``.

    ``batch`` is a list of PairedSample or an ``(overheads, grounds)`` tuple.
    The fake images are produced once (train-mode generator) and reused by
    both substeps.
    """
    overheads, real = _as_arrays(batch)
    if len(overheads) < 2:
        raise ValueError("train_step needs a batch of at least 2 samples")
    dtype = state.gen_params["enc1.weight"].dtype
    overheads = overheads.astype(dtype, copy=False)
    real = real.astype(dtype, copy=False)
    rng = _rng_from(state.rng_state) if state.gen_config.noise_channels else None
    try:
        fake, gtape, g_buffers = gen.forward_train(state.gen_params, state.gen_config,
                                                   overheads, rng)
        dp, dm, dv, d_loss = disc_substep(state, overheads, real, fake)
        gp, gm, gv, g_loss = gen_substep(state, dp, overheads, fake, gtape, g_buffers)
    except nn.NonFiniteActivation as exc:
        raise NonFiniteLoss(f"{exc} at step {state.step + 1}", state) from exc
    return replace(
        state, gen_params=gp, disc_params=dp, gen_m=gm, gen_v=gv, disc_m=dm, disc_v=dv,
        step=state.step + 1,
        rng_state=rng.bit_generator.state if rng is not None else state.rng_state,
        d_losses=state.d_losses + [d_loss], g_losses=state.g_losses + [g_loss],
    )


def write_loss_trace(state, path):
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("step,d_loss,g_loss\n")
        for i, (d, g) in enumerate(zip(state.d_losses, state.g_losses), start=1):
            fh.write(f"{i},{d!r},{g!r}\n")
    return path


def train(config: TrainConfig, dataset, checkpoint_dir, gen_config=None, state=None,
          echo=print) -> TrainState:
    """Run ``config.epochs`` epochs of ``floor(n / batch_size)`` steps each.

    ``state`` resumes from a checkpointed TrainState; its epoch counter picks
    up where it left off.  Progress goes to ``echo`` one line per epoch.
    """
    from . import data_io

    overheads, grounds = _as_arrays(dataset if isinstance(dataset, tuple) else list(dataset))
    n = len(overheads)
    if n < config.batch_size:
        raise ValueError(f"dataset has {n} samples, fewer than batch_size={config.batch_size}")
    ckdir = Path(checkpoint_dir)
    ckdir.mkdir(parents=True, exist_ok=True)
    if state is None:
        state = init_state(config, gen_config)
    elif state.config != config:
        state = replace(state, config=config)
    steps_per_epoch = n // config.batch_size

    def checkpoint(name):
        try:
            return data_io.save_checkpoint(state, ckdir / name)
        except OSError as exc:
            try:
                write_loss_trace(state, ckdir / "loss_trace.csv")
            finally:
                raise CheckpointError(f"writing checkpoint {ckdir / name} failed: {exc}") from exc

    while state.epoch < config.epochs:
        rng = _rng_from(state.rng_state)
        perm = rng.permutation(n)
        state = replace(state, rng_state=rng.bit_generator.state)
        first = state.step
        for b in range(steps_per_epoch):
            idx = np.sort(perm[b * config.batch_size : (b + 1) * config.batch_size])
            try:
                state = train_step(state, (overheads[idx], grounds[idx]))
            except NonFiniteLoss as exc:
                snap = ckdir / "diagnostic.ckpt"
                data_io.save_checkpoint(exc.state or state, snap)
                write_loss_trace(exc.state or state, ckdir / "loss_trace.csv")
                raise TrainingDiverged(f"{exc}; diagnostic snapshot at {snap}", snap) from exc
        state = replace(state, epoch=state.epoch + 1)
        d_mean = float(np.mean(state.d_losses[first:])) if state.step > first else float("nan")
        g_mean = float(np.mean(state.g_losses[first:])) if state.step > first else float("nan")
        if echo is not None:
            echo(f"epoch {state.epoch} d_loss {d_mean:.6f} g_loss {g_mean:.6f}")
        if state.epoch % config.checkpoint_every == 0 and state.epoch < config.epochs:
            checkpoint(f"epoch_{state.epoch:04d}.ckpt")
    checkpoint("final.ckpt")
    write_loss_trace(state, ckdir / "loss_trace.csv")
    return state


# --- gradient checking ------------------------------------------------------------

@dataclass
class GradientCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int
    n_pinned: int
    tolerance: float
    passed: bool


def relative_error(analytic, numeric, floor=1e-8):
    """|a - n| / max(|a|, |n|), falling back to |a - n| when both are below ``floor``."""
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    return np.where(scale < floor, diff, diff / np.where(scale < floor, 1.0, scale))


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(loss_fn, params, tolerance=1e-3, h=1e-4, names=None) -> GradientCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(params, grad=True) -> (loss, grads or None)``.  Every element of
    every tensor in ``names`` (default: all of ``grads``) is perturbed by +-h
    in double precision.  When either perturbation flips a rectifier's on/off
    state relative to the unperturbed point, the difference is re-taken with
    the base point's activation pattern pinned; ``n_pinned`` counts those.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with nn.activation_patterns() as tape:
        _, grads = loss_fn(params, grad=True)
    base_masks = tape.masks
    names = list(names) if names is not None else sorted(grads)
    worst, worst_name, worst_idx, count, pinned = 0.0, "", (), 0, 0

    def value(pin=None):
        with nn.activation_patterns(pin) as tp:
            v, _ = loss_fn(params, grad=False)
        return v, tp.masks

    for name in names:
        base = params[name]
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + h
            plus, m_plus = value()
            base[idx] = orig - h
            minus, m_minus = value()
            if not (_same_pattern(m_plus, base_masks) and _same_pattern(m_minus, base_masks)):
                pinned += 1
                base[idx] = orig + h
                plus, _ = value(base_masks)
                base[idx] = orig - h
                minus, _ = value(base_masks)
            base[idx] = orig
            numeric[idx] = (plus - minus) / (2 * h)
        err = relative_error(np.asarray(grads[name], dtype=np.float64), numeric)
        count += err.size
        if err.size and err.max() > worst:
            worst = float(err.max())
            worst_name = name
            worst_idx = tuple(int(i) for i in np.unravel_index(err.argmax(), err.shape))
    return GradientCheckReport(worst, worst_name, worst_idx, count, pinned, tolerance,
                               worst < tolerance)


def disc_loss_fn(gen_config, overheads, real, fake):
    """Closure over a fixed batch: discriminator params -> (disc_loss, grads)."""
    def fn(dp, grad=True):
        if not grad:
            # same call order as disc_objective so recorded activation patterns line up
            reduced = disc.reduce_overhead(dp, gen_config, overheads)
            f_r, _ = disc.features_forward(dp, gen_config, real, overheads, True, False, None, reduced)
            f_f, _ = disc.features_forward(dp, gen_config, fake, overheads, True, False, None, reduced)
            return disc_loss(nn.sigmoid(disc.linear(dp, f_r)), nn.sigmoid(disc.linear(dp, f_f))), None
        loss, grads, _ = disc_objective(dp, gen_config, overheads, real, fake)
        return loss, grads
    return fn


def gen_loss_fn(gen_config, disc_params, overheads, form="non_saturating"):
    """Closure over a fixed batch and frozen discriminator: generator params -> (gen_loss, grads)."""
    disc_params = {k: np.asarray(v, dtype=np.float64) for k, v in disc_params.items()}
    overheads = np.asarray(overheads, dtype=np.float64)

    def fn(gp, grad=True):
        if not grad:
            fake, _, _ = gen.forward_train(gp, gen_config, overheads)
            f, _ = disc.features_forward(disc_params, gen_config, fake, overheads, True, False)
            return gen_loss(nn.sigmoid(disc.linear(disc_params, f)), form), None
        loss, grads, _ = gen_objective(gp, disc_params, gen_config, overheads, form)
        return loss, grads
    return fn
