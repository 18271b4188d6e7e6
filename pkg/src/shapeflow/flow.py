"""Data-dependent rectified flow between coarse and fine latent sets.

The source distribution is the coarse latent (optionally forward-noised on
a DDPM schedule), the target is the matched fine latent; the velocity
target along the straight interpolation path is their difference.
Sampling integrates the learned field with explicit Euler steps, with
classifier-free guidance mixing conditional and null-condition velocities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dit import ConditionTokens, DiTParams, condition_tokens, predict_velocity
from .optim import AdamState, adam_step, zero_grads
from .nn import parameter_list
from .sampling import TokenMatching
from .tensor import Tape, Tensor, backward, mse


@dataclass
class NoiseSchedule:
    """Linear-beta forward-noising constants; alpha_bars[0] is exactly 1."""

    total_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end,
                                 self.total_steps)
        self.alpha_bars = np.concatenate(
            [[1.0], np.cumprod(1.0 - self.betas)])


@dataclass
class FlowHyper:
    sigma_min: float = 1e-5      # observation-noise floor of the target
    t_aug_train: int = 400       # forward-noising index during training
    t_aug_infer: int = 100       # milder index for optional inference noising
    num_steps: int = 25          # Euler steps from t=0 to 1
    cfg_scale: float = 2.0       # guidance scale; 1 disables guidance
    cond_dropout: float = 0.1    # chance of training on the null condition


@dataclass
class LatentPair:
    """A coupled training draw: coarse tokens, fine tokens, their matching.

    y is either ready-made ConditionTokens (an external condition encoder)
    or a raw condition parameter vector, in which case the model's own
    condition embedding produces the tokens and is trained along the way.
    """

    z0: np.ndarray                  # (M, D) coarse latent tokens
    z1: np.ndarray                  # (M, D) fine latent tokens
    y: object                       # ConditionTokens | (cond_len,) array
    matching: Optional[TokenMatching] = None
    pair_id: Optional[int] = None   # stable identity for per-sample seeding


def interpolate(z0: np.ndarray, z1: np.ndarray, t: float) -> np.ndarray:
    """Convex combination (1 - t) * z0 + t * z1; endpoints are exact."""
    z0 = np.asarray(z0)
    z1 = np.asarray(z1)
    if z0.shape != z1.shape:
        raise ValueError(f"endpoint shapes differ: {z0.shape} vs {z1.shape}")
    if t == 0.0:
        return z0.copy()
    if t == 1.0:
        return z1.copy()
    return (1.0 - t) * z0 + t * z1


def flow_loss(v_pred, z0: np.ndarray, z1: np.ndarray):
    """Mean squared error between the prediction and (z1 - z0)."""
    target = np.asarray(z1) - np.asarray(z0)
    if isinstance(v_pred, Tensor):
        return mse(v_pred, Tensor(target))
    v_pred = np.asarray(v_pred)
    if v_pred.shape != target.shape:
        raise ValueError(
            f"prediction shape {v_pred.shape} vs target {target.shape}")
    return float(((v_pred - target) ** 2).mean())


def noise_augment(z0: np.ndarray, t_aug: int, schedule: NoiseSchedule,
                  seed: int = 0) -> np.ndarray:
    """Forward-noise z0 to schedule index t_aug (0 is the exact identity)."""
    if not 0 <= t_aug <= schedule.total_steps:
        raise ValueError(
            f"t_aug must lie in [0, {schedule.total_steps}], got {t_aug}")
    z0 = np.asarray(z0)
    if t_aug == 0:
        return z0.copy()
    a_bar = schedule.alpha_bars[t_aug]
    eps = np.random.default_rng(seed).standard_normal(z0.shape)
    return np.sqrt(a_bar) * z0 + np.sqrt(1.0 - a_bar) * eps


def _sample_seed(base_seed: int, pair: LatentPair, position: int) -> int:
    ident = pair.pair_id if pair.pair_id is not None else position
    return int(np.random.SeedSequence([base_seed, ident]).generate_state(1)[0])


def train_step(batch: list[LatentPair], params: DiTParams,
               opt_state: AdamState, hyper: FlowHyper,
               schedule: NoiseSchedule, seed: int = 0) -> float:
    """One optimization step of the velocity-matching objective.

    Per sample: draw t uniformly, forward-noise z0 (noise is applied before
    interpolation so the fine endpoint stays clean), drop the condition with
    probability cond_dropout, and regress the velocity onto
    (z1 - noised z0).  Randomness is seeded per sample so batch order does
    not change the result.
    """
    if not batch:
        raise ValueError("train_step needs a nonempty batch")
    tensors = parameter_list(params)
    zero_grads(tensors)
    total = 0.0
    with Tape() as tape:
        losses = []
        for position, pair in enumerate(batch):
            rng = np.random.default_rng(_sample_seed(seed, pair, position))
            t = float(rng.uniform(0.0, 1.0))
            z0_noised = noise_augment(
                pair.z0, hyper.t_aug_train, schedule,
                seed=int(rng.integers(0, 2 ** 63 - 1)))
            use_null = bool(rng.uniform() < hyper.cond_dropout)
            z_t = interpolate(z0_noised, pair.z1, t)
            y = pair.y if isinstance(pair.y, ConditionTokens) \
                else condition_tokens(params, pair.y)
            v = predict_velocity(Tensor(z_t), t, y, params,
                                 use_null=use_null)
            losses.append(flow_loss(v, z0_noised, pair.z1))
        loss = losses[0]
        for extra in losses[1:]:
            loss = loss + extra
        loss = loss * (1.0 / len(losses))
        total = loss.item()
        backward(loss, tape)
    adam_step(tensors, [p.grad for p in tensors], opt_state)
    return total


def sample(z0: np.ndarray, velocity, hyper: FlowHyper,
           schedule: NoiseSchedule, seed: int = 0,
           use_noise_aug: bool = False,
           record_trajectory: bool = False):
    """Transport a coarse latent to a fine one with explicit Euler steps.

    velocity(z, t, use_null) -> array is evaluated at t = k / num_steps;
    when cfg_scale != 1 the conditional and null velocities are blended as
    v_null + cfg_scale * (v_cond - v_null).  Returns the endpoint, or
    (endpoint, states) when record_trajectory is set.
    """
    if hyper.num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {hyper.num_steps}")
    z = np.asarray(z0, dtype=np.float64).copy()
    if use_noise_aug:
        z = noise_augment(z, hyper.t_aug_infer, schedule, seed=seed)
    states = [z.copy()]
    dt = 1.0 / hyper.num_steps
    for k in range(hyper.num_steps):
        t = k * dt
        v_cond = np.asarray(velocity(z, t, False))
        if hyper.cfg_scale == 1.0:
            v = v_cond
        else:
            v_null = np.asarray(velocity(z, t, True))
            v = v_null + hyper.cfg_scale * (v_cond - v_null)
        z = z + dt * v
        if record_trajectory:
            states.append(z.copy())
    if record_trajectory:
        return z, states
    return z


def path_straightness(states: list[np.ndarray]) -> float:
    """Mean squared deviation of per-step displacements from the straight
    path, normalized by the squared endpoint displacement (0 iff straight)."""
    if len(states) < 2:
        raise ValueError("straightness needs at least 2 trajectory states")
    arr = [np.asarray(s, dtype=np.float64) for s in states]
    total = arr[-1] - arr[0]
    total_sq = float((total * total).sum())
    if total_sq == 0.0:
        # stationary trajectory: any movement is pure deviation
        deviations = [float(((b - a) ** 2).sum()) for a, b in zip(arr, arr[1:])]
        return 0.0 if not any(deviations) else float("inf")
    num_steps = len(arr) - 1
    straight = total / num_steps
    dev = 0.0
    for a, b in zip(arr, arr[1:]):
        step = b - a - straight
        dev += float((step * step).sum())
    return dev / num_steps / total_sq
