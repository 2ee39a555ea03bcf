"""Noise-optimization loops: MIRA, a DNO-style baseline and Best-of-N."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import grad_engine as ge
from .optim import make_optimizer
from .rewards import RewardSpec, evaluate
from .rng import make_stream
from .sampler import FULL_TRAJECTORY, INITIAL_ONLY, NoiseBundle, TrajectoryRecord, reverse_step, sample
from .schedule import VarianceSchedule
from .score_model import GuidanceSetting, MixtureScoreModel

METHODS = ("mira", "dno", "best_of_n")
SURROGATES = ("algorithm", "derivation-faithful")
PENALTIES = ("linear", "hinge", "absolute")


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentConfig:
    method: str = "mira"
    iterations: int = 50
    learning_rate: float = 0.01
    beta: float = 0.5
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    dno_noise_reg_weight: float = 0.0
    best_of_n_count: int | None = None
    seed: int = 0
    noise_mode: str = FULL_TRAJECTORY
    # "algorithm": S0 fixed from the initial trajectory; "derivation-faithful":
    # both score terms along the current trajectory (transition-score form).
    surrogate: str = "algorithm"
    # "hinge" penalizes only max(0, S0 - S); "absolute" penalizes |S0 - S|
    penalty: str = "linear"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise AlignmentError(f"unknown method {self.method!r}")
        if self.iterations < 0:
            raise AlignmentError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise AlignmentError("learning_rate must be positive")
        if self.beta < 0:
            raise AlignmentError("beta must be nonnegative")
        if self.optimizer not in ("adamw", "gd"):
            raise AlignmentError(f"unknown optimizer {self.optimizer!r}")
        if self.weight_decay < 0 or self.dno_noise_reg_weight < 0:
            raise AlignmentError("weight decay and noise regularization weight must be nonnegative")
        if self.method == "best_of_n":
            if self.best_of_n_count is None or self.best_of_n_count < 1:
                raise AlignmentError("best_of_n needs best_of_n_count >= 1")
        elif self.best_of_n_count is not None:
            raise AlignmentError("best_of_n_count is only valid for method best_of_n")
        if self.noise_mode not in (FULL_TRAJECTORY, INITIAL_ONLY):
            raise AlignmentError(f"unknown noise mode {self.noise_mode!r}")
        if self.surrogate not in SURROGATES:
            raise AlignmentError(f"unknown surrogate {self.surrogate!r}")
        if self.penalty not in PENALTIES:
            raise AlignmentError(f"unknown penalty {self.penalty!r}")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    reward: float
    drift: float  # S0 - S
    loss: float
    grad_norm: float


@dataclass
class AlignmentReport:
    config: AlignmentConfig
    records: list[IterationRecord]
    final_bundle: NoiseBundle
    final_trajectory: TrajectoryRecord
    final_reward: float
    final_drift: float
    s0: float
    wall_time: float = 0.0
    notes: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def manifest(self) -> dict:
        return {
            "config": asdict(self.config),
            "s0": self.s0,
            "final_reward": self.final_reward,
            "final_drift": self.final_drift,
            "final_x0": np.asarray(self.final_trajectory.x0).tolist(),
            "wall_time_s": self.wall_time,
            **self.notes,
        }


def mira_loss(reward_value, S, S0, beta, penalty: str = "linear"):
    """-r + beta * (S0 - S).

    ``penalty="hinge"`` clamps the drift term at zero; ``penalty="absolute"``
    charges the drift magnitude in either direction.
    """
    drift = S0 - S
    if penalty == "hinge":
        drift = ge.relu(drift)
    elif penalty == "absolute":
        drift = ge.absolute(drift)
    return -reward_value + beta * drift


def noise_shell_penalty(bundle: NoiseBundle):
    """sum over noise vectors of (||eps||^2 / d - 1)^2, zero on the Gaussian typical shell."""
    d = bundle.dimension
    vecs = [bundle.initial]
    if bundle.injected is not None:
        vecs.extend(bundle.injected)
    return ge.total([ge.square(ge.sum_squares(v) * (1.0 / d) - 1.0) for v in vecs])


def transition_drift(states, reference_initial, schedule: VarianceSchedule, model, prompt, guidance):
    """Score-form log-likelihood ratio of a trajectory under the z0-started versus its own law.

    The two reverse chains share every transition kernel and differ only in
    their starting state, so only the first stochastic step contributes:
    ``(||x - mu(z0)||^2 - ||x - mu(z)||^2) / sigma^2`` with ``x`` the state
    that step produced.
    """
    T = schedule.step_count
    t = T - 1
    sigma = schedule.sigmas[t]
    if sigma == 0.0:
        raise AlignmentError("first reverse step is deterministic; the transition-score drift is undefined")
    x_next = states[1]
    mu_z = reverse_step(states[0], t, None, schedule, model, prompt, guidance)
    mu_ref = reverse_step(reference_initial, t, None, schedule, model, prompt, guidance)
    a = ge.sum_squares(x_next - mu_ref)
    b = ge.sum_squares(x_next - mu_z)
    return (a - b) * (1.0 / sigma**2)


class _Problem:
    """Shared plumbing for the gradient-based loops."""

    def __init__(self, z_init, prompt, reward, config, schedule, model, guidance):
        if not reward.differentiable:
            raise ge.NonDifferentiableError(
                f"reward {reward.kind!r} is not differentiable; use preference.mira_dpo_optimize"
            )
        if z_init.mode != config.noise_mode:
            z_init = _coerce_mode(z_init, config.noise_mode)
        self.z_init = z_init
        self.prompt, self.reward, self.config = prompt, reward, config
        self.schedule, self.model, self.guidance = schedule, model, guidance
        self.rng = make_stream(config.seed, 0, f"{config.method}-step-noise")
        self.init_traj = self.run(z_init)
        self.s0 = float(self.init_traj.surrogate_sum)

    def run(self, bundle, noises=None):
        if bundle.mode == INITIAL_ONLY and noises is not None:
            b = NoiseBundle(bundle.initial, noises, FULL_TRAJECTORY)
            return sample(b, self.prompt, self.schedule, self.model, self.guidance)
        return sample(bundle, self.prompt, self.schedule, self.model, self.guidance, self.rng)

    def drift(self, traj, noises=None):
        if self.config.surrogate == "derivation-faithful":
            return transition_drift(traj.states, self.z_init.initial, self.schedule, self.model,
                                    self.prompt, self.guidance)
        return self.s0 - traj.surrogate_sum


def _coerce_mode(bundle: NoiseBundle, mode: str) -> NoiseBundle:
    if mode == INITIAL_ONLY:
        return NoiseBundle(np.asarray(bundle.initial), None, INITIAL_ONLY)
    raise AlignmentError("an initial-only bundle cannot seed a full-trajectory run")


def _optimize(problem: _Problem, loss_of) -> AlignmentReport:
    """Generic loop: sample -> loss -> gradient -> optimizer update, K times."""
    cfg = problem.config
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)
    bundle = problem.z_init
    records = []
    start = time.perf_counter()
    for k in range(cfg.iterations):
        noises = None
        if bundle.mode == INITIAL_ONLY:
            noises = problem.rng.standard_normal((problem.schedule.step_count, bundle.dimension))
        seen = {}

        def program(b):
            traj = problem.run(b, noises)
            r = evaluate(problem.reward, traj.x0, problem.prompt)
            drift = problem.drift(traj, noises)
            seen["reward"], seen["drift"] = float(ge.value_of(r)), float(ge.value_of(drift))
            return loss_of(b, r, drift)

        if bundle.mode == INITIAL_ONLY:
            traced = NoiseBundle(bundle.initial, None, INITIAL_ONLY)
            res = ge.gradient(program, traced)
        else:
            res = ge.gradient(program, bundle)
        records.append(IterationRecord(k, seen["reward"], seen["drift"], res.value, res.norm()))
        params = bundle.vectors()
        grads = [res.wrt_initial] + ([] if res.wrt_injected is None else list(res.wrt_injected))
        new = opt.step(params, grads)
        injected = np.stack(new[1:]) if bundle.injected is not None else None
        bundle = replace(bundle, initial=new[0], injected=injected)
    wall = time.perf_counter() - start

    final_noises = None
    if bundle.mode == INITIAL_ONLY:
        final_noises = problem.rng.standard_normal((problem.schedule.step_count, bundle.dimension))
    final = problem.run(bundle, final_noises).values()
    final_drift = float(ge.value_of(problem.drift(final, final_noises)))
    return AlignmentReport(
        cfg, records, bundle, final,
        float(evaluate(problem.reward, final.x0, problem.prompt)),
        final_drift, problem.s0, wall,
    )


def mira_optimize(z_init: NoiseBundle, prompt: str, reward: RewardSpec, config: AlignmentConfig,
                  schedule: VarianceSchedule, model: MixtureScoreModel,
                  guidance: GuidanceSetting) -> AlignmentReport:
    """Minimize -r(x0) + beta * (S0 - S) over the noise bundle.

    S0 is computed once from the initial bundle's trajectory and then held
    fixed; each iteration resamples, evaluates the loss and takes one
    optimizer step on its gradient.
    """
    if config.method != "mira":
        raise AlignmentError(f"config.method is {config.method!r}, expected 'mira'")
    problem = _Problem(z_init, prompt, reward, config, schedule, model, guidance)
    s0 = problem.s0
    return _optimize(problem, lambda b, r, drift: mira_loss(r, s0 - drift, s0, config.beta, config.penalty))


def dno_optimize(z_init: NoiseBundle, prompt: str, reward: RewardSpec, config: AlignmentConfig,
                 schedule: VarianceSchedule, model: MixtureScoreModel,
                 guidance: GuidanceSetting) -> AlignmentReport:
    """Reward ascent with a noise-space penalty only (stand-in for DNO's regularizer).

    The penalty keeps every noise vector near the Gaussian typical shell; the
    surrogate drift is recorded for comparison but never optimized.
    """
    if config.method != "dno":
        raise AlignmentError(f"config.method is {config.method!r}, expected 'dno'")
    problem = _Problem(z_init, prompt, reward, config, schedule, model, guidance)
    lam = config.dno_noise_reg_weight

    def loss(b, r, drift):
        if lam == 0.0:
            return -r
        return -r + lam * noise_shell_penalty(b)

    report = _optimize(problem, loss)
    report.notes["dno_regularizer"] = "noise-shell stand-in: sum (||eps||^2/d - 1)^2"
    return report


def best_of_n(prompt: str, reward: RewardSpec, config: AlignmentConfig, schedule: VarianceSchedule,
              model: MixtureScoreModel, guidance: GuidanceSetting) -> AlignmentReport:
    """Draw N bundles, keep the highest-reward sample. Records hold every draw in order."""
    if config.method != "best_of_n":
        raise AlignmentError(f"config.method is {config.method!r}, expected 'best_of_n'")
    rng = make_stream(config.seed, 0, "best_of_n")
    start = time.perf_counter()
    records = []
    best = None
    for k in range(config.best_of_n_count):
        bundle = NoiseBundle.draw(rng, model.dimension, schedule.step_count, config.noise_mode)
        traj = sample(bundle, prompt, schedule, model, guidance, rng)
        r = float(evaluate(reward, traj.x0, prompt))
        records.append(IterationRecord(k, r, 0.0, -r, 0.0))
        if best is None or r > best[0]:
            best = (r, bundle, traj)
    r, bundle, traj = best
    return AlignmentReport(config, records, bundle, traj, r, 0.0, float(traj.surrogate_sum),
                           time.perf_counter() - start)


def run_method(z_init, prompt, reward, config, schedule, model, guidance) -> AlignmentReport:
    if config.method == "mira":
        return mira_optimize(z_init, prompt, reward, config, schedule, model, guidance)
    if config.method == "dno":
        return dno_optimize(z_init, prompt, reward, config, schedule, model, guidance)
    return best_of_n(prompt, reward, config, schedule, model, guidance)
