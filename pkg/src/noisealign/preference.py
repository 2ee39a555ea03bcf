"""Preference-based noise optimization for rewards without gradients.

Two bundles are sampled each iteration; the black-box reward only decides
which one is the winner. The loss is a Bradley-Terry log-likelihood on the
score-surrogate implicit rewards, so gradients never pass through the reward.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import grad_engine as ge
from .align import AlignmentConfig, AlignmentError, AlignmentReport, IterationRecord
from .optim import make_optimizer
from .rewards import RewardSpec, evaluate
from .rng import make_stream
from .sampler import FULL_TRAJECTORY, INITIAL_ONLY, NoiseBundle, TrajectoryRecord, sample
from .schedule import VarianceSchedule
from .score_model import GuidanceSetting, MixtureScoreModel


class PreferenceError(ValueError):
    pass


@dataclass(frozen=True)
class PreferencePair:
    winner_bundle: NoiseBundle
    loser_bundle: NoiseBundle
    winner_ref: NoiseBundle
    loser_ref: NoiseBundle
    winner_traj: TrajectoryRecord
    loser_traj: TrajectoryRecord
    reward_winner: float
    reward_loser: float
    winner_ref_traj: TrajectoryRecord | None = None
    loser_ref_traj: TrajectoryRecord | None = None

    def __post_init__(self) -> None:
        if self.reward_winner < self.reward_loser:
            raise PreferenceError(
                f"winner reward {self.reward_winner} is below loser reward {self.reward_loser}"
            )


@dataclass(frozen=True)
class PreferenceRecord(IterationRecord):
    """Winner-track iteration record plus the pairwise quantities."""

    winner: str = "a"
    swapped: bool = False
    reward_loser: float = 0.0
    implicit_reward_w: float = 0.0
    implicit_reward_l: float = 0.0


def implicit_reward(traj_current: TrajectoryRecord, traj_reference: TrajectoryRecord):
    """S_ref - S_cur; traced when the current trajectory is."""
    for name in ("prompt", "schedule_ref", "model_ref"):
        a, b = getattr(traj_current, name), getattr(traj_reference, name)
        if a != b:
            raise PreferenceError(f"trajectories disagree on {name}: {a!r} vs {b!r}")
    return ge.add(ge.value_of(traj_reference.surrogate_sum), ge.neg(traj_current.surrogate_sum))


def dpo_loss_from_margin(margin, beta: float):
    """-log sigmoid(beta * margin) = softplus(-beta * margin)."""
    if beta <= 0:
        raise PreferenceError(f"beta must be positive, got {beta}")
    return ge.softplus(ge.mul(-beta, margin))


def dpo_loss(pair: PreferencePair, beta: float):
    if pair.winner_ref_traj is None or pair.loser_ref_traj is None:
        raise PreferenceError("pair carries no reference trajectories")
    r_w = implicit_reward(pair.winner_traj, pair.winner_ref_traj)
    r_l = implicit_reward(pair.loser_traj, pair.loser_ref_traj)
    return dpo_loss_from_margin(ge.add(r_w, ge.neg(r_l)), beta)


def pick_winner(reward_a: float, reward_b: float) -> str:
    """Strictly higher reward wins; ties go to bundle a."""
    return "b" if reward_b > reward_a else "a"


def mira_dpo_optimize(z_init_a: NoiseBundle, z_init_b: NoiseBundle, prompt: str, reward: RewardSpec,
                      config: AlignmentConfig, schedule: VarianceSchedule, model: MixtureScoreModel,
                      guidance: GuidanceSetting) -> AlignmentReport:
    """Optimize two bundles against a black-box reward through pairwise preferences.

    The iteration-0 bundles are the frozen references. Each iteration samples
    both bundles, ranks them by reward, and takes one optimizer step on the
    DPO loss with respect to both. The returned report follows the winner:
    its ``drift`` column is the winner's implicit reward S_ref - S.
    """
    if config.beta <= 0:
        raise AlignmentError("mira_dpo_optimize needs beta > 0")
    if z_init_a.mode != z_init_b.mode:
        raise AlignmentError("both bundles must use the same noise mode")
    mode = z_init_a.mode
    rng = make_stream(config.seed, 0, "mira_dpo-step-noise")
    T, d = schedule.step_count, model.dimension

    def run(bundle, noises):
        if mode == INITIAL_ONLY:
            bundle = NoiseBundle(bundle.initial, noises, FULL_TRAJECTORY)
        return sample(bundle, prompt, schedule, model, guidance)

    def draw_noises():
        if mode != INITIAL_ONLY:
            return None, None
        return rng.standard_normal((T, d)), rng.standard_normal((T, d))

    refs = {"a": z_init_a, "b": z_init_b}
    na, nb = draw_noises()
    ref_traj = {"a": run(z_init_a, na).values(), "b": run(z_init_b, nb).values()}
    s_ref = {k: float(v.surrogate_sum) for k, v in ref_traj.items()}

    opt = make_optimizer(config.optimizer, config.learning_rate, config.weight_decay)
    bundles = {"a": z_init_a, "b": z_init_b}
    records: list[PreferenceRecord] = []
    previous = None
    start = time.perf_counter()
    for k in range(config.iterations):
        na, nb = draw_noises()
        seen = {}

        def program(traced):
            ta, tb = run(traced[0], na), run(traced[1], nb)
            ra = float(evaluate(reward, ge.value_of(ta.x0), prompt))
            rb = float(evaluate(reward, ge.value_of(tb.x0), prompt))
            w = pick_winner(ra, rb)
            l = "b" if w == "a" else "a"
            trajs, rewards = {"a": ta, "b": tb}, {"a": ra, "b": rb}
            r_w = implicit_reward(trajs[w], ref_traj[w])
            r_l = implicit_reward(trajs[l], ref_traj[l])
            seen.update(winner=w, reward_w=rewards[w], reward_l=rewards[l],
                        r_w=float(ge.value_of(r_w)), r_l=float(ge.value_of(r_l)))
            return dpo_loss_from_margin(ge.add(r_w, ge.neg(r_l)), config.beta)

        traced_in = [_strip(bundles["a"]), _strip(bundles["b"])]
        res_a, res_b = ge.gradient_multi(program, traced_in)
        grad_norm = float(np.sqrt(res_a.norm() ** 2 + res_b.norm() ** 2))
        w = seen["winner"]
        records.append(PreferenceRecord(
            k, seen["reward_w"], seen["r_w"], res_a.value, grad_norm,
            winner=w, swapped=previous is not None and previous != w,
            reward_loser=seen["reward_l"], implicit_reward_w=seen["r_w"], implicit_reward_l=seen["r_l"],
        ))
        previous = w
        params = bundles["a"].vectors() + bundles["b"].vectors()
        grads = _grads(res_a) + _grads(res_b)
        new = opt.step(params, grads)
        n = len(bundles["a"].vectors())
        bundles = {"a": _rebuild(bundles["a"], new[:n]), "b": _rebuild(bundles["b"], new[n:])}
    wall = time.perf_counter() - start

    na, nb = draw_noises()
    final = {"a": run(bundles["a"], na).values(), "b": run(bundles["b"], nb).values()}
    final_rewards = {key: float(evaluate(reward, final[key].x0, prompt)) for key in final}
    w = pick_winner(final_rewards["a"], final_rewards["b"])
    report = AlignmentReport(
        config, records, bundles[w], final[w], final_rewards[w],
        s_ref[w] - float(final[w].surrogate_sum), s_ref[w], wall,
    )
    report.notes.update(
        final_winner=w,
        final_reward_loser=final_rewards["b" if w == "a" else "a"],
        reference_surrogates=s_ref,
        reference_bundles={key: refs[key].to_dict() for key in refs},
    )
    return report


def _strip(bundle: NoiseBundle) -> NoiseBundle:
    if bundle.mode == INITIAL_ONLY:
        return NoiseBundle(bundle.initial, None, INITIAL_ONLY)
    return bundle


def _grads(res: ge.GradientResult) -> list[np.ndarray]:
    return [res.wrt_initial] + ([] if res.wrt_injected is None else list(res.wrt_injected))


def _rebuild(bundle: NoiseBundle, vectors: list[np.ndarray]) -> NoiseBundle:
    injected = np.stack(vectors[1:]) if bundle.injected is not None else None
    return replace(bundle, initial=vectors[0], injected=injected)
