"""Experiment runners behind the CLI subcommands.

Each runner takes a :class:`RunConfig` and an output directory, writes CSV
and SVG files there and returns an :class:`ExperimentResult`. The caller
writes the manifest last.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import grad_engine as ge
from .align import AlignmentReport, mira_loss, run_method
from .analysis import AR1Process, ar1_kl, ar1_kl_mc, median_bandwidth, mmd_unbiased
from .config import RunConfig
from .io import line_plot_svg, write_csv, write_svg
from .preference import mira_dpo_optimize
from .rewards import evaluate
from .rng import make_stream
from .sampler import INITIAL_ONLY, NoiseBundle, sample


@dataclass
class ExperimentResult:
    files: list[Path] = field(default_factory=list)
    lines: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    passed: bool = True


def initial_bundle(config: RunConfig, seed: int, step_count: int | None = None, run_index: int = 0,
                   tag: str = "z_init") -> NoiseBundle:
    T = step_count or config.schedule.step_count
    rng = make_stream(seed, run_index, tag)
    return NoiseBundle.draw(rng, config.build_model().dimension, T, config.alignment.noise_mode)


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def run_alignment(config: RunConfig, method: str, seed: int, step_count: int | None = None,
                  run_index: int = 0, **overrides) -> AlignmentReport:
    schedule = config.build_schedule(step_count)
    bundle = initial_bundle(config, seed, schedule.step_count, run_index)
    cfg = config.alignment_for(method, seed, **overrides)
    return run_method(bundle, config.prompt, config.reward, cfg, schedule, config.build_model(), config.guidance)


# -- subcommands -------------------------------------------------------------------------


def run_sample(config: RunConfig, out: Path) -> ExperimentResult:
    """Draw ``sample_count`` base-model samples per seed (fresh step noises)."""
    model, schedule = config.build_model(), config.build_schedule()
    rows = []
    clouds = {}
    for seed in config.seeds:
        rng = make_stream(seed, 0, "sample")
        z = rng.standard_normal((config.sample_count, model.dimension))
        traj = sample(NoiseBundle(z, None, INITIAL_ONLY), config.prompt, schedule, model, config.guidance, rng)
        x0 = np.asarray(traj.x0)
        S = np.asarray(traj.surrogate_sum)
        for i in range(len(x0)):
            rows.append([seed, i, *x0[i], S[i]])
        clouds[f"seed {seed}"] = (x0[:, 0], x0[:, 1] if model.dimension > 1 else np.zeros(len(x0)))
    header = ["seed", "index"] + [f"x{j}" for j in range(model.dimension)] + ["surrogate"]
    res = ExperimentResult()
    res.files.append(write_csv(out / "samples.csv", header, rows))
    res.files.append(write_svg(out / "samples.svg", line_plot_svg(
        clouds, f"base samples, prompt {config.prompt}", "x0", "x1", markers_only=True)))
    res.lines.append(f"wrote {len(rows)} samples")
    return res


def run_align(config: RunConfig, out: Path) -> ExperimentResult:
    method = config.alignment.method
    rows, finals, curves = [], [], {}
    res = ExperimentResult()
    for seed in config.seeds:
        t0 = time.perf_counter()
        rep = run_alignment(config, method, seed)
        res.timings[f"seed{seed}"] = time.perf_counter() - t0
        for r in rep.records:
            rows.append([seed, r.iteration, r.reward, r.drift, r.loss, r.grad_norm])
        finals.append([seed, rep.final_reward, rep.final_drift, rep.s0, *np.asarray(rep.final_trajectory.x0)])
        curves[f"seed {seed}"] = (rep.column("iteration"), rep.column("reward"))
        res.lines.append(f"seed {seed}: final reward {rep.final_reward:.4f}, final drift {rep.final_drift:.4f}")
    d = config.build_model().dimension
    res.files.append(write_csv(out / "align.csv", ["seed", "iter", "reward", "drift", "loss", "grad_norm"], rows))
    res.files.append(write_csv(out / "align_final.csv",
                               ["seed", "final_reward", "final_drift", "s0"] + [f"x{j}" for j in range(d)], finals))
    res.files.append(write_svg(out / "align.svg", line_plot_svg(
        curves, f"{method}: reward per iteration", "iteration", "reward")))
    return res


def run_dpo(config: RunConfig, out: Path) -> ExperimentResult:
    model, schedule = config.build_model(), config.build_schedule()
    T = schedule.step_count
    rows, curves = [], {}
    res = ExperimentResult()
    improved = 0
    for seed in config.seeds:
        a = initial_bundle(config, seed, T, tag="z_init_a")
        b = initial_bundle(config, seed, T, tag="z_init_b")
        t0 = time.perf_counter()
        rep = mira_dpo_optimize(a, b, config.prompt, config.reward, config.alignment_for("mira", seed),
                                schedule, model, config.guidance)
        res.timings[f"seed{seed}"] = time.perf_counter() - t0
        for r in rep.records:
            rows.append([seed, r.iteration, r.reward, r.reward_loser, r.loss, r.drift,
                         r.implicit_reward_l, r.winner, r.swapped])
        rows.append([seed, len(rep.records), rep.final_reward, rep.notes["final_reward_loser"], "nan",
                     rep.final_drift, "nan", rep.notes["final_winner"], 0])
        improved += rep.final_reward >= rep.records[0].reward if rep.records else 1
        curves[f"seed {seed}"] = (rep.column("iteration"), rep.column("reward"))
        res.lines.append(f"seed {seed}: winner reward {rep.records[0].reward if rep.records else rep.final_reward:.4f}"
                         f" -> {rep.final_reward:.4f}, winner drift {rep.final_drift:.4f}")
    header = ["seed", "iter", "winner_reward", "loser_reward", "dpo_loss", "winner_drift",
              "loser_implicit_reward", "winner", "swapped"]
    res.files.append(write_csv(out / "dpo.csv", header, rows))
    res.files.append(write_svg(out / "dpo.svg", line_plot_svg(
        curves, f"winner reward ({config.reward.kind})", "iteration", "winner reward")))
    res.summary["improved_seeds"] = int(improved)
    res.lines.append(f"final winner reward >= initial in {improved}/{len(config.seeds)} seeds")
    return res


def run_drift_curve(config: RunConfig, out: Path) -> ExperimentResult:
    """MIRA vs DNO: per-iteration drift and reward averaged over seeds."""
    res = ExperimentResult()
    reports: dict[str, list[AlignmentReport]] = {"mira": [], "dno": []}
    for method in reports:
        for seed in config.seeds:
            t0 = time.perf_counter()
            reports[method].append(run_alignment(config, method, seed))
            res.timings[f"{method}-seed{seed}"] = time.perf_counter() - t0
    rows, curves = [], {}
    K = config.alignment.iterations
    for method, reps in reports.items():
        mean_abs = []
        for k in range(K):
            drift = [r.records[k].drift for r in reps]
            reward = [r.records[k].reward for r in reps]
            md, sd = mean_se(drift)
            ma, sa = mean_se(np.abs(drift))
            mr, sr = mean_se(reward)
            rows.append([method, k, md, sd, ma, sa, mr, sr])
            mean_abs.append(ma)
        curves[method] = (np.arange(K), np.array(mean_abs))
        fd = mean_se([abs(r.final_drift) for r in reps])
        fr = mean_se([r.final_reward for r in reps])
        res.summary[method] = {"final_abs_drift": fd, "final_reward": fr,
                               "final_drifts": [r.final_drift for r in reps],
                               "final_rewards": [r.final_reward for r in reps]}
        res.lines.append(f"{method}: final |drift| {fd[0]:.4g} +- {fd[1]:.2g}, final reward {fr[0]:.4f} +- {fr[1]:.2g}")
    header = ["method", "iter", "mean_drift", "se_drift", "mean_abs_drift", "se_abs_drift", "mean_reward", "se_reward"]
    res.files.append(write_csv(out / "drift_curve.csv", header, rows))
    res.files.append(write_svg(out / "drift_curve.svg", line_plot_svg(
        curves, "surrogate drift |S0 - S| over iterations", "iteration", "mean |S0 - S|")))
    return res


def run_beta_sweep(config: RunConfig, out: Path) -> ExperimentResult:
    res = ExperimentResult()
    rows = []
    xs, ys = [], []
    for beta in config.betas:
        reps = []
        for seed in config.seeds:
            t0 = time.perf_counter()
            reps.append(run_alignment(config, "mira", seed, beta=beta))
            res.timings[f"beta{beta:g}-seed{seed}"] = time.perf_counter() - t0
        fr = mean_se([r.final_reward for r in reps])
        fd = mean_se([r.final_drift for r in reps])
        fa = mean_se([abs(r.final_drift) for r in reps])
        rows.append([beta, fr[0], fr[1], fd[0], fd[1], fa[0], fa[1]])
        xs.append(fa[0])
        ys.append(fr[0])
        res.lines.append(f"beta {beta:g}: reward {fr[0]:.4f} +- {fr[1]:.2g}, |drift| {fa[0]:.4g} +- {fa[1]:.2g}")
    header = ["beta", "mean_final_reward", "se_final_reward", "mean_final_drift", "se_final_drift",
              "mean_abs_final_drift", "se_abs_final_drift"]
    res.files.append(write_csv(out / "beta_sweep.csv", header, rows))
    res.files.append(write_svg(out / "beta_sweep.svg", line_plot_svg(
        {"mira": (np.array(xs), np.array(ys))}, "reward / drift trade-off over beta",
        "mean |final drift|", "mean final reward")))
    res.summary["rows"] = rows
    return res


def run_reward_vs_steps(config: RunConfig, out: Path) -> ExperimentResult:
    res = ExperimentResult()
    rows, fits, curves = [], [], {}
    for method in ("mira", "dno"):
        means, xs, ys = [], [], []
        for T in config.step_counts:
            finals = []
            for seed in config.seeds:
                t0 = time.perf_counter()
                finals.append(run_alignment(config, method, seed, step_count=T).final_reward)
                res.timings[f"{method}-T{T}-seed{seed}"] = time.perf_counter() - t0
            m, s = mean_se(finals)
            rows.append([method, T, m, s])
            means.append(m)
            xs.extend([T] * len(finals))
            ys.extend(finals)
        slope, slope_se, intercept = fit_slope(xs, ys)
        fits.append([method, slope, slope_se, intercept])
        res.summary[method] = {"slope": slope, "slope_se": slope_se}
        curves[method] = (np.array(config.step_counts, dtype=float), np.array(means))
        res.lines.append(f"{method}: reward slope {slope:.4g} +- {slope_se:.2g} per step")
    res.files.append(write_csv(out / "reward_vs_steps.csv",
                               ["method", "step_count", "mean_final_reward", "se_final_reward"], rows))
    res.files.append(write_csv(out / "reward_vs_steps_fit.csv", ["method", "slope", "slope_se", "intercept"], fits))
    res.files.append(write_svg(out / "reward_vs_steps.svg", line_plot_svg(
        curves, f"final reward vs sampling steps (K={config.alignment.iterations})", "DDIM steps T",
        "mean final reward")))
    return res


def fit_slope(xs, ys) -> tuple[float, float, float]:
    """Least-squares slope, its standard error and the intercept (zero slope for one x value)."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if np.unique(xs).size < 2:
        return 0.0, 0.0, float(ys.mean())
    fit = stats.linregress(xs, ys)
    se = float(fit.stderr) if np.isfinite(fit.stderr) else 0.0
    return float(fit.slope), se, float(fit.intercept)


def run_prop1(config: RunConfig, out: Path) -> ExperimentResult:
    """Closed-form AR(1) KL against simulated chains, for every (theta, T, delta) cell."""
    res = ExperimentResult()
    rows = []
    z1 = config.prop1_z
    seed = config.seeds[0]
    for theta in config.thetas:
        for T in config.prop1_steps:
            proc = AR1Process(theta, config.prop1_sigma, T)
            for j, delta in enumerate(config.deltas):
                rng = make_stream(seed, j, f"prop1-{theta!r}-{T}")
                closed = ar1_kl(proc, z1, z1 - delta)
                est = ar1_kl_mc(proc, z1, z1 - delta, config.mc_samples, rng)
                z = est.z_score(closed)
                ok = z <= 3.0
                res.passed &= ok
                rows.append([theta, T, delta, closed, est.value, est.standard_error, z, ok])
    header = ["theta", "T", "delta", "kl_closed_form", "kl_mc", "se", "abs_err_over_se", "pass"]
    res.files.append(write_csv(out / "prop1.csv", header, rows))
    res.lines.append(f"{'theta':>6} {'T':>3} {'delta':>7} {'closed':>12} {'mc':>12} {'|err|/se':>8}")
    for r in rows:
        res.lines.append(f"{r[0]:6g} {r[1]:3d} {r[2]:7g} {r[3]:12.5e} {r[4]:12.5e} {r[6]:8.3f}"
                         f" {'pass' if r[7] else 'FAIL'}")
    res.lines.append("prop1: " + ("PASS" if res.passed else "FAIL"))
    res.summary["rows"] = rows
    return res


def run_check_grads(config: RunConfig, out: Path) -> ExperimentResult:
    """Reverse-mode vs central differences on the MIRA loss for random bundles."""
    res = ExperimentResult()
    model = config.build_model()
    schedule = config.build_schedule(config.grad_step_count)
    T = schedule.step_count
    if not config.reward.differentiable:
        raise ValueError(f"check-grads needs a differentiable reward, got {config.reward.kind!r}")
    cfg = config.alignment
    rows = []
    seed = config.seeds[0]
    for i in range(config.grad_bundles):
        rng = make_stream(seed, i, "check_grads")
        bundle = NoiseBundle.draw(rng, model.dimension, T)
        ref = NoiseBundle.draw(rng, model.dimension, T)
        S0 = float(sample(ref, config.prompt, schedule, model, config.guidance).surrogate_sum)

        def loss(b):
            traj = sample(b, config.prompt, schedule, model, config.guidance)
            r = evaluate(config.reward, traj.x0, config.prompt)
            return mira_loss(r, traj.surrogate_sum, S0, cfg.beta, cfg.penalty)

        rep = ge.finite_difference_check(loss, bundle)
        ok = rep.passed(1e-4)
        res.passed &= ok
        rows.append([i, rep.coordinates, rep.step, rep.max_rel_error, rep.mean_rel_error, ok])
        res.lines.append(f"bundle {i}: {rep.summary()} {'pass' if ok else 'FAIL'}")
    res.files.append(write_csv(out / "check_grads.csv",
                               ["bundle", "coordinates", "step", "max_rel_error", "mean_rel_error", "pass"], rows))
    res.summary["max_rel_error"] = max(r[3] for r in rows)
    res.lines.append("check-grads: " + ("PASS" if res.passed else "FAIL"))
    return res


def run_mmd(config: RunConfig, out: Path) -> ExperimentResult:
    """Squared MMD between base samples and final samples of each alignment method."""
    res = ExperimentResult()
    model, schedule = config.build_model(), config.build_schedule()
    seed = config.seeds[0]
    rng = make_stream(seed, 0, "mmd-base")
    z = rng.standard_normal((config.sample_count, model.dimension))
    base = np.asarray(sample(NoiseBundle(z, None, INITIAL_ONLY), config.prompt, schedule, model,
                             config.guidance, rng).x0)
    ctrl_rng = make_stream(seed, 0, "mmd-control")
    zc = ctrl_rng.standard_normal((config.mmd_runs, model.dimension))
    control = np.asarray(sample(NoiseBundle(zc, None, INITIAL_ONLY), config.prompt, schedule, model,
                                config.guidance, ctrl_rng).x0)
    sets = {"base-control": control}
    for method in ("mira", "dno"):
        finals = []
        for r in range(config.mmd_runs):
            t0 = time.perf_counter()
            rep = run_alignment(config, method, seed, run_index=r)
            res.timings[f"{method}-run{r}"] = time.perf_counter() - t0
            finals.append(np.asarray(rep.final_trajectory.x0))
        sets[method] = np.array(finals)
    h = median_bandwidth(base, np.concatenate(list(sets.values())))
    rows = []
    for name, pts in sets.items():
        raw = mmd_unbiased(base, pts, h)
        rows.append([name, len(base), len(pts), h, raw, max(raw, 0.0)])
        res.summary[name] = max(raw, 0.0)
        res.lines.append(f"{name}: mmd^2 {max(raw, 0.0):.4g} (unclamped {raw:.4g}, bandwidth {h:.3g})")
    res.files.append(write_csv(out / "mmd.csv",
                               ["set", "n_base", "n_set", "bandwidth", "mmd2_unbiased", "mmd2"], rows))
    return res


RUNNERS = {
    "sample": run_sample,
    "align": run_align,
    "dpo": run_dpo,
    "drift-curve": run_drift_curve,
    "beta-sweep": run_beta_sweep,
    "reward-vs-steps": run_reward_vs_steps,
    "prop1": run_prop1,
    "check-grads": run_check_grads,
    "mmd": run_mmd,
}
