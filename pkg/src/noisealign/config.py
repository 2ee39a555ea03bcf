"""INI experiment configs: one file per experiment, one section per block.

Every key is optional; missing keys take the toy-testbed defaults below.
Lists are comma separated. Example::

    [experiment]
    kind = drift-curve
    seeds = 0, 1, 2, 3, 4

    [schedule]
    step_count = 100
    train_steps = 1000

    [reward]
    kind = hackable_peak
    peak = 5.0, 0.0
    width = 1.0
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .align import AlignmentConfig
from .rewards import RewardSpec
from .schedule import VarianceSchedule, build_linear_schedule
from .score_model import GuidanceSetting, MixtureScoreModel, gaussian_model, ring_model

EXPERIMENTS = ("sample", "align", "dpo", "drift-curve", "beta-sweep", "reward-vs-steps", "prop1",
               "check-grads", "mmd")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleBlock:
    step_count: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    eta: float = 1.0
    train_steps: int | None = 1000

    def build(self, step_count: int | None = None) -> VarianceSchedule:
        return build_linear_schedule(step_count or self.step_count, self.beta_start, self.beta_end,
                                     self.eta, self.train_steps)


@dataclass(frozen=True)
class ModelBlock:
    kind: str = "ring"
    n_components: int = 5
    radius: float = 3.0
    covariance_scale: float = 0.1
    mean: tuple[float, ...] = (1.0, 0.0)

    def build(self) -> MixtureScoreModel:
        if self.kind == "ring":
            return ring_model(self.n_components, self.radius, self.covariance_scale)
        if self.kind == "gaussian":
            return gaussian_model(np.array(self.mean), self.covariance_scale)
        raise ConfigError(f"unknown model kind {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    kind: str = "drift-curve"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    prompt: str = "c0"
    guidance_weight: float = 5.0
    schedule: ScheduleBlock = field(default_factory=ScheduleBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    reward: RewardSpec = field(default_factory=lambda: RewardSpec("hackable_peak", peak=(5.0, 0.0), width=1.0))
    alignment: AlignmentConfig = field(
        default_factory=lambda: AlignmentConfig(method="mira", beta=1.0, penalty="absolute")
    )
    dno_learning_rate: float | None = None
    betas: tuple[float, ...] = (0.0, 0.05, 0.2, 1.0)
    step_counts: tuple[int, ...] = (10, 25, 50, 100)
    sample_count: int = 500
    thetas: tuple[float, ...] = (1.05, 1.1, 1.5, 2.0, 3.0)
    prop1_steps: tuple[int, ...] = (5, 10, 20)
    deltas: tuple[float, ...] = (1e-2, 1e-3)
    prop1_sigma: float = 1.0
    prop1_z: float = 1.0
    mc_samples: int = 1_000_000
    grad_bundles: int = 20
    grad_step_count: int = 10
    mmd_runs: int = 16

    def __post_init__(self) -> None:
        if self.kind not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        if self.kind == "beta-sweep" and len(self.betas) < 1:
            raise ConfigError("beta grid must be nonempty")
        if self.kind == "reward-vs-steps" and len(self.step_counts) < 1:
            raise ConfigError("step-count grid must be nonempty")
        if self.sample_count < 2 or self.mc_samples < 2:
            raise ConfigError("sample counts must be >= 2")
        if self.prompt not in self.build_model().prompt_table:
            raise ConfigError(f"prompt {self.prompt!r} is not defined by the model")
        self.build_schedule()

    def build_schedule(self, step_count: int | None = None) -> VarianceSchedule:
        return self.schedule.build(step_count)

    def build_model(self) -> MixtureScoreModel:
        return self.model.build()

    @property
    def guidance(self) -> GuidanceSetting:
        return GuidanceSetting(self.guidance_weight)

    def alignment_for(self, method: str, seed: int, **overrides) -> AlignmentConfig:
        kw = dict(method=method, seed=seed)
        if method == "dno" and self.dno_learning_rate is not None:
            kw["learning_rate"] = self.dno_learning_rate
        kw.update(overrides)
        return replace(self.alignment, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reward"] = self.reward.to_dict()
        return d


# the non-differentiable experiment gets its own reward and regularizer defaults
KIND_DEFAULTS = {
    "dpo": {
        "reward": RewardSpec("quantized_target", target=(3.0, 0.0), levels=10),
        "alignment": AlignmentConfig(method="mira", beta=0.5, penalty="absolute"),
    },
    "align": {"seeds": (0,)},
    "sample": {"seeds": (0,)},
    "check-grads": {"model": ModelBlock(n_components=3)},
}


def default_config(kind: str = "drift-curve") -> RunConfig:
    return RunConfig(kind=kind, **KIND_DEFAULTS.get(kind, {}))


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none") else int(s)


def _opt_float(s: str) -> float | None:
    return None if s.strip().lower() in ("", "none") else float(s)


# section -> key -> parser
_SCHEMA = {
    "experiment": {"kind": str, "seeds": _ints, "prompt": str, "sample_count": int},
    "guidance": {"weight": float},
    "schedule": {"step_count": int, "beta_start": float, "beta_end": float, "eta": float, "train_steps": _opt_int},
    "model": {"kind": str, "n_components": int, "radius": float, "covariance_scale": float, "mean": _floats},
    "reward": {"kind": str, "target": _floats, "peak": _floats, "width": float, "height": float,
               "levels": int, "threshold": float},
    "alignment": {"method": str, "iterations": int, "learning_rate": float, "beta": float, "optimizer": str,
                  "weight_decay": float, "dno_noise_reg_weight": float, "dno_learning_rate": _opt_float,
                  "best_of_n_count": _opt_int, "noise_mode": str, "surrogate": str, "penalty": str},
    "sweep": {"betas": _floats, "step_counts": _ints},
    "prop1": {"thetas": _floats, "steps": _ints, "deltas": _floats, "sigma": float, "z": float,
              "mc_samples": int},
    "check_grads": {"bundles": int, "step_count": int},
    "mmd": {"runs": int},
}


def parse_config(text: str, kind: str | None = None) -> RunConfig:
    """Parse INI text. ``kind`` (from the CLI subcommand) wins over ``[experiment] kind``."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    raw: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        raw[section] = {}
        for key, value in cp.items(section):
            parser = _SCHEMA[section].get(key)
            if parser is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                raw[section][key] = parser(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {value!r}") from exc

    exp = raw.get("experiment", {})
    kind = kind or exp.get("kind", "drift-curve")
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    base = default_config(kind)
    kw: dict = {"kind": kind}
    for key in ("seeds", "prompt", "sample_count"):
        if key in exp:
            kw[key] = exp[key]
    if "weight" in raw.get("guidance", {}):
        kw["guidance_weight"] = raw["guidance"]["weight"]
    try:
        if "schedule" in raw:
            kw["schedule"] = replace(base.schedule, **raw["schedule"])
        if "model" in raw:
            kw["model"] = replace(base.model, **raw["model"])
        if "reward" in raw:
            r = raw["reward"]
            if "kind" in r and r["kind"] != base.reward.kind:
                kw["reward"] = RewardSpec(**r)
            else:
                fields = {k: v for k, v in base.reward.to_dict().items()}
                fields.update(r)
                kw["reward"] = RewardSpec(**fields)
        if "alignment" in raw:
            a = dict(raw["alignment"])
            if "dno_learning_rate" in a:
                kw["dno_learning_rate"] = a.pop("dno_learning_rate")
            kw["alignment"] = replace(base.alignment, **a)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    sweep = raw.get("sweep", {})
    for key in ("betas", "step_counts"):
        if key in sweep:
            kw[key] = sweep[key]
    p1 = raw.get("prop1", {})
    for src, dst in (("thetas", "thetas"), ("steps", "prop1_steps"), ("deltas", "deltas"),
                     ("sigma", "prop1_sigma"), ("z", "prop1_z"), ("mc_samples", "mc_samples")):
        if src in p1:
            kw[dst] = p1[src]
    cg = raw.get("check_grads", {})
    if "bundles" in cg:
        kw["grad_bundles"] = cg["bundles"]
    if "step_count" in cg:
        kw["grad_step_count"] = cg["step_count"]
    if "runs" in raw.get("mmd", {}):
        kw["mmd_runs"] = raw["mmd"]["runs"]
    return replace(base, **kw)


def load_config(path: str | Path, kind: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), kind)
