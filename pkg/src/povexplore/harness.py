"""Experiment orchestration: configs, episode loops, CSV output and aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import belief as bel
from .agents import (
    EARLY_STOP_BITS,
    DQNAgent,
    DQNConfig,
    GreedyIGAgent,
    RandomAgent,
    agent_rng,
    run_policy_step,
)
from .errors import ConfigError
from .neural import load_checkpoint
from .seeding import derive_seed
from .world import WorldConfig, generate_world, true_target_map

AGENTS = ("random", "greedy-ig", "dqn-single", "dqn-double")
OUTPUT_ENV = "POVEXPLORE_OUTPUT_DIR"
PER_RUN_CSV = "per_run.csv"
AGGREGATE_CSV = "aggregate.csv"


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    agent: str = "greedy-ig"
    include_pov_mask: bool = True
    runs: int = 20
    master_seed: int = 0
    dqn: DQNConfig = field(default_factory=DQNConfig)
    checkpoint: Optional[str] = None
    output: str = "out"
    workers: int = 1

    def validate(self):
        if self.agent not in AGENTS:
            raise ConfigError(f"agent: unknown agent {self.agent!r}; valid agents are {', '.join(AGENTS)}")
        if self.runs < 1:
            raise ConfigError(f"runs: must be >= 1, got {self.runs}")
        if self.workers < 1:
            raise ConfigError(f"workers: must be >= 1, got {self.workers}")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed: must be a 64-bit unsigned integer")
        self.world.validate()
        self.dqn.validate()
        return self


def _typed(value, kind, name):
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is str:
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {type(value).__name__}")
    return float(value) if kind is float else value


_WORLD_TYPES = {"width": int, "height": int, "t_max": int, "p_vis": float, "count_prior": list, "max_steps": int}
_TOP_TYPES = {"agent": str, "include_pov_mask": bool, "runs": int, "master_seed": int,
              "output": str, "workers": int}


def _section(data, allowed, name):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        prefix = f"{name}." if name else ""
        raise ConfigError(f"{prefix}{unknown[0]}: unknown key (allowed: {', '.join(sorted(allowed))})")


def config_from_dict(data: dict) -> ExperimentConfig:
    top_keys = set(_TOP_TYPES) | {"world", "dqn", "checkpoint"}
    _section(data, top_keys, "")
    kwargs = {}
    for key, kind in _TOP_TYPES.items():
        if key in data:
            kwargs[key] = _typed(data[key], kind, key)
    if "checkpoint" in data and data["checkpoint"] is not None:
        kwargs["checkpoint"] = _typed(data["checkpoint"], str, "checkpoint")

    world = data.get("world", {})
    _section(world, _WORLD_TYPES, "world")
    wk = {}
    for key, kind in _WORLD_TYPES.items():
        if key in world:
            wk[key] = _typed(world[key], kind, f"world.{key}")
    if "count_prior" in wk:
        wk["count_prior"] = tuple(_typed(p, float, "world.count_prior[]") for p in wk["count_prior"])
    try:
        kwargs["world"] = WorldConfig(**wk)
    except ConfigError as e:
        raise ConfigError(f"world.{e}") from None

    dqn = data.get("dqn", {})
    defaults = DQNConfig()
    _section(dqn, DQNConfig.field_names(), "dqn")
    dk = {}
    for key in DQNConfig.field_names():
        if key in dqn:
            kind = type(getattr(defaults, key))
            dk[key] = _typed(dqn[key], kind, f"dqn.{key}")
    kwargs["dqn"] = DQNConfig(**dk)
    try:
        return ExperimentConfig(**kwargs).validate()
    except ConfigError as e:
        msg = str(e)
        if msg.split(":")[0] in DQNConfig.field_names():
            msg = "dqn." + msg
        raise ConfigError(msg) from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: parse error: {e.msg}") from None
    try:
        return config_from_dict(data)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {
        "world": asdict(cfg.world),
        "agent": cfg.agent,
        "include_pov_mask": cfg.include_pov_mask,
        "runs": cfg.runs,
        "master_seed": cfg.master_seed,
        "dqn": asdict(cfg.dqn),
        "checkpoint": cfg.checkpoint,
        "output": cfg.output,
        "workers": cfg.workers,
    }
    out["world"]["count_prior"] = list(cfg.world.count_prior)
    return out


# -- episodes -----------------------------------------------------------------


@dataclass
class MetricsRow:
    run_id: int
    step: int
    correct_cells: int
    total_entropy: float
    cumulative_ig: float
    unique_povs_observed: int
    agent_x: int
    agent_y: int


@dataclass
class AggregateRow:
    step: int
    correct_cells_mean: float
    correct_cells_std: float
    total_entropy_mean: float
    total_entropy_std: float


@dataclass
class EpisodeLog:
    rows: List[MetricsRow]
    rewards: List[float]
    step_cost: float


class EpisodeError(RuntimeError):
    pass


def play_episode(agent, world_config: WorldConfig, seed: int, max_steps: Optional[int] = None,
                 run_id: int = 0, step_cost: float = 0.0) -> EpisodeLog:
    """Run one episode and keep both the metric rows and the per-step rewards.

    Row 0 is the prior state before any action. The loop stops after
    ``max_steps`` actions or as soon as total entropy drops below 1e-6 bits.
    """
    steps = world_config.max_steps if max_steps is None else max_steps
    world = generate_world(world_config, seed)
    truth = true_target_map(world)
    belief = bel.init_belief(world_config)
    rng = agent_rng(seed)
    h0 = bel.total_entropy(belief)

    def row(step):
        h = bel.total_entropy(belief)
        return MetricsRow(run_id, step, bel.correct_count(bel.predict_map(belief), truth), h, h0 - h,
                          belief.unique_povs_observed(), world.agent_pos[0], world.agent_pos[1])

    rows = [row(0)]
    rewards = []
    for step in range(1, steps + 1):
        if rows[-1].total_entropy < EARLY_STOP_BITS:
            break
        try:
            result = run_policy_step(agent, world, belief, rng, step_cost)
        except Exception as e:
            raise EpisodeError(f"run {run_id}: step {step}: {e}") from e
        belief = result.belief
        rewards.append(result.reward)
        rows.append(row(step))
    return EpisodeLog(rows, rewards, step_cost)


def run_episode(agent, world_config: WorldConfig, seed: int, max_steps: Optional[int] = None,
                run_id: int = 0) -> List[MetricsRow]:
    return play_episode(agent, world_config, seed, max_steps, run_id).rows


def aggregate(rows: Sequence[MetricsRow], runs: int) -> List[AggregateRow]:
    """Per-step mean and sample std across runs.

    A run that stopped early contributes its final row to every later step.
    Sums use ``math.fsum`` so the result does not depend on row order.
    """
    by_run = {}
    for r in sorted(rows, key=lambda r: (r.run_id, r.step)):
        by_run.setdefault(r.run_id, []).append(r)
    if len(by_run) != runs:
        raise ValueError(f"expected {runs} runs, found {len(by_run)}")
    last = max(r.step for r in rows)
    out = []
    for step in range(last + 1):
        cc, te = [], []
        for series in by_run.values():
            r = series[min(step, len(series) - 1)]
            cc.append(float(r.correct_cells))
            te.append(r.total_entropy)
        out.append(AggregateRow(step, *_mean_std(cc), *_mean_std(te)))
    return out


def _mean_std(values):
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, cls) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(cls)]
    writer.writerow(names)
    for r in rows:
        writer.writerow([_fmt(getattr(r, n)) for n in names])
    return buf.getvalue()


def write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- experiments --------------------------------------------------------------


def default_checkpoint_name(variant: str, include_mask: bool) -> str:
    return f"dqn-{variant}{'' if include_mask else '-nomask'}.ckpt"


def resolve_output(cfg: ExperimentConfig, override: Optional[str] = None) -> Path:
    if override:
        return Path(override)
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output)


def resolve_checkpoint(cfg: ExperimentConfig, out_dir: Path) -> Path:
    variant = cfg.agent.split("-", 1)[1]
    path = Path(cfg.checkpoint) if cfg.checkpoint else out_dir / default_checkpoint_name(variant, cfg.include_pov_mask)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def build_agent(name: str, include_mask: bool = True, checkpoint: Optional[str] = None,
                epsilon: float = 0.0):
    if name == "random":
        return RandomAgent()
    if name == "greedy-ig":
        return GreedyIGAgent()
    if name in ("dqn-single", "dqn-double"):
        if checkpoint is None:
            raise ValueError(f"{name} needs a checkpoint")
        net, meta = load_checkpoint(checkpoint)
        if net.variant != name.split("-", 1)[1]:
            raise ConfigError(f"checkpoint {checkpoint} holds a {net.variant} network, not {name}")
        if meta.get("include_mask", True) != include_mask:
            raise ConfigError(
                f"checkpoint {checkpoint} was trained with include_pov_mask={meta.get('include_mask')}"
            )
        return DQNAgent(net, include_mask, epsilon)
    raise ConfigError(f"agent: unknown agent {name!r}; valid agents are {', '.join(AGENTS)}")


def _episode_job(args):
    name, include_mask, checkpoint, epsilon, world_cfg, seed, run_id, step_cost = args
    agent = build_agent(name, include_mask, checkpoint, epsilon)
    return play_episode(agent, world_cfg, seed, None, run_id, step_cost)


@dataclass
class ExperimentResult:
    per_run_path: Path
    aggregate_path: Path
    rows: List[MetricsRow]
    aggregate: List[AggregateRow]
    logs: List[EpisodeLog]


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[Path] = None,
                   run_order: Optional[Sequence[int]] = None) -> ExperimentResult:
    """Run ``cfg.runs`` episodes with derived seeds and write both CSVs.

    ``run_order`` only changes the execution order; outputs are always
    assembled by run id.
    """
    cfg.validate()
    out_dir = Path(out_dir) if out_dir is not None else resolve_output(cfg)
    checkpoint = None
    if cfg.agent.startswith("dqn-"):
        checkpoint = str(resolve_checkpoint(cfg, out_dir))
    order = list(run_order) if run_order is not None else list(range(cfg.runs))
    if sorted(order) != list(range(cfg.runs)):
        raise ValueError("run_order must be a permutation of the run ids")
    jobs = [(cfg.agent, cfg.include_pov_mask, checkpoint, cfg.dqn.eval_epsilon, cfg.world,
             derive_seed(cfg.master_seed, i), i, cfg.dqn.step_cost) for i in order]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            logs = list(pool.map(_episode_job, jobs))
    else:
        agent = build_agent(cfg.agent, cfg.include_pov_mask, checkpoint, cfg.dqn.eval_epsilon)
        logs = [play_episode(agent, w, s, None, i, c) for *_, w, s, i, c in jobs]
    logs = [log for _, log in sorted(zip(order, logs), key=lambda p: p[0])]

    rows = [r for log in logs for r in log.rows]
    agg = aggregate(rows, cfg.runs)
    per_run_path = out_dir / PER_RUN_CSV
    aggregate_path = out_dir / AGGREGATE_CSV
    write_text(per_run_path, rows_to_csv(rows, MetricsRow))
    write_text(aggregate_path, rows_to_csv(agg, AggregateRow))
    return ExperimentResult(per_run_path, aggregate_path, rows, agg, logs)


def read_metrics_csv(path) -> List[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for rec in reader:
            out.append(MetricsRow(
                int(rec["run_id"]), int(rec["step"]), int(rec["correct_cells"]),
                float(rec["total_entropy"]), float(rec["cumulative_ig"]),
                int(rec["unique_povs_observed"]), int(rec["agent_x"]), int(rec["agent_y"]),
            ))
    return out


def mean_at_step(rows: Sequence[MetricsRow], step: int, attr: str = "correct_cells") -> np.ndarray:
    """Per-run values of ``attr`` at ``step`` (final row for early-stopped runs)."""
    by_run = {}
    for r in rows:
        if r.step <= step:
            prev = by_run.get(r.run_id)
            if prev is None or r.step > prev.step:
                by_run[r.run_id] = r
    return np.array([getattr(by_run[k], attr) for k in sorted(by_run)], dtype=np.float64)


def train_experiment(cfg: ExperimentConfig, variant: str, include_mask: Optional[bool] = None,
                     out_dir: Optional[Path] = None, progress=None):
    """Train one DQN variant; write its checkpoint and training curve."""
    from .agents import CurveRow, EvalRow, train_dqn
    from .neural import save_checkpoint

    cfg.validate()
    if variant not in ("single", "double"):
        raise ConfigError(f"variant: expected 'single' or 'double', got {variant!r}")
    include_mask = cfg.include_pov_mask if include_mask is None else include_mask
    out_dir = Path(out_dir) if out_dir is not None else resolve_output(cfg)
    result = train_dqn(variant, cfg.dqn, cfg.world, cfg.master_seed, include_mask, progress)
    name = default_checkpoint_name(variant, include_mask)
    ckpt = out_dir / name
    curve = out_dir / name.replace(".ckpt", "-curve.csv")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, result.net, {
        "include_mask": include_mask,
        "seed": cfg.master_seed,
        "world": config_to_dict(cfg)["world"],
        "episodes": cfg.dqn.episodes,
    })
    write_text(curve, rows_to_csv(result.curve, CurveRow))
    if result.evals:
        write_text(out_dir / name.replace(".ckpt", "-eval.csv"), rows_to_csv(result.evals, EvalRow))
    return ckpt, curve, result
