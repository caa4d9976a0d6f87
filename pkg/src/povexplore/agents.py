"""Policies, state encoding, replay and the DQN training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import belief as bel
from .belief import BeliefState, entropy_drop
from .neural import AdamState, QNetwork, adam_step, build_network, clone_network, huber_loss
from .seeding import STREAM_AGENT, STREAM_EVAL, STREAM_INIT, STREAM_TRAIN, STREAM_WORLD, derive_seed
from .world import (
    ACTIONS,
    NUM_POVS,
    Action,
    GridWorld,
    Pos,
    WorldConfig,
    admissible_actions,
    admissible_mask,
    apply_action,
    generate_world,
    observable_povs,
    sense,
    true_target_map,
)

EARLY_STOP_BITS = 1e-6


def num_channels(t_max: int, include_mask: bool = True) -> int:
    return (t_max + 1) + 1 + (NUM_POVS if include_mask else 0) + 1


def encode_state(belief: BeliefState, pos: Pos, window_size: int = 3, include_mask: bool = True) -> np.ndarray:
    """Agent-centred ``(C, W, W)`` window over the belief.

    Channel order: P(t=k) for k = 0..t_max, entropy / log2(t_max + 1), the nine
    "still unobserved" POV flags (omitted when ``include_mask`` is False), and
    an off-grid flag. Off-grid pixels are zero except for the last channel.
    A POV flag is 1 only if that view is still to come: POVs whose viewer
    would stand off the grid read 0, like ones already seen.
    """
    if window_size < 1 or window_size % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {window_size}")
    nt = belief.t_max + 1
    c = num_channels(belief.t_max, include_mask)
    r = window_size // 2
    out = np.zeros((c, window_size, window_size))
    out[-1] = 1.0

    x, y = pos
    x0, x1 = max(x - r, 0), min(x + r + 1, belief.width)
    y0, y1 = max(y - r, 0), min(y + r + 1, belief.height)
    wx0, wy0 = x0 - (x - r), y0 - (y - r)
    sl = (slice(wy0, wy0 + y1 - y0), slice(wx0, wx0 + x1 - x0))

    out[(slice(0, nt),) + sl] = belief.probs[y0:y1, x0:x1].transpose(2, 0, 1)
    norm = math.log2(nt)
    if norm > 0:
        out[(nt,) + sl] = belief.entropy_map[y0:y1, x0:x1] / norm
    if include_mask:
        pending = ~belief.mask[y0:y1, x0:x1] & observable_povs(belief.width, belief.height)[y0:y1, x0:x1]
        out[(slice(nt + 1, nt + 1 + NUM_POVS),) + sl] = pending.transpose(2, 0, 1)
    out[(-1,) + sl] = 0.0
    return out


def random_action(admissible: Sequence[Action], rng: np.random.Generator) -> Action:
    admissible = list(admissible)
    if not admissible:
        raise ValueError("no admissible actions")
    return Action(admissible[int(rng.integers(len(admissible)))])


def ig_scores(belief: BeliefState, pos: Pos, config: WorldConfig) -> np.ndarray:
    """Expected IG per action; inadmissible actions get -inf."""
    scores = np.full(len(ACTIONS), -np.inf)
    for a in admissible_actions(pos, config):
        scores[a] = bel.expected_ig(belief, pos, a, config).ig
    return scores


def greedy_ig_action(belief: BeliefState, pos: Pos, config: WorldConfig) -> Action:
    # np.argmax returns the first maximum, i.e. canonical-order tie-break
    return Action(int(np.argmax(ig_scores(belief, pos, config))))


def masked_argmax(q: np.ndarray, admissible: np.ndarray) -> int:
    return int(np.argmax(np.where(admissible, q, -np.inf)))


def select_action(qnet: QNetwork, state, epsilon: float, admissible, rng: np.random.Generator) -> Action:
    """Epsilon-greedy over admissible actions; ``admissible`` is a list of actions or a bool mask."""
    adm = np.asarray(admissible)
    if adm.dtype != bool:
        m = np.zeros(len(ACTIONS), dtype=bool)
        m[adm.astype(int)] = True
        adm = m
    if not adm.any():
        raise ValueError("no admissible actions")
    if epsilon > 0 and rng.random() < epsilon:
        return random_action([a for a in ACTIONS if adm[a]], rng)
    return Action(masked_argmax(qnet.forward(state), adm))


def compute_reward(belief_before: BeliefState, belief_after: BeliefState, step_cost: float) -> float:
    return entropy_drop(belief_before, belief_after) - step_cost


# -- agents -----------------------------------------------------------------


class RandomAgent:
    name = "random"

    def act(self, belief: BeliefState, pos: Pos, config: WorldConfig, rng: np.random.Generator) -> Action:
        return random_action(admissible_actions(pos, config), rng)


class GreedyIGAgent:
    name = "greedy-ig"

    def act(self, belief, pos, config, rng):
        return greedy_ig_action(belief, pos, config)


class DQNAgent:
    def __init__(self, net: QNetwork, include_mask: bool = True, epsilon: float = 0.0):
        self.net = net
        self.include_mask = include_mask
        self.epsilon = epsilon
        self.windows = net.spec()["windows"]
        self.name = f"dqn-{net.variant}"

    def encode(self, belief: BeliefState, pos: Pos):
        return tuple(encode_state(belief, pos, w, self.include_mask) for w in self.windows)

    def act(self, belief, pos, config, rng):
        return select_action(self.net, self.encode(belief, pos), self.epsilon,
                             admissible_mask(pos, config), rng)


@dataclass
class StepResult:
    action: Action
    pos: Pos
    reward: float
    belief: BeliefState
    new_povs: int
    ig: float


def run_policy_step(agent, world: GridWorld, belief: BeliefState, rng: np.random.Generator,
                    step_cost: float = 0.0) -> StepResult:
    """One perceive-decide-act-update cycle; moves ``world.agent_pos``."""
    config = world.config
    pos = world.agent_pos
    action = agent.act(belief, pos, config, rng)
    new_pos = apply_action(pos, action, config)
    after = bel.update(belief, sense(world, new_pos), config.p_vis)
    world.agent_pos = new_pos
    return StepResult(
        action=action,
        pos=new_pos,
        reward=compute_reward(belief, after, step_cost),
        belief=after,
        new_povs=after.unique_povs_observed() - belief.unique_povs_observed(),
        ig=entropy_drop(belief, after),
    )


# -- DQN ----------------------------------------------------------------------


@dataclass
class DQNConfig:
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 50_000
    batch_size: int = 64
    buffer_capacity: int = 50_000
    target_sync: int = 500
    learning_starts: int = 1_000
    train_every: int = 4
    step_cost: float = 0.01
    lr: float = 1e-3
    huber_delta: float = 1.0
    episodes: int = 300
    # every eval_every episodes (0 = never), play eval_runs held-out episodes with the current net
    eval_every: int = 0
    eval_runs: int = 5
    # exploration rate of the trained policy when evaluated; 0 is purely greedy
    eval_epsilon: float = 0.0

    def validate(self):
        from .errors import ConfigError

        if not (0.0 < self.gamma < 1.0):
            raise ConfigError(f"gamma: must lie in (0, 1), got {self.gamma!r}")
        for name in ("eps_start", "eps_end", "eval_epsilon"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name}: must lie in [0, 1], got {v!r}")
        if self.eps_end > self.eps_start:
            raise ConfigError("eps_end: must not exceed eps_start")
        for name in ("batch_size", "buffer_capacity", "target_sync", "train_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        for name in ("eps_decay_steps", "learning_starts", "episodes", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.eval_runs < 1:
            raise ConfigError("eval_runs: must be >= 1")
        if self.batch_size > self.buffer_capacity:
            raise ConfigError("batch_size: must not exceed buffer_capacity")
        if self.lr <= 0 or self.huber_delta <= 0:
            raise ConfigError("lr and huber_delta must be positive")
        if self.step_cost < 0:
            raise ConfigError("step_cost: must be >= 0")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def epsilon_at(step: int, cfg: DQNConfig) -> float:
    """Linear decay from eps_start to eps_end over eps_decay_steps, then flat."""
    if cfg.eps_decay_steps <= 0 or step >= cfg.eps_decay_steps:
        return cfg.eps_end
    frac = step / cfg.eps_decay_steps
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions stored in preallocated arrays."""

    def __init__(self, capacity: int, state_shapes: Sequence[Tuple[int, ...]]):
        self.capacity = capacity
        self.states = [np.zeros((capacity,) + tuple(s)) for s in state_shapes]
        self.next_states = [np.zeros((capacity,) + tuple(s)) for s in state_shapes]
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_admissible = np.zeros((capacity, len(ACTIONS)), dtype=bool)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.pushed = 0

    def __len__(self):
        return min(self.pushed, self.capacity)

    def push(self, state, action, reward, next_state, next_admissible, terminal):
        i = self.pushed % self.capacity
        for buf, s in zip(self.states, state):
            buf[i] = s
        for buf, s in zip(self.next_states, next_state):
            buf[i] = s
        self.actions[i] = int(action)
        self.rewards[i] = reward
        self.next_admissible[i] = next_admissible
        self.terminal[i] = terminal
        self.pushed += 1

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.choice(len(self), size=batch_size, replace=False)
        return (
            tuple(b[idx] for b in self.states),
            self.actions[idx],
            self.rewards[idx],
            tuple(b[idx] for b in self.next_states),
            self.next_admissible[idx],
            self.terminal[idx],
        )


def td_update(net: QNetwork, target: QNetwork, batch, cfg: DQNConfig, opt: AdamState) -> float:
    states, actions, rewards, next_states, next_adm, terminal = batch
    q_next = target.forward(next_states)
    best_next = np.max(np.where(next_adm, q_next, -np.inf), axis=1)
    y = rewards + cfg.gamma * np.where(terminal, 0.0, best_next)
    q = net.forward(states)
    rows = np.arange(len(actions))
    loss, dl = huber_loss(q[rows, actions], y, cfg.huber_delta)
    dq = np.zeros_like(q)
    dq[rows, actions] = dl / len(actions)
    grads = net.backward(dq)
    adam_step(net.params, grads, opt)
    return float(np.mean(loss))


def init_network(variant: str, world_config: WorldConfig, seed: int, include_mask: bool = True) -> QNetwork:
    rng = np.random.default_rng(derive_seed(seed, STREAM_INIT))
    return build_network(variant, num_channels(world_config.t_max, include_mask), rng)


@dataclass
class CurveRow:
    episode: int
    env_steps: int
    epsilon: float
    episode_return: float
    initial_entropy: float
    final_entropy: float
    steps: int
    final_correct_cells: int
    mean_loss: float


@dataclass
class EvalRow:
    episode: int
    env_steps: int
    correct_cells_mean: float
    total_entropy_mean: float


@dataclass
class TrainResult:
    net: QNetwork
    curve: List[CurveRow] = field(default_factory=list)
    include_mask: bool = True
    evals: List[EvalRow] = field(default_factory=list)


def evaluate_policy(agent, world_config: WorldConfig, seeds: Sequence[int]) -> Tuple[float, float]:
    """Mean final correct cells and total entropy over one episode per seed."""
    correct, entropy = [], []
    for seed in seeds:
        world = generate_world(world_config, seed)
        belief = bel.init_belief(world_config)
        rng = agent_rng(seed)
        for _ in range(world_config.max_steps):
            if bel.total_entropy(belief) < EARLY_STOP_BITS:
                break
            belief = run_policy_step(agent, world, belief, rng).belief
        correct.append(bel.correct_count(bel.predict_map(belief), true_target_map(world)))
        entropy.append(bel.total_entropy(belief))
    return math.fsum(correct) / len(seeds), math.fsum(entropy) / len(seeds)


def train_dqn(variant: str, config: DQNConfig, world_config: WorldConfig, seed: int,
              include_mask: bool = True, progress=None) -> TrainResult:
    """Standard DQN with replay and a periodically synced target network.

    Each episode runs on a fresh world seeded from ``seed``; the whole run is
    a deterministic function of its arguments.
    """
    config.validate()
    net = init_network(variant, world_config, seed, include_mask)
    target = clone_network(net)
    agent = DQNAgent(net, include_mask)
    opt = AdamState(lr=config.lr)
    rng = np.random.default_rng(derive_seed(seed, STREAM_TRAIN))
    world_master = derive_seed(seed, STREAM_WORLD)
    eval_master = derive_seed(seed, STREAM_EVAL)
    eval_seeds = [derive_seed(eval_master, i) for i in range(config.eval_runs)]
    buffer = ReplayBuffer(config.buffer_capacity, net.input_shapes())
    result = TrainResult(net, include_mask=include_mask)
    env_steps = 0

    for ep in range(config.episodes):
        world = generate_world(world_config, derive_seed(world_master, ep))
        belief = bel.init_belief(world_config)
        pos = world.agent_pos
        state = agent.encode(belief, pos)
        h0 = bel.total_entropy(belief)
        ep_return = 0.0
        losses = []
        steps = 0
        eps = epsilon_at(env_steps, config)
        for _ in range(world_config.max_steps):
            eps = epsilon_at(env_steps, config)
            action = select_action(net, state, eps, admissible_mask(pos, world_config), rng)
            pos = apply_action(pos, action, world_config)
            after = bel.update(belief, sense(world, pos), world_config.p_vis)
            reward = compute_reward(belief, after, config.step_cost)
            belief = after
            terminal = bel.total_entropy(belief) < EARLY_STOP_BITS
            next_state = agent.encode(belief, pos)
            buffer.push(state, action, reward, next_state, admissible_mask(pos, world_config), terminal)
            state = next_state
            ep_return += reward
            env_steps += 1
            steps += 1
            if env_steps % config.train_every == 0 and len(buffer) >= max(config.learning_starts, config.batch_size):
                losses.append(td_update(net, target, buffer.sample(config.batch_size, rng), config, opt))
            if env_steps % config.target_sync == 0:
                target.set_params(net.params)
            if terminal:
                break
        correct = bel.correct_count(bel.predict_map(belief), true_target_map(world))
        row = CurveRow(ep, env_steps, eps, ep_return, h0, bel.total_entropy(belief), steps, correct,
                       float(np.mean(losses)) if losses else 0.0)
        result.curve.append(row)
        if progress is not None:
            progress(row)
        if config.eval_every and (ep + 1) % config.eval_every == 0:
            evaluator = DQNAgent(net, include_mask, config.eval_epsilon)
            mean_c, mean_h = evaluate_policy(evaluator, world_config, eval_seeds)
            result.evals.append(EvalRow(ep, env_steps, mean_c, mean_h))
    return result


def agent_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, STREAM_AGENT))
