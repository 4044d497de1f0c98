"""Deterministic 2-D point-agent tasks, scripted experts, and demo corpora.

All tasks share one kinematic model: position in the unit square, action
in [-1, 1]^2, displacement = MAX_STEP * action, result clamped to the
square. Observations are flat float vectors; what they contain is the
whole point of the task set:

  reach    - static goal, goal always observed (Markovian); success is
             latched the moment the agent comes within the radius
  dynamic  - goal drifts at a constant velocity from step 16 on; success
             is a tracking deadline, measured against the current goal
             only when the horizon runs out (any open-loop dash through
             the goal's initial position is worthless)
  buttons  - 4 buttons near the corners; the color-to-corner assignment
             is observed ONLY at t=0, and later observations carry no
             trace of press progress (memory is required)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParameterError, ShapeError
from .rng import stream

MAX_STEP = 0.05
SUCCESS_RADIUS = 0.05
DRIFT_SPEED = 0.005
DRIFT_START = 16
CHUNK_STEPS = 4  # actions per plan token; horizons are multiples of this
BUTTONS = np.array([[0.2, 0.2], [0.2, 0.8], [0.8, 0.8], [0.8, 0.2]])
N_COLORS = 4  # fixed press order: color 0, 1, 2, 3

TASKS = ("reach", "dynamic", "button")
ALIASES = {"pointreach": "reach", "point-reach": "reach", "drift": "dynamic",
           "dynamictarget": "dynamic", "buttons": "button", "buttonsequence": "button"}


def canonical_task(name: str) -> str:
    t = ALIASES.get(name.lower(), name.lower())
    if t not in TASKS:
        raise ParameterError(f"unknown task {name!r}; tasks: {TASKS}")
    return t
HORIZONS = {"reach": 64, "dynamic": 64, "button": 128}
OBS_DIMS = {"reach": 4, "dynamic": 4, "button": 2 + N_COLORS * 4}
STATE_DIM = 2
# observation columns that move on their own (the goal); rate-of-change
# features are informative for these, where the agent's own columns change
# at whatever rate the acting policy moves
TRACKED_OBS_DIMS = {"reach": (2, 3), "dynamic": (2, 3), "button": ()}


@dataclass(frozen=True)
class EnvState:
    task: str
    step: int
    agent: np.ndarray            # (2,) position in [0, 1]^2
    goal: np.ndarray             # reach/drift: current goal; buttons: unused
    drift_vel: np.ndarray        # drift: per-step goal velocity after onset
    assignment: np.ndarray       # buttons: color index -> corner index
    progress: int                # buttons: presses completed in color order
    success: bool
    clip_events: int             # how many action components were clamped


@dataclass(frozen=True)
class ToyObservation:
    vector: np.ndarray
    available: bool = True


def _goal_at(initial: np.ndarray, vel: np.ndarray, step: int) -> np.ndarray:
    return initial + vel * max(0, step - DRIFT_START)


def observe(state: EnvState, initial_goal: np.ndarray) -> ToyObservation:
    if state.task in ("reach", "dynamic"):
        goal = _goal_at(initial_goal, state.drift_vel, state.step) \
            if state.task == "dynamic" else state.goal
        vec = np.concatenate([state.agent, goal])
    else:
        onehot = np.zeros((N_COLORS, 4))
        if state.step == 0:
            onehot[np.arange(N_COLORS), state.assignment] = 1.0
        vec = np.concatenate([state.agent, onehot.reshape(-1)])
    return ToyObservation(vector=vec)


class ToyEnv:
    """Stateful wrapper over the pure step function; owns the episode RNG draw."""

    def __init__(self, task: str, seed: int):
        self.task = canonical_task(task)
        self.seed = seed
        self.horizon = HORIZONS[task]
        self.obs_dim = OBS_DIMS[task]
        self._initial_goal = None
        self.state: EnvState | None = None

    def reset(self) -> ToyObservation:
        rng = stream(self.seed, "episode", self.task)
        if self.task == "reach":
            # keep start and goal well separated so the horizon binds
            while True:
                agent = rng.uniform(0.05, 0.95, size=2)
                goal = rng.uniform(0.05, 0.95, size=2)
                if np.linalg.norm(agent - goal) >= 0.8:
                    break
            drift = np.zeros(2)
            assignment = np.zeros(N_COLORS, dtype=np.int64)
        elif self.task == "dynamic":
            agent = rng.uniform(0.05, 0.95, size=2)
            goal = rng.uniform(0.25, 0.75, size=2)
            theta = rng.uniform(0, 2 * np.pi)
            drift = DRIFT_SPEED * np.array([np.cos(theta), np.sin(theta)])
            assignment = np.zeros(N_COLORS, dtype=np.int64)
        else:
            agent = np.array([0.5, 0.5])
            goal = np.zeros(2)
            drift = np.zeros(2)
            assignment = rng.permutation(N_COLORS)
        self._initial_goal = goal.copy()
        self.state = EnvState(task=self.task, step=0, agent=agent, goal=goal,
                              drift_vel=drift, assignment=assignment,
                              progress=0, success=False, clip_events=0)
        return observe(self.state, self._initial_goal)

    @property
    def done(self) -> bool:
        return self.state.success or self.state.step >= self.horizon

    def step(self, action) -> tuple[ToyObservation, bool, bool]:
        """Apply one action. Returns (obs, done, success)."""
        s = env_step(self.state, action, self._initial_goal)
        self.state = s
        return observe(s, self._initial_goal), self.done, s.success


def env_step(state: EnvState, action, initial_goal: np.ndarray) -> EnvState:
    """Pure transition: same (state, action) always yields the same next state."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (2,):
        raise ShapeError(f"action must have shape (2,), got {action.shape}")
    clipped = np.clip(action, -1.0, 1.0)
    clips = int(np.sum(clipped != action))
    agent = np.clip(state.agent + MAX_STEP * clipped, 0.0, 1.0)
    step = state.step + 1
    progress = state.progress
    success = state.success
    goal = state.goal
    if state.task == "reach":
        success = success or np.linalg.norm(agent - goal) < SUCCESS_RADIUS
    elif state.task == "dynamic":
        goal = _goal_at(initial_goal, state.drift_vel, step)
        if step >= HORIZONS["dynamic"]:
            success = success or np.linalg.norm(agent - goal) < SUCCESS_RADIUS
    else:
        if progress < N_COLORS:
            target = BUTTONS[state.assignment[progress]]
            if np.linalg.norm(agent - target) < SUCCESS_RADIUS:
                progress += 1
        success = progress == N_COLORS
    return replace(state, step=step, agent=agent, goal=goal,
                   progress=progress, success=success,
                   clip_events=state.clip_events + clips)


def robot_state(state: EnvState) -> np.ndarray:
    """Proprioception fed to the policy alongside the observation."""
    return state.agent.copy()


# ---- scripted experts ------------------------------------------------------

def expert_action(state: EnvState, initial_goal: np.ndarray) -> np.ndarray:
    """Proportional controller toward the current waypoint, step-capped.

    Emits a zero action once the waypoint is reached (or all buttons are
    pressed). The drifting-goal expert instead leads the goal one action
    chunk at a time: it aims at the goal's position at the next chunk
    boundary and spreads the gap over the steps left in the chunk. From a
    boundary that holds one velocity for the whole chunk, so demo motion is
    piecewise constant at the chunk rate and survives quantization exactly,
    and it lands on the goal at chunk ends, including the deadline. Action
    components always lie in [-1, 1]."""
    if state.task == "button":
        if state.progress >= N_COLORS:
            return np.zeros(2)
        target = BUTTONS[state.assignment[state.progress]]
    elif state.task == "dynamic":
        c_end = CHUNK_STEPS * (state.step // CHUNK_STEPS + 1)
        target = _goal_at(initial_goal, state.drift_vel, c_end)
        remaining = c_end - state.step
        return np.clip((target - state.agent) / (remaining * MAX_STEP),
                       -1.0, 1.0)
    else:
        target = state.goal
    delta = target - state.agent
    dist = np.linalg.norm(delta)
    if dist == 0.0:
        return np.zeros(2)
    if dist <= MAX_STEP:
        return delta / MAX_STEP
    return delta / dist


# ---- observation dropout ----------------------------------------------------

class DropoutWrapper:
    """Marks each step's observation unavailable with probability p.

    The t=0 (reset) observation is never dropped for the buttons task:
    without it no policy, scripted or learned, can know the color order."""

    def __init__(self, env: ToyEnv, p: float, seed: int, protect_first: bool | None = None):
        if not 0.0 <= p <= 1.0:
            raise ParameterError(f"dropout probability must be in [0, 1], got {p}")
        self.env = env
        self.p = p
        self._rng = stream(seed, "obs-dropout", env.task, env.seed)
        self.protect_first = (env.task == "button") if protect_first is None else protect_first

    def __getattr__(self, name):
        return getattr(self.env, name)

    def _veil(self, obs: ToyObservation, first: bool) -> ToyObservation:
        drop = self._rng.random() < self.p
        if first and self.protect_first:
            drop = False
        if not drop:
            return obs
        return ToyObservation(vector=np.zeros_like(obs.vector), available=False)

    def reset(self) -> ToyObservation:
        return self._veil(self.env.reset(), first=True)

    def step(self, action):
        obs, done, success = self.env.step(action)
        return self._veil(obs, first=False), done, success


# ---- demonstrations ----------------------------------------------------------

@dataclass
class Demonstration:
    task: str
    seed: int
    horizon: int
    observations: np.ndarray   # (T, obs_dim) obs before each action
    states: np.ndarray         # (T, 2) proprioception before each action
    actions: np.ndarray        # (T, 2)
    success: bool
    meta: dict = field(default_factory=dict)


def run_expert_episode(task: str, seed: int) -> Demonstration:
    """Roll the expert for the full horizon (it keeps tracking its waypoint
    after success, which pads the demo with on-policy actions).

    Drifting-goal demos inject execution noise: the expert re-aims at every
    chunk boundary and, inside one random chunk interval per episode, a
    per-chunk random offset corrupts the velocity the environment actually
    executes, while the recorded action stays the clean velocity the expert
    intended from the state it saw. The observations then cover the
    off-trajectory states a replanning controller visits, every one labeled
    with the deterministic correction the expert applies there. Confining the
    noise to an interval keeps the rest of each demo a noise-free expert
    trajectory, so outside the interval the whole pending future is a
    deterministic function of the visible state - the object a replanner has
    to generate - instead of a draw against unobservable future noise. The
    noise is white at chunk scale (nothing to imitate by continuing recent
    motion), scaled per episode, and the last three chunks are always clean so
    the executed trajectory still lands; draws that miss anyway are retried on
    a fresh noise stream, which keeps the every-demo-succeeds invariant."""
    env = ToyEnv(task, seed)
    if env.task == "dynamic":
        return _run_noisy_dynamic_episode(seed)
    obs = env.reset()
    obs_log, state_log, act_log = [], [], []
    first_success = None
    for _ in range(env.horizon):
        obs_log.append(obs.vector)
        state_log.append(robot_state(env.state))
        a = expert_action(env.state, env._initial_goal)
        act_log.append(a)
        obs, _, success = env.step(a)
        if success and first_success is None:
            first_success = env.state.step
    return Demonstration(task=task, seed=seed, horizon=env.horizon,
                         observations=np.asarray(obs_log),
                         states=np.asarray(state_log),
                         actions=np.asarray(act_log),
                         success=env.state.success,
                         meta={"steps_to_success": first_success or 0})


def _run_noisy_dynamic_episode(seed: int) -> Demonstration:
    """Drifting-goal demo with per-chunk execution noise (see above)."""
    for attempt in range(32):
        env = ToyEnv("dynamic", seed)
        obs = env.reset()
        n_chunks = env.horizon // CHUNK_STEPS
        nrng = stream(seed, "noise", attempt)
        sigma = nrng.uniform(0.0, 0.4)
        eta = nrng.normal(0.0, sigma, size=(n_chunks, 2))
        s0 = int(nrng.integers(0, n_chunks - 3))
        s1 = min(s0 + 1 + int(nrng.integers(0, 6)), n_chunks - 3)
        eta[:s0] = 0.0
        eta[s1:] = 0.0
        obs_log, state_log, act_log = [], [], []
        first_success = None
        clean = noisy = np.zeros(2)
        for t in range(env.horizon):
            obs_log.append(obs.vector)
            state_log.append(robot_state(env.state))
            if t % CHUNK_STEPS == 0:
                clean = expert_action(env.state, env._initial_goal)
                noisy = np.clip(clean + eta[t // CHUNK_STEPS], -1.0, 1.0)
            act_log.append(clean)
            obs, _, success = env.step(noisy)
            if success and first_success is None:
                first_success = env.state.step
        if env.state.success:
            return Demonstration(task="dynamic", seed=seed, horizon=env.horizon,
                                 observations=np.asarray(obs_log),
                                 states=np.asarray(state_log),
                                 actions=np.asarray(act_log),
                                 success=True,
                                 meta={"steps_to_success": first_success or 0})
    raise RuntimeError(f"expert failed under every noise draw, seed {seed}")


def _button_seed_order(seed: int, count: int) -> list[int]:
    """Episode seeds whose assignments cycle through all 24 orderings."""
    perms = [p for p in _all_permutation_seeds(seed)]
    out = []
    i = 0
    while len(out) < count:
        out.append(perms[i % len(perms)])
        i += 1
    return out


def _all_permutation_seeds(seed: int, search_limit: int = 4000) -> list[int]:
    """One episode seed per distinct color assignment, deterministic scan."""
    found: dict[tuple, int] = {}
    s = seed * 100_003
    probe = 0
    while len(found) < 24 and probe < search_limit:
        cand = s + probe
        assignment = tuple(stream(cand, "episode", "button").permutation(N_COLORS))
        if assignment not in found:
            found[assignment] = cand
        probe += 1
    if len(found) < 24:
        raise RuntimeError("could not cover all 24 button orderings")
    return [found[k] for k in sorted(found)]


def collect_demonstrations(task: str, count: int, seed: int) -> list[Demonstration]:
    """Expert corpus; every demo succeeds. For buttons the episode seeds are
    chosen so the corpus cycles through all 24 color assignments."""
    task = canonical_task(task)
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    if task == "button":
        seeds = _button_seed_order(seed, count)
    else:
        seeds = [seed * 100_003 + i for i in range(count)]
    demos = [run_expert_episode(task, s) for s in seeds]
    bad = [d.seed for d in demos if not d.success]
    if bad:
        raise RuntimeError(f"expert failed on seeds {bad}; task geometry broken")
    return demos
