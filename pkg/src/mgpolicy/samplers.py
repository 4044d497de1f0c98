"""Inference-time samplers: parallel plan generation and confidence-guided
refinement over the masked transformer.

Two execution paradigms share one refinement engine:

  short    a fresh short canvas is sampled from the latest context window
           every few actions (receding horizon, r parallel passes);
  long     one full-horizon canvas is sampled up front, executed in
           bursts, and its pending suffix is re-scored and partially
           resampled whenever a fresh observation arrives (adaptive
           token refinement).

Ablation variants reuse the long loop: "fullseq" never replans, "wosm"
re-masks every pending token instead of a confidence-ranked fraction, and
the scoring policy can substitute stored ("reuse") or uniform ("random")
scores for the fresh posterior. A committed canvas never contains MASK;
positions at or after a sampled END stay as sampled but are excluded from
decoding, scoring, ranking and re-masking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .envs import robot_state
from .errors import ConfigError, ContractError, ParameterError
from .transformer import PassCounter, head_to_vocab, mask_id, vocab_to_head
from .validation import check_fitted

VARIANTS = ("short", "long", "fullseq", "wosm")
SCORINGS = ("atr", "reuse", "random")
_VARIANT_ALIASES = {"mgp-short": "short", "mgp-long": "long",
                    "full-seq": "fullseq", "mgp-full-seq": "fullseq",
                    "full": "fullseq", "wo-sm": "wosm", "without-sm": "wosm",
                    "mgp-wo-sm": "wosm", "mgp-wosm": "wosm"}
_SCORING_ALIASES = {"score-reuse": "reuse", "scorereuse": "reuse"}


def canonical_variant(name: str) -> str:
    v = _VARIANT_ALIASES.get(name.lower(), name.lower())
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; variants: {VARIANTS}")
    return v


def canonical_scoring(name: str) -> str:
    s = _SCORING_ALIASES.get(name.lower(), name.lower())
    if s not in SCORINGS:
        raise ConfigError(f"unknown scoring policy {name!r}; policies: {SCORINGS}")
    return s


@dataclass
class SamplerConfig:
    """Inference knobs shared by every sampling paradigm.

    r counts forward passes per plan for the short sampler and refinement
    passes per replan for the long one. exec_long / exec_short are how
    many primitive actions run between replans; they need not align with
    the 4-actions-per-token granularity because plans are decoded whole
    and sliced, and a token only counts as executed once all of its
    actions are consumed. rank_select exists for the calibration study
    that re-masks the most confident tokens instead of the least.
    """

    r: int = 2
    temperature: float = 1.0
    remask_ratio: float = 0.70
    exec_long: int = 12
    exec_short: int = 5
    variant: str = "long"
    scoring: str = "atr"
    score_every_pass: bool = True
    rank_select: str = "bottom"

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        self.scoring = canonical_scoring(self.scoring)
        if self.r < 1:
            raise ParameterError(f"refinement passes must be >= 1, got {self.r}")
        if self.temperature <= 0.0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.remask_ratio <= 1.0:
            raise ParameterError(
                f"remask ratio must be in [0, 1], got {self.remask_ratio}")
        if min(self.exec_long, self.exec_short) < 1:
            raise ParameterError("execution step lengths must be >= 1")
        if self.rank_select not in ("bottom", "top"):
            raise ParameterError(
                f"rank_select must be 'bottom' or 'top', got {self.rank_select!r}")


# ---- sampling and scoring primitives -----------------------------------------

def gumbel_max_sample(logits, temperature, rng: np.random.Generator):
    """argmax(logits / temperature + Gumbel noise) over the last axis.

    The marginal law of the returned index is softmax(logits / temperature).
    Uniform draws are clamped into the open interval so the double log
    never sees 0 or 1.
    """
    if temperature <= 0.0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    u = np.clip(rng.random(logits.shape), 1e-12, 1.0 - 1e-12)
    return np.argmax(logits / temperature - np.log(-np.log(u)), axis=-1)


def token_scores(head_logits, chosen, codebook_size: int) -> np.ndarray:
    """Confidence of each committed token: softmax(head)[chosen column].

    head_logits (P, K+2), chosen (P,) canvas ids (no MASK). Temperature
    never enters scoring.
    """
    head_logits = np.asarray(head_logits, dtype=np.float64)
    cols = vocab_to_head(chosen, codebook_size)
    probs = softmax(head_logits, axis=-1)
    return probs[np.arange(cols.shape[0]), cols]


def plan_code_length(canvas, codebook_size: int) -> int:
    """Length of the decodable prefix: leading run of codebook ids."""
    canvas = np.asarray(canvas)
    special = np.flatnonzero(canvas >= codebook_size)
    return int(special[0]) if special.size else int(canvas.shape[0])


def remask_lowest(scores, candidates, ratio: float, select: str = "bottom"):
    """Bitmap of floor(ratio * count) candidates with the lowest scores.

    At least one position is picked whenever any candidate exists and
    ratio > 0, so refinement always makes progress. Ties fall to the
    earlier position. select="top" ranks from the highest score instead.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"remask ratio must be in [0, 1], got {ratio}")
    if select not in ("bottom", "top"):
        raise ParameterError(f"select must be 'bottom' or 'top', got {select!r}")
    candidates = np.asarray(candidates, dtype=bool)
    bitmap = np.zeros(candidates.shape, dtype=bool)
    idx = np.flatnonzero(candidates)
    if idx.size == 0 or ratio == 0.0:
        return bitmap
    # nudge so exact fractions (0.5 * 4) never truncate one short
    n = max(int(ratio * idx.size + 1e-9), 1)
    keyed = np.asarray(scores, dtype=np.float64)[idx]
    order = np.argsort(keyed if select == "bottom" else -keyed, kind="stable")
    bitmap[idx[order[:n]]] = True
    return bitmap


def score_and_remask(head_logits, chosen, pending, ratio: float,
                     codebook_size: int, select: str = "bottom"):
    """Rank committed tokens by softmax confidence, re-mask the chosen
    fraction of the pending set. Returns the boolean bitmap."""
    scores = token_scores(head_logits, np.asarray(chosen, dtype=np.int64),
                          codebook_size)
    return remask_lowest(scores, pending, ratio, select=select)


@dataclass
class ConfidenceScores:
    """Per-position confidence of a committed canvas under one context.

    scores are plain softmax probabilities (in [0, 1]) for every
    position; pending marks the rankable set (not yet executed, before
    any END); executed positions are flagged and never ranked.
    """

    scores: np.ndarray
    pending: np.ndarray
    executed: np.ndarray


def posterior_confidence(model, canvas, context, executed_tokens: int,
                         positions=None, counter=None) -> ConfidenceScores:
    """Re-evaluate every committed token under a new context window.

    One forward pass with the full canvas visible. The score at n is the
    softmax probability of the token currently at n; executed positions
    and positions at or past an END are excluded from the pending set.
    """
    canvas = np.asarray(canvas, dtype=np.int64)
    K = model.codebook_size_
    if (canvas == mask_id(K)).any():
        raise ContractError("confidence scoring expects a fully committed canvas")
    logits = model.forward_logits(canvas[None], context, positions=positions,
                                  counter=counter, kind="score")[0]
    scores = token_scores(logits, canvas, K)
    idx = np.arange(canvas.shape[0])
    executed = idx < executed_tokens
    pending = ~executed & (idx < plan_code_length(canvas, K))
    return ConfidenceScores(scores=scores, pending=pending, executed=executed)


# ---- refinement engine --------------------------------------------------------

@dataclass
class PassRecord:
    """One refinement pass: which positions were resampled, canvas before
    and after."""

    bitmap: np.ndarray
    before: np.ndarray
    after: np.ndarray


def _sample_into(model, canvas, bitmap, context, positions, cfg, rng, counter,
                 kind, stored):
    """One forward pass; Gumbel-resample the bitmap positions in place.

    The forward always runs (pass accounting stays exact even for an
    empty bitmap). stored picks up each sampled token's own softmax
    confidence. Returns (masked_committed, flipped): how many re-masked
    positions held a committed token and how many of those changed.
    """
    K = model.codebook_size_
    previous = canvas[bitmap].copy()
    canvas[bitmap] = mask_id(K)
    logits = model.forward_logits(canvas[None], context, positions=positions,
                                  counter=counter, kind=kind)[0]
    if previous.size == 0:
        return 0, 0
    z = logits[bitmap]
    pick = z.copy()
    pick[:, -1] = -np.inf  # PAD is structural filler, never a sampled token
    cols = gumbel_max_sample(pick, cfg.temperature, rng)
    ids = head_to_vocab(cols, K)
    canvas[bitmap] = ids
    stored[bitmap] = softmax(z, axis=-1)[np.arange(cols.shape[0]), cols]
    committed = previous != mask_id(K)
    flipped = int((ids[committed] != previous[committed]).sum())
    return int(committed.sum()), flipped


def _refinement_loop(model, canvas, positions, context, cfg, rng, counter, *,
                     passes, candidates, scores, stored, kind,
                     full_first=False, full_every=False):
    """Run `passes` forward passes over a shrinking re-mask pool.

    candidates is the initial pool; scores rank it (ignored whenever the
    whole pool is re-masked). After each pass the pool becomes the
    positions just resampled, still inside the decodable prefix, ranked
    by their fresh sampling confidence (or by the entry scores when
    score_every_pass is off). The canvas is edited in place; positions
    outside each pass's bitmap are never touched.
    """
    K = model.codebook_size_
    idx = np.arange(canvas.shape[0])
    records = []
    masked_committed = 0
    flipped = 0
    ranking = scores
    for k in range(passes):
        if full_every or (full_first and k == 0):
            bitmap = candidates.copy()
        else:
            bitmap = remask_lowest(ranking, candidates, cfg.remask_ratio,
                                   select=cfg.rank_select)
        before = canvas.copy()
        mc, fl = _sample_into(model, canvas, bitmap, context, positions, cfg,
                              rng, counter, kind, stored)
        masked_committed += mc
        flipped += fl
        records.append(PassRecord(bitmap=bitmap, before=before,
                                  after=canvas.copy()))
        candidates = bitmap & (idx < plan_code_length(canvas, K))
        if cfg.score_every_pass:
            ranking = stored
    return records, masked_committed, flipped


def generate_plan(model, context, cfg, rng, *, n_tokens=None, positions=None,
                  passes=None, counter=None, kind="sample"):
    """Parallel plan generation from an all-MASK canvas.

    Pass 1 samples every position; each later pass re-masks the
    lowest-confidence fraction of the freshly sampled set and resamples
    it. Exactly `passes` forward passes (default cfg.r) regardless of
    plan length. Returns (canvas, scores, pass records, masked_committed,
    flipped).
    """
    check_fitted(model, "params_")
    K = model.codebook_size_
    n = model.short_tokens if n_tokens is None else int(n_tokens)
    if positions is None:
        positions = np.arange(n)
    canvas = np.full(n, mask_id(K), dtype=np.int64)
    stored = np.zeros(n, dtype=np.float64)
    records, mc, fl = _refinement_loop(
        model, canvas, positions, context, cfg, rng, counter,
        passes=cfg.r if passes is None else passes,
        candidates=np.ones(n, dtype=bool), scores=stored, stored=stored,
        kind=kind, full_first=True)
    return canvas, stored, records, mc, fl


def autoregressive_decode(model, context, n_tokens: int, cfg, rng,
                          counter=None, positions=None):
    """Left-to-right reference decoder: one forward pass per position.

    Latency baseline only; always spends n_tokens passes."""
    check_fitted(model, "params_")
    K = model.codebook_size_
    canvas = np.full(n_tokens, mask_id(K), dtype=np.int64)
    if positions is None:
        positions = np.arange(n_tokens)
    for i in range(n_tokens):
        logits = model.forward_logits(canvas[None], context,
                                      positions=positions, counter=counter,
                                      kind="ar")[0]
        pick = logits[i].copy()
        pick[-1] = -np.inf
        col = gumbel_max_sample(pick, cfg.temperature, rng)
        canvas[i] = head_to_vocab(np.asarray([col]), K)[0]
    return canvas


# ---- execution state and replanning -------------------------------------------

@dataclass
class ExecutionState:
    """Mutable long-horizon plan: the committed canvas, how much of it has
    been consumed, and each token's stored confidence from its last
    sampling or scoring. The executed prefix is immutable."""

    canvas: np.ndarray
    positions: np.ndarray
    scores: np.ndarray
    executed_tokens: int = 0
    consumed_actions: int = 0

    def code_length(self, codebook_size: int) -> int:
        return plan_code_length(self.canvas, codebook_size)

    def pending(self, codebook_size: int) -> np.ndarray:
        idx = np.arange(self.canvas.shape[0])
        return (idx >= self.executed_tokens) & (idx < self.code_length(codebook_size))


@dataclass
class ReplanRecord:
    """Everything one replan did: ranking scores at entry, per-pass
    bitmaps, canvas before/after, flip counts."""

    env_step: int
    executed_tokens: int
    consumed_actions: int
    observation: np.ndarray | None
    scores: np.ndarray
    pending: np.ndarray
    canvas_before: np.ndarray
    canvas_after: np.ndarray
    passes: list
    masked_committed: int
    flipped: int


def atr_refine(model, state: ExecutionState, context, cfg, rng, counter=None,
               env_step: int = -1, observation=None) -> ReplanRecord:
    """One replan: score the pending suffix, re-mask the chosen fraction,
    resample for cfg.r passes. Executed tokens condition every pass but
    never change.

    Scoring policies: "atr" spends one forward pass re-evaluating every
    token under the new context; "reuse" ranks by the scores stored at
    each token's last sampling; "random" ranks by fresh uniform draws.
    The wosm variant skips ranking and re-masks the whole pending set on
    every pass.
    """
    n = state.canvas.shape[0]
    pending = state.pending(model.codebook_size_)
    if cfg.variant == "wosm":
        entry = np.full(n, np.nan)
    elif cfg.scoring == "atr":
        conf = posterior_confidence(model, state.canvas, context,
                                    state.executed_tokens,
                                    positions=state.positions, counter=counter)
        entry = conf.scores
        state.scores = np.where(pending, entry, state.scores)
    elif cfg.scoring == "reuse":
        entry = state.scores.copy()
    else:
        entry = rng.random(n)
    before = state.canvas.copy()
    records, mc, fl = _refinement_loop(
        model, state.canvas, state.positions, context, cfg, rng, counter,
        passes=cfg.r, candidates=pending, scores=entry, stored=state.scores,
        kind="refine", full_every=cfg.variant == "wosm")
    return ReplanRecord(
        env_step=env_step, executed_tokens=state.executed_tokens,
        consumed_actions=state.consumed_actions,
        observation=None if observation is None
        else np.asarray(observation, dtype=np.float64).copy(),
        scores=np.asarray(entry, dtype=np.float64).copy(),
        pending=pending, canvas_before=before,
        canvas_after=state.canvas.copy(), passes=records,
        masked_committed=mc, flipped=fl)


# ---- plans and rollouts --------------------------------------------------------

@dataclass
class ShortPlan:
    """A receding-horizon plan plus its decoded actions. terminate is set
    when an END truncated the canvas (an END at position 0 leaves the
    action list empty: the policy believes the episode is over)."""

    tokens: np.ndarray
    scores: np.ndarray
    actions: np.ndarray
    terminate: bool
    records: list
    masked_committed: int
    flipped: int


def mgp_short_plan(model, context, cfg, rng, counter=None,
                   n_tokens=None) -> ShortPlan:
    """Sample a fresh short canvas with exactly cfg.r forward passes."""
    canvas, stored, records, mc, fl = generate_plan(
        model, context, cfg, rng, n_tokens=n_tokens, counter=counter,
        kind="plan")
    K = model.codebook_size_
    e = plan_code_length(canvas, K)
    if e:
        actions = model.tokenizer.inverse_transform(canvas[None, :e])[0]
    else:
        actions = np.zeros((0, model.tokenizer.action_dim_))
    return ShortPlan(tokens=canvas, scores=stored, actions=actions,
                     terminate=e < canvas.shape[0], records=records,
                     masked_committed=mc, flipped=fl)


@dataclass
class RolloutTrace:
    """Per-episode record: every replan, every executed action, exact
    forward-pass counts, and the flip-rate tallies."""

    task: str
    variant: str
    scoring: str
    n_tokens: int
    success: bool = False
    env_steps: int = 0
    hold_steps: int = 0
    skipped_replans: int = 0
    initial_step: int = -1
    actions: np.ndarray | None = None
    plans: list = field(default_factory=list)
    replans: list = field(default_factory=list)
    masked_committed: int = 0
    flipped: int = 0
    passes: PassCounter = field(default_factory=PassCounter)
    error: str | None = None

    @property
    def flip_rate(self) -> float:
        """Flips per re-masked committed token; 0.0 when none were masked."""
        return self.flipped / self.masked_committed if self.masked_committed else 0.0


class ObservationHistory:
    """Rolling source of conditioning windows during a rollout.

    Keeps every robot state but only the observations that actually
    arrived. Windows repeat their oldest entry when history is short,
    the same padding training windows use at an episode start; the
    observation window stays all zeros until the first observation.
    """

    def __init__(self, steps: int, obs_dim: int, state_dim: int):
        self.steps = steps
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self._obs: list[np.ndarray] = []
        self._states: list[np.ndarray] = []

    def push(self, obs, state):
        if obs.available:
            self._obs.append(np.asarray(obs.vector, dtype=np.float64))
        self._states.append(np.asarray(state, dtype=np.float64))

    def _window(self, entries, dim):
        if not entries:
            return np.zeros((1, self.steps, dim))
        tail = entries[-self.steps:]
        return np.stack([tail[0]] * (self.steps - len(tail)) + tail)[None]

    def windows(self):
        """((1, T, obs_dim), (1, T, state_dim)) conditioning windows."""
        return (self._window(self._obs, self.obs_dim),
                self._window(self._states, self.state_dim))


def rollout_episode(env, model, cfg: SamplerConfig, rng) -> RolloutTrace:
    """Run one closed-loop episode with the configured paradigm.

    The environment owns the episode; rng drives only the sampler, so
    concurrent rollouts with private streams reproduce sequential runs.
    An environment fault truncates the trace with an error tag instead
    of propagating.
    """
    check_fitted(model, "params_")
    if model.tokenizer is None:
        raise ParameterError("a fitted tokenizer is required to decode plans")
    check_fitted(model.tokenizer, "codes_")
    if cfg.variant == "short":
        return _short_rollout(env, model, cfg, rng)
    if cfg.variant in ("long", "fullseq", "wosm"):
        return _long_rollout(env, model, cfg, rng)
    raise ConfigError(f"unknown variant {cfg.variant!r}; variants: {VARIANTS}")


def _env_step(env, action, trace):
    try:
        return env.step(action)
    except Exception as e:
        trace.error = f"{type(e).__name__}: {e}"
        return None


def _wait_for_observation(env, hist, trace, actions, zero):
    """Hold (zero action) until an observation arrives; planning needs a
    real context window. Returns the last observation."""
    obs = None
    try:
        obs = env.reset()
    except Exception as e:
        trace.error = f"{type(e).__name__}: {e}"
        return obs
    hist.push(obs, robot_state(env.state))
    while not obs.available and not env.done:
        step = _env_step(env, zero, trace)
        if step is None:
            return obs
        obs = step[0]
        hist.push(obs, robot_state(env.state))
        actions.append(zero.copy())
        trace.hold_steps += 1
    return obs


def _finalize(trace, env, actions, action_dim):
    if env.state is not None:
        trace.success = bool(env.state.success)
        trace.env_steps = int(env.state.step)
    trace.actions = (np.asarray(actions) if actions
                     else np.zeros((0, action_dim)))
    return trace


def _long_rollout(env, model, cfg, rng):
    K, N, chunk = model.codebook_size_, model.n_tokens_, model.chunk_
    trace = RolloutTrace(task=env.task, variant=cfg.variant,
                         scoring=cfg.scoring, n_tokens=N)
    hist = ObservationHistory(model.context_steps, model.obs_dim_,
                              model.state_dim_)
    dim = model.tokenizer.action_dim_
    zero = np.zeros(dim)
    actions: list[np.ndarray] = []
    obs = _wait_for_observation(env, hist, trace, actions, zero)
    if trace.error is not None or env.done or not obs.available:
        return _finalize(trace, env, actions, dim)

    canvas, stored, _, mc, fl = generate_plan(
        model, hist.windows(), cfg, rng, n_tokens=N,
        passes=cfg.r if cfg.variant == "fullseq" else 1,
        counter=trace.passes, kind="sample")
    state = ExecutionState(canvas=canvas, positions=np.arange(N), scores=stored)
    trace.initial_step = int(env.state.step)
    trace.plans.append(canvas.copy())
    trace.masked_committed += mc
    trace.flipped += fl

    while not env.done and trace.error is None:
        e = state.code_length(K)
        if state.consumed_actions >= chunk * e:
            break  # plan exhausted at an END
        decoded = model.tokenizer.inverse_transform(state.canvas[None, :e])[0]
        burst = decoded[state.consumed_actions:
                        state.consumed_actions + cfg.exec_long]
        for a in burst:
            step = _env_step(env, a, trace)
            if step is None:
                break
            obs = step[0]
            state.consumed_actions += 1
            hist.push(obs, robot_state(env.state))
            actions.append(np.asarray(a, dtype=np.float64))
            if env.done:
                break
        state.executed_tokens = state.consumed_actions // chunk
        if env.done or trace.error is not None:
            break
        if cfg.variant == "fullseq":
            continue  # open loop: the initial plan is never revisited
        if state.consumed_actions >= chunk * state.code_length(K):
            break  # plan exhausted at an END; nothing pending to refine
        if not obs.available:
            trace.skipped_replans += 1
            continue  # keep executing the standing plan; no fresh context
        record = atr_refine(model, state, hist.windows(), cfg, rng,
                            counter=trace.passes, env_step=int(env.state.step),
                            observation=obs.vector)
        trace.replans.append(record)
        trace.plans.append(state.canvas.copy())
        trace.masked_committed += record.masked_committed
        trace.flipped += record.flipped
    return _finalize(trace, env, actions, dim)


def _short_rollout(env, model, cfg, rng):
    trace = RolloutTrace(task=env.task, variant="short", scoring=cfg.scoring,
                         n_tokens=model.short_tokens)
    hist = ObservationHistory(model.context_steps, model.obs_dim_,
                              model.state_dim_)
    dim = model.tokenizer.action_dim_
    zero = np.zeros(dim)
    actions: list[np.ndarray] = []
    try:
        obs = env.reset()
    except Exception as e:
        trace.error = f"{type(e).__name__}: {e}"
        return _finalize(trace, env, actions, dim)
    hist.push(obs, robot_state(env.state))

    while not env.done and trace.error is None:
        if not obs.available:
            # hold policy: no fresh observation, no motion
            step = _env_step(env, zero, trace)
            if step is None:
                break
            obs = step[0]
            hist.push(obs, robot_state(env.state))
            actions.append(zero.copy())
            trace.hold_steps += 1
            continue
        plan = mgp_short_plan(model, hist.windows(), cfg, rng,
                              counter=trace.passes)
        trace.plans.append(plan.tokens.copy())
        trace.masked_committed += plan.masked_committed
        trace.flipped += plan.flipped
        trace.replans.append(ReplanRecord(
            env_step=int(env.state.step), executed_tokens=0,
            consumed_actions=len(actions), observation=obs.vector.copy(),
            scores=plan.scores.copy(),
            pending=np.ones(plan.tokens.shape[0], dtype=bool),
            canvas_before=np.full(plan.tokens.shape[0],
                                  mask_id(model.codebook_size_), dtype=np.int64),
            canvas_after=plan.tokens.copy(), passes=plan.records,
            masked_committed=plan.masked_committed, flipped=plan.flipped))
        if plan.actions.shape[0] == 0:
            break  # empty plan: episode-termination intent
        interrupted = False
        for a in plan.actions[:cfg.exec_short]:
            step = _env_step(env, a, trace)
            if step is None:
                break
            obs = step[0]
            hist.push(obs, robot_state(env.state))
            actions.append(np.asarray(a, dtype=np.float64))
            if env.done:
                break
            if not obs.available:
                interrupted = True  # a dropout aborts the clip
                break
        if env.done or trace.error is not None:
            break
        if plan.terminate and not interrupted:
            break  # the plan ended with END: the policy is done
    return _finalize(trace, env, actions, dim)
