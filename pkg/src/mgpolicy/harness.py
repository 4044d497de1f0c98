"""Experiment orchestration: two-stage training, evaluation campaigns,
confidence and flip-rate analyses, and deterministic report files.

Every artifact is stamped with a config hash and regenerates
bit-identically from (config, seed); wall-clock numbers, which cannot be
deterministic, go to a separate machine-tagged timing file that is
excluded from that guarantee. Forward passes are counted at the single
choke-point where the transformer runs, so latency proxies are exact
integers rather than measurements.
"""

from __future__ import annotations

import csv
import platform
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .envs import (DRIFT_START, MAX_STEP, TRACKED_OBS_DIMS, DropoutWrapper,
                   ToyEnv, collect_demonstrations)
from .errors import (CompatibilityError, ConfigError, ParameterError,
                     StorageError, TrainingError)
from .persist import load_checkpoint, load_corpus, save_checkpoint, save_corpus
from .rng import stream
from .samplers import canonical_scoring, canonical_variant, rollout_episode
from .tokenizer import ActionTokenizer
from .transformer import MaskedGenerativePolicy, corrupt, vocab_to_head

# episode seeds for evaluation live far from the demo seed range
# (collect uses seed * 100003 + i) so campaigns never replay the corpus
EVAL_SEED_BASE = 900_000_000
HELDOUT_SEED_SALT = 104_729

FILES = {
    "corpus": "corpus.bin",
    "tokenizer": "tokenizer.ckpt",
    "tokenizer_loss": "tokenizer_loss.csv",
    "stage1_report": "stage1_report.csv",
    "mgt": "mgt.ckpt",
    "mgt_loss": "mgt_loss.csv",
    "periodic_eval": "periodic_eval.csv",
    "eval_report": "eval_report.csv",
    "eval_episodes": "eval_episodes.csv",
    "ablate_report": "ablate_report.csv",
    "flip_rate": "flip_rate.csv",
    "confidence_summary": "confidence_summary.csv",
    "timing": "timing.csv",
}


def outdir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg["out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(v) -> str:
    """CSV cell rendering that round-trips floats exactly."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(header)
        for row in rows:
            wr.writerow([_fmt(v) for v in row])


def write_manifest(cfg: ExperimentConfig, command: str) -> Path:
    """Config hashes and library versions for one command's artifacts.

    No timestamps: the manifest participates in the byte-idempotence
    guarantee, so it may contain only facts that (config, seed, machine)
    determine.
    """
    import scipy

    try:
        from importlib.metadata import version
        pkg = version("artifact")
    except Exception:
        pkg = "unknown"
    lines = [
        f"command = {command}",
        f"task = {cfg['task']}",
        f"seed = {cfg['seed']}",
        f"config_hash = {cfg.hash()}",
        f"stage1_hash = {cfg.hash('stage1')}",
        f"stage2_hash = {cfg.hash('stage2')}",
        f"package = {pkg}",
        f"numpy = {np.__version__}",
        f"scipy = {scipy.__version__}",
        f"python = {platform.python_version()}",
        "",
        "[config]",
        cfg.render().rstrip("\n"),
    ]
    path = outdir(cfg) / f"manifest_{command}.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _append_timing(cfg: ExperimentConfig, command: str, rows):
    """rows: (label, seconds). Machine-tagged; excluded from idempotence."""
    path = outdir(cfg) / FILES["timing"]
    fresh = not path.exists()
    with open(path, "a", newline="") as f:
        wr = csv.writer(f)
        if fresh:
            wr.writerow(["machine", "command", "label", "seconds"])
        tag = f"{platform.node()}/{platform.machine()}"
        for label, seconds in rows:
            wr.writerow([tag, command, label, repr(float(seconds))])


# ---- data and training stages ---------------------------------------------------

def collect_corpus(cfg: ExperimentConfig):
    """Expert demonstration corpus on disk; returns the demos."""
    demos = collect_demonstrations(cfg["task"], cfg["data.episodes"], cfg["seed"])
    save_corpus(outdir(cfg) / FILES["corpus"], demos)
    write_manifest(cfg, "collect")
    return demos


def _load_corpus_for(cfg: ExperimentConfig):
    path = outdir(cfg) / FILES["corpus"]
    if not path.exists():
        raise StorageError(f"missing corpus: {path} (run collect first)")
    demos = load_corpus(path)
    if demos[0].task != cfg["task"]:
        raise CompatibilityError(
            f"corpus task {demos[0].task!r} != config task {cfg['task']!r}")
    return demos


def _heldout_demos(cfg: ExperimentConfig):
    """Fresh expert episodes from a seed range disjoint from the corpus."""
    return collect_demonstrations(cfg["task"], cfg["data.heldout"],
                                  cfg["seed"] + HELDOUT_SEED_SALT)


def per_step_l1(actions: np.ndarray, recon: np.ndarray) -> float:
    """Mean over steps of the L1 displacement error, workspace units.

    Corpus actions are env-normalized to [-1, 1]; the physical error is
    the displacement error, MAX_STEP times larger than the action error."""
    return float(MAX_STEP * np.abs(actions - recon).sum(axis=-1).mean())


def per_step_l2(actions: np.ndarray, recon: np.ndarray) -> float:
    """Mean over steps of the squared L2 displacement error."""
    err = MAX_STEP * (actions - recon)
    return float(np.sum(err ** 2, axis=-1).mean())


def replay_reconstruction(tok: ActionTokenizer, demo) -> bool:
    """Round-trip the demo through the tokenizer and execute the result."""
    recon = tok.inverse_transform(tok.transform(demo.actions[None]))[0]
    env = ToyEnv(demo.task, demo.seed)
    env.reset()
    for a in recon[:env.horizon]:
        _, done, success = env.step(a)
        if success:
            return True
        if done:
            break
    return bool(env.state.success)


def run_stage1(cfg: ExperimentConfig):
    """Corpus -> frozen tokenizer checkpoint + reconstruction report."""
    t0 = time.perf_counter()
    demos = _load_corpus_for(cfg)
    actions = np.stack([d.actions for d in demos])
    tok = ActionTokenizer(**cfg.tokenizer_params()).fit(actions)
    if not np.isfinite(tok.loss_curve_).all():
        raise TrainingError("tokenizer loss diverged to non-finite values")

    held = np.stack([d.actions for d in _heldout_demos(cfg)])
    recon = tok.reconstruct(held)
    report = {
        "task": cfg["task"],
        "config_hash": cfg.hash("stage1"),
        "corpus_episodes": len(demos),
        "heldout_episodes": held.shape[0],
        "train_l1": tok.train_l1_,
        "heldout_l1_per_step": per_step_l1(held, recon),
        "heldout_l2_per_step": per_step_l2(held, recon),
        "codebook_usage": tok.usage_fraction_,
        "replay_successes": sum(replay_reconstruction(tok, d) for d in demos),
        "replay_total": len(demos),
    }
    out = outdir(cfg)
    save_checkpoint(out / FILES["tokenizer"], cfg.hash("stage1"),
                    {"tokenizer": tok.state_arrays()})
    _write_csv(out / FILES["stage1_report"], ["key", "value"],
               sorted(report.items()))
    _write_csv(out / FILES["tokenizer_loss"], ["step", "loss"],
               enumerate(tok.loss_curve_))
    write_manifest(cfg, "train-tokenizer")
    _append_timing(cfg, "train-tokenizer", [("stage1", time.perf_counter() - t0)])
    return tok, report


def load_stage1(cfg: ExperimentConfig) -> ActionTokenizer:
    path = outdir(cfg) / FILES["tokenizer"]
    got, sections = load_checkpoint(path)
    want = cfg.hash("stage1")
    if got != want:
        raise CompatibilityError(
            f"stage-1 checkpoint was trained under config {got[:12]}…, "
            f"current stage-1 config is {want[:12]}…")
    tok = ActionTokenizer(**cfg.tokenizer_params())
    tok.load_state_arrays(sections["tokenizer"])
    return tok


def masked_recovery_accuracy(policy: MaskedGenerativePolicy, demos,
                             mask_ratio=0.5, seed=0) -> float:
    """Fraction of masked expert tokens the policy's argmax recovers."""
    from .transformer import window_indices
    K = policy.codebook_size_
    tokens = policy.tokenizer.transform(np.stack([d.actions for d in demos]))
    rng = stream(seed, "recovery")
    hits = total = 0
    for i, d in enumerate(demos):
        canvas, flags = corrupt(tokens[i][None], mask_ratio, 0.0, K, rng)
        idx = window_indices(0, policy.context_steps)
        ctx = (d.observations[idx][None], d.states[idx][None])
        pred = policy.forward_logits(canvas, ctx)[0].argmax(axis=1)
        want = vocab_to_head(tokens[i], K)
        hits += int((pred[flags[0]] == want[flags[0]]).sum())
        total += int(flags.sum())
    return hits / total if total else 0.0


def _policy_for(cfg: ExperimentConfig, tok) -> MaskedGenerativePolicy:
    """Untrained policy wired for the task: window history and velocity
    features only for the observation columns the environment moves by
    itself; everything else conditions through its current reading."""
    return MaskedGenerativePolicy(tokenizer=tok,
                                  obs_tracked_dims=TRACKED_OBS_DIMS[cfg["task"]],
                                  state_tracked_dims=(),
                                  **cfg.policy_params())


def run_stage2(cfg: ExperimentConfig):
    """Tokenizer checkpoint + corpus -> trained policy checkpoint."""
    t0 = time.perf_counter()
    demos = _load_corpus_for(cfg)
    tok = load_stage1(cfg)
    if tok.codebook_size != cfg["tokenizer.codebook_size"]:
        raise CompatibilityError(
            f"checkpoint codebook size {tok.codebook_size} != config "
            f"{cfg['tokenizer.codebook_size']}")
    policy = _policy_for(cfg, tok)

    curve_rows = []
    if cfg["eval.periodic"]:
        every = cfg["eval.periodic_every"]

        def callback(model, step_i):
            if (step_i + 1) % every and (step_i + 1) != cfg["mgt.steps"]:
                return
            rep = evaluate(cfg, model, variants=(cfg["sampler.variant"],),
                           episodes=cfg["eval.periodic_episodes"],
                           jobs=1, write=False)
            curve_rows.append((step_i + 1, rep.rows[0].success_rate))

        policy.fit(demos, callback=callback)
    else:
        policy.fit(demos)
    if not np.isfinite(policy.loss_curve_).all():
        raise TrainingError("policy loss diverged to non-finite values")

    out = outdir(cfg)
    save_checkpoint(out / FILES["mgt"], cfg.hash("stage2"),
                    {"mgt": policy.state_arrays()})
    _write_csv(out / FILES["mgt_loss"], ["step", "loss"],
               enumerate(policy.loss_curve_))
    if curve_rows:
        top5 = sorted((r for _, r in curve_rows), reverse=True)[:5]
        rows = curve_rows + [("top5_mean", float(np.mean(top5)))]
        _write_csv(out / FILES["periodic_eval"], ["step", "success_rate"], rows)
    write_manifest(cfg, "train-mgt")
    _append_timing(cfg, "train-mgt", [("stage2", time.perf_counter() - t0)])
    return policy


def load_stage2(cfg: ExperimentConfig) -> MaskedGenerativePolicy:
    tok = load_stage1(cfg)
    got, sections = load_checkpoint(outdir(cfg) / FILES["mgt"])
    want = cfg.hash("stage2")
    if got != want:
        raise CompatibilityError(
            f"stage-2 checkpoint was trained under config {got[:12]}…, "
            f"current stage-2 config is {want[:12]}…")
    policy = _policy_for(cfg, tok)
    policy.load_state_arrays(sections["mgt"])
    return policy


# ---- evaluation campaigns ---------------------------------------------------------

def eval_seed(cfg_seed: int, episode: int) -> int:
    return EVAL_SEED_BASE + cfg_seed * 100_003 + episode


def _variant_spec(label: str, cfg: ExperimentConfig):
    """'long' or 'long:reuse' -> (variant, scoring)."""
    if ":" in label:
        v, s = label.split(":", 1)
        return canonical_variant(v), canonical_scoring(s)
    return canonical_variant(label), canonical_scoring(cfg["sampler.scoring"])


def make_env(cfg: ExperimentConfig, episode_seed: int):
    env = ToyEnv(cfg["task"], episode_seed)
    if cfg["dropout.p"] > 0.0:
        env = DropoutWrapper(env, cfg["dropout.p"], seed=episode_seed,
                             protect_first=cfg.protect_first())
    return env


def run_eval_episode(cfg: ExperimentConfig, policy, variant: str, scoring: str,
                     episode: int, sampler=None):
    """One rollout under the campaign's seeding discipline."""
    scfg = cfg.sampler(variant=variant, scoring=scoring) if sampler is None \
        else sampler
    env = make_env(cfg, eval_seed(cfg["seed"], episode))
    rng = stream(cfg["seed"], "rollout", variant, scoring, episode)
    t0 = time.perf_counter()
    trace = rollout_episode(env, policy, scfg, rng)
    return trace, time.perf_counter() - t0


@dataclass
class EvalRow:
    """One variant's aggregate over E episodes. Counters are exact sums."""

    variant: str
    scoring: str
    episodes: int
    successes: int
    success_rate: float
    passes_total: int
    passes_per_episode: float
    plans: int
    passes_per_plan: float
    replans: int
    hold_steps: int
    skipped_replans: int
    masked_committed: int
    flipped: int
    errors: int


@dataclass
class EvalReport:
    task: str
    config_hash: str
    episodes: int
    rows: list = field(default_factory=list)
    episode_rows: list = field(default_factory=list)
    wall_rows: list = field(default_factory=list)


_EPISODE_HEADER = ["variant", "scoring", "episode", "env_seed", "success",
                   "env_steps", "passes_total", "sample", "plan", "score",
                   "refine", "plans", "replans", "hold_steps",
                   "skipped_replans", "masked_committed", "flipped", "error"]


def evaluate(cfg: ExperimentConfig, policy, variants=("long",), episodes=None,
             jobs=None, write=True) -> EvalReport:
    """Fixed-seed campaign: E episodes per variant, exact pass counts.

    Episode outcomes depend only on (config, seed, episode index), never
    on scheduling, so --jobs changes wall-clock and nothing else.
    """
    episodes = cfg["eval.episodes"] if episodes is None else int(episodes)
    jobs = cfg["eval.jobs"] if jobs is None else int(jobs)
    if episodes < 1 or jobs < 1:
        raise ParameterError("episodes and jobs must be >= 1")
    specs = [_variant_spec(label, cfg) for label in variants]
    report = EvalReport(task=cfg["task"], config_hash=cfg.hash(),
                        episodes=episodes)

    work = [(v, s, i) for v, s in specs for i in range(episodes)]
    if jobs == 1:
        results = [run_eval_episode(cfg, policy, v, s, i) for v, s, i in work]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(
                lambda args: run_eval_episode(cfg, policy, *args), work))

    by_spec = {}
    for (v, s, i), (trace, wall) in zip(work, results):
        by_spec.setdefault((v, s), []).append(trace)
        label = v if s == "atr" or v != "long" else f"{v}:{s}"
        report.episode_rows.append(
            [label, s, i, eval_seed(cfg["seed"], i), int(trace.success),
             trace.env_steps, trace.passes.total,
             trace.passes.by_kind.get("sample", 0),
             trace.passes.by_kind.get("plan", 0),
             trace.passes.by_kind.get("score", 0),
             trace.passes.by_kind.get("refine", 0),
             len(trace.plans), len(trace.replans), trace.hold_steps,
             trace.skipped_replans, trace.masked_committed, trace.flipped,
             trace.error or ""])
        report.wall_rows.append((f"{label}/ep{i}", wall))

    for v, s in specs:
        traces = by_spec[(v, s)]
        succ = sum(t.success for t in traces)
        passes = sum(t.passes.total for t in traces)
        plans = sum(len(t.plans) for t in traces)
        label = v if s == "atr" or v != "long" else f"{v}:{s}"
        report.rows.append(EvalRow(
            variant=label, scoring=s, episodes=episodes, successes=succ,
            success_rate=succ / episodes, passes_total=passes,
            passes_per_episode=passes / episodes, plans=plans,
            passes_per_plan=passes / plans if plans else 0.0,
            replans=sum(len(t.replans) for t in traces),
            hold_steps=sum(t.hold_steps for t in traces),
            skipped_replans=sum(t.skipped_replans for t in traces),
            masked_committed=sum(t.masked_committed for t in traces),
            flipped=sum(t.flipped for t in traces),
            errors=sum(t.error is not None for t in traces)))

    if write:
        out = outdir(cfg)
        _write_csv(out / FILES["eval_report"],
                   ["task", "config_hash"] + list(EvalRow.__annotations__),
                   [[report.task, report.config_hash] + _row_values(r)
                    for r in report.rows])
        _write_csv(out / FILES["eval_episodes"], _EPISODE_HEADER,
                   report.episode_rows)
        write_manifest(cfg, "eval")
        _append_timing(cfg, "eval", report.wall_rows)
    return report


def _row_values(row: EvalRow):
    return [getattr(row, name) for name in EvalRow.__annotations__]


def ablate(cfg: ExperimentConfig, policy, sweep: str, variants=("long",),
           episodes=None, jobs=None, write=True):
    """Sweep one evaluation-time key: 'sampler.remask_ratio=0.5,0.7,0.85'.

    Only sampler.* and dropout.* keys are sweepable; anything else would
    silently mismatch the trained checkpoints. Returns one EvalReport per
    value and writes a single combined table.
    """
    if "=" not in sweep:
        raise ConfigError(f"sweep {sweep!r} is not key=v1,v2,...")
    key, raw = sweep.split("=", 1)
    key = key.strip()
    if not (key.startswith("sampler.") or key.startswith("dropout.")):
        raise ConfigError(f"sweep key {key!r} would invalidate the trained "
                          "checkpoints; only sampler.* and dropout.* sweep")
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not values:
        raise ConfigError(f"sweep {sweep!r} lists no values")
    reports = []
    for value in values:
        sub = cfg.with_overrides([f"{key}={value}"])
        reports.append((value, evaluate(sub, policy, variants=variants,
                                        episodes=episodes, jobs=jobs,
                                        write=False)))
    if write:
        rows = [[key, value, rep.config_hash] + _row_values(r)
                for value, rep in reports for r in rep.rows]
        _write_csv(outdir(cfg) / FILES["ablate_report"],
                   ["sweep_key", "sweep_value", "config_hash"]
                   + list(EvalRow.__annotations__), rows)
        write_manifest(cfg, "ablate")
    return reports


# ---- confidence analysis ------------------------------------------------------------

@dataclass
class ConfidenceAnalysis:
    """Per-trace confidence and mask-state matrices, (N, replans) each."""

    confidence: list
    mask_states: list
    summary_rows: list
    mean_before_onset: float
    mean_after_onset: float


def trace_matrices(trace):
    """(confidence, mask_state) matrices for one long-horizon trace.

    Columns are replans in order. Confidence is each token's posterior
    score under the context that triggered the replan; executed cells are
    NaN. Mask states: 0 untouched, 1 re-masked in the first refinement
    pass, 2 re-masked again later (latest pass wins), 3 executed.
    """
    n, m = trace.n_tokens, len(trace.replans)
    conf = np.full((n, m), np.nan)
    state = np.zeros((n, m), dtype=np.int64)
    for j, rec in enumerate(trace.replans):
        executed = np.arange(n) < rec.executed_tokens
        conf[:, j] = np.where(executed, np.nan, rec.scores)
        for k, p in enumerate(rec.passes):
            state[p.bitmap, j] = 1 if k == 0 else 2
        state[executed, j] = 3
    return conf, state


def confidence_analysis(cfg: ExperimentConfig, traces,
                        onset_step: int = DRIFT_START, write=True
                        ) -> ConfidenceAnalysis:
    """Confidence heatmap + mask map files from long-horizon traces."""
    traces = list(traces)
    if not traces:
        raise ParameterError("empty trace set: nothing to analyze")
    confs, states, summary = [], [], []
    before, after = [], []
    for t_i, trace in enumerate(traces):
        conf, state = trace_matrices(trace)
        confs.append(conf)
        states.append(state)
        for j, rec in enumerate(trace.replans):
            pending = rec.scores[rec.pending]
            mean = float(pending.mean()) if pending.size else float("nan")
            summary.append([t_i, j, rec.env_step, mean])
            if pending.size:
                (before if rec.env_step < onset_step else after).append(mean)
    analysis = ConfidenceAnalysis(
        confidence=confs, mask_states=states, summary_rows=summary,
        mean_before_onset=float(np.mean(before)) if before else float("nan"),
        mean_after_onset=float(np.mean(after)) if after else float("nan"))

    if write:
        out = outdir(cfg)
        for t_i, (conf, state) in enumerate(zip(confs, states)):
            cols = [f"replan{j}" for j in range(conf.shape[1])]
            _write_csv(out / f"confidence_{t_i:03d}.csv", ["token"] + cols,
                       [[i] + list(conf[i]) for i in range(conf.shape[0])])
            _write_csv(out / f"maskmap_{t_i:03d}.csv", ["token"] + cols,
                       [[i] + list(state[i]) for i in range(state.shape[0])])
        _write_csv(out / FILES["confidence_summary"],
                   ["trace", "replan", "env_step", "pending_mean"], summary)
        write_manifest(cfg, "analyze")
    return analysis


# ---- flip-rate calibration -----------------------------------------------------------

def _parse_masking(label: str):
    m = re.fullmatch(r"(bottom|top)(\d{1,3})", label)
    if not m:
        raise ConfigError(f"masking {label!r}; expected bottom<pct> or top<pct>")
    pct = int(m.group(2))
    if pct > 100:
        raise ConfigError(f"masking percentage {pct} > 100")
    return m.group(1), pct / 100.0


def flip_rate_experiment(cfg: ExperimentConfig, policy,
                         maskings=("bottom70", "top70"), episodes=None,
                         write=True):
    """Success and flip rate under confidence- vs anticonfidence-masking.

    Flip rate = re-sampled committed tokens that changed / re-sampled
    committed tokens, exact integer counts summed over all episodes. A
    zero masking ratio re-masks nothing; the rate is then undefined and
    reported as 0 with a flag.
    """
    episodes = cfg["eval.episodes"] if episodes is None else int(episodes)
    rows = []
    for label in maskings:
        select, ratio = _parse_masking(label)
        scfg = cfg.sampler(variant="long", scoring="atr", rank_select=select,
                           remask_ratio=ratio)
        succ = flips = masked = 0
        for i in range(episodes):
            env = make_env(cfg, eval_seed(cfg["seed"], i))
            rng = stream(cfg["seed"], "fliprate", label, i)
            trace = rollout_episode(env, policy, scfg, rng)
            succ += int(trace.success)
            flips += trace.flipped
            masked += trace.masked_committed
        undefined = masked == 0
        rows.append([label, episodes, succ, succ / episodes, flips, masked,
                     flips / masked if masked else 0.0,
                     "undefined" if undefined else "ok"])
    if write:
        _write_csv(outdir(cfg) / FILES["flip_rate"],
                   ["masking", "episodes", "successes", "success_rate",
                    "flipped", "masked_committed", "flip_rate", "status"],
                   rows)
        write_manifest(cfg, "flip-rate")
    return rows
