"""Flat experiment configuration: typed `key = value` text.

One schema is the single source of truth for every tunable in the
pipeline. Config files and CLI overrides share the same dotted keys;
unknown keys and ill-typed values are rejected up front. The canonical
rendering (every key, schema order) feeds a sha256 that stamps each
artifact a run writes, so outputs can always be traced to their exact
settings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .envs import TASKS, canonical_task
from .errors import ConfigError
from .samplers import SamplerConfig

# key -> (type tag, base default). Task-specific overrides live below.
SCHEMA = (
    ("task", "str", "reach"),
    ("seed", "int", 0),
    ("out", "str", "runs/out"),
    ("data.episodes", "int", 10),
    ("data.heldout", "int", 5),
    ("dropout.p", "float", 0.0),
    ("dropout.protect_first", "str", "auto"),  # auto | on | off
    ("tokenizer.codebook_size", "int", 128),
    ("tokenizer.code_dim", "int", 16),
    ("tokenizer.channels", "int", 32),
    ("tokenizer.steps", "int", 1500),
    ("tokenizer.batch_size", "int", 8),
    ("tokenizer.learning_rate", "float", 1e-3),
    ("mgt.model_dim", "int", 128),
    ("mgt.n_heads", "int", 1),
    ("mgt.cross_blocks", "int", 2),
    ("mgt.self_blocks", "int", 2),
    ("mgt.ffn_mult", "int", 4),
    ("mgt.context_steps", "int", 4),
    ("mgt.short_tokens", "int", 2),
    ("mgt.mask_ratio_low", "float", 0.5),
    ("mgt.mask_ratio_high", "float", 1.0),
    ("mgt.perturb_rho", "float", 0.1),
    ("mgt.plan_fraction", "float", 0.7),
    ("mgt.zero_history_fraction", "float", 0.25),
    ("mgt.varlen_fraction", "float", 0.3),
    ("mgt.history_scramble", "float", 0.0),
    ("mgt.pending_scramble", "float", 0.0),
    ("mgt.loss_masked_only", "bool", False),
    ("mgt.steps", "int", 3000),
    ("mgt.batch_size", "int", 16),
    ("mgt.learning_rate", "float", 3e-4),
    ("sampler.r", "int", 2),
    ("sampler.temperature", "float", 1.0),
    ("sampler.remask_ratio", "float", 0.70),
    ("sampler.exec_long", "int", 12),
    ("sampler.exec_short", "int", 5),
    ("sampler.variant", "str", "long"),
    ("sampler.scoring", "str", "atr"),
    ("sampler.score_every_pass", "bool", True),
    ("sampler.rank_select", "str", "bottom"),
    ("eval.episodes", "int", 20),
    ("eval.jobs", "int", 1),
    ("eval.periodic", "bool", False),
    ("eval.periodic_every", "int", 1000),
    ("eval.periodic_episodes", "int", 20),
)
_KINDS = {key: kind for key, kind, _ in SCHEMA}
_DEFAULTS = {key: default for key, _, default in SCHEMA}

# desk-scale corpus and budget per task; small corpora memorize the
# training starts and generalize poorly, so reach/dynamic get 256 demos
TASK_DEFAULTS = {
    "reach": {"data.episodes": 256, "tokenizer.steps": 2500,
              "mgt.steps": 6000},
    "dynamic": {"data.episodes": 1024, "tokenizer.steps": 2500,
                "mgt.steps": 12000, "mgt.history_scramble": 0.5,
                "mgt.pending_scramble": 0.5, "mgt.perturb_rho": 0.3,
                "sampler.temperature": 0.2},
    "button": {"data.episodes": 48, "data.heldout": 8,
               "tokenizer.steps": 2000, "mgt.steps": 4500},
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}

_STAGE1_KEYS = ("task", "seed", "data.episodes")


def scope_keys(scope: str) -> frozenset:
    if scope == "full":
        return frozenset(_KINDS)
    if scope == "stage1":
        return frozenset(k for k in _KINDS
                         if k in _STAGE1_KEYS or k.startswith("tokenizer."))
    if scope == "stage2":
        return scope_keys("stage1") | frozenset(
            k for k in _KINDS if k.startswith("mgt."))
    raise ConfigError(f"unknown hash scope {scope!r}")


def parse_value(key: str, raw: str):
    kind = _KINDS.get(key)
    if kind is None:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in _TRUE:
                return True
            if raw.lower() in _FALSE:
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad {kind} value {raw!r} for key {key!r}") from None


def render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    """Complete, validated setting for one experiment run."""

    values: dict

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def with_overrides(self, pairs) -> "ExperimentConfig":
        """pairs: iterable of 'key=value' strings (CLI --set syntax)."""
        out = dict(self.values)
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            key = key.strip()
            out[key] = parse_value(key, raw)
        cfg = ExperimentConfig(out)
        _validate(cfg)
        return cfg

    def render(self, scope: str = "full") -> str:
        """Canonical text: the scope's keys in schema order."""
        keys = scope_keys(scope)
        return "".join(f"{key} = {render_value(self.values[key])}\n"
                       for key, _, _ in SCHEMA if key in keys)

    def hash(self, scope: str = "full") -> str:
        """sha256 of the canonical rendering.

        Scoped hashes stamp checkpoints with exactly the keys that
        determine their bytes: "stage1" covers the corpus and tokenizer,
        "stage2" adds the transformer. Evaluation-time keys (sampler,
        dropout, eval) can then vary without orphaning trained artifacts.
        """
        return hashlib.sha256(self.render(scope).encode("utf-8")).hexdigest()

    # ---- typed views consumed by the pipeline ---------------------------

    def tokenizer_params(self) -> dict:
        v = self.values
        return dict(codebook_size=v["tokenizer.codebook_size"],
                    code_dim=v["tokenizer.code_dim"],
                    channels=v["tokenizer.channels"],
                    steps=v["tokenizer.steps"],
                    batch_size=v["tokenizer.batch_size"],
                    learning_rate=v["tokenizer.learning_rate"],
                    seed=v["seed"])

    def policy_params(self) -> dict:
        v = self.values
        return dict(model_dim=v["mgt.model_dim"], n_heads=v["mgt.n_heads"],
                    cross_blocks=v["mgt.cross_blocks"],
                    self_blocks=v["mgt.self_blocks"],
                    ffn_mult=v["mgt.ffn_mult"],
                    context_steps=v["mgt.context_steps"],
                    short_tokens=v["mgt.short_tokens"],
                    mask_ratio_low=v["mgt.mask_ratio_low"],
                    mask_ratio_high=v["mgt.mask_ratio_high"],
                    perturb_rho=v["mgt.perturb_rho"],
                    plan_fraction=v["mgt.plan_fraction"],
                    zero_history_fraction=v["mgt.zero_history_fraction"],
                    varlen_fraction=v["mgt.varlen_fraction"],
                    history_scramble=v["mgt.history_scramble"],
                    pending_scramble=v["mgt.pending_scramble"],
                    loss_masked_only=v["mgt.loss_masked_only"],
                    steps=v["mgt.steps"], batch_size=v["mgt.batch_size"],
                    learning_rate=v["mgt.learning_rate"], seed=v["seed"])

    def sampler(self, **replace) -> SamplerConfig:
        v = self.values
        kw = dict(r=v["sampler.r"], temperature=v["sampler.temperature"],
                  remask_ratio=v["sampler.remask_ratio"],
                  exec_long=v["sampler.exec_long"],
                  exec_short=v["sampler.exec_short"],
                  variant=v["sampler.variant"], scoring=v["sampler.scoring"],
                  score_every_pass=v["sampler.score_every_pass"],
                  rank_select=v["sampler.rank_select"])
        kw.update(replace)
        return SamplerConfig(**kw)

    def protect_first(self) -> bool | None:
        raw = self.values["dropout.protect_first"].lower()
        if raw == "auto":
            return None
        if raw in _TRUE:
            return True
        if raw in _FALSE:
            return False
        raise ConfigError(f"dropout.protect_first must be auto/on/off, got {raw!r}")


def default_config(task: str = "reach", **values) -> ExperimentConfig:
    """Desk defaults for a task, plus keyword overrides by exact key."""
    try:
        task = canonical_task(task)
    except Exception as e:
        raise ConfigError(str(e)) from None
    out = dict(_DEFAULTS)
    out["task"] = task
    out["out"] = f"runs/{task}"
    out.update(TASK_DEFAULTS[task])
    for key, value in values.items():
        if key not in _KINDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    cfg = ExperimentConfig(out)
    _validate(cfg)
    return cfg


def parse_config_text(text: str) -> dict:
    """`key = value` lines; blank lines and #-comment lines are skipped."""
    out = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {ln}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        out[key] = parse_value(key, raw)
    return out


def load_config(path, overrides=()) -> ExperimentConfig:
    """Read a config file, apply overrides, validate the result.

    The file's task key selects the per-task defaults, so a two-line file
    is a complete experiment description.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    file_values = parse_config_text(path.read_text())
    task = file_values.get("task", _DEFAULTS["task"])
    cfg = default_config(task)
    cfg = ExperimentConfig({**cfg.values, **file_values})
    cfg = cfg.with_overrides(overrides)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    v = cfg.values
    if v["task"] not in TASKS:
        raise ConfigError(f"unknown task {v['task']!r}; tasks: {TASKS}")
    if not 0.0 <= v["dropout.p"] <= 1.0:
        raise ConfigError(f"dropout.p must be in [0, 1], got {v['dropout.p']}")
    for key in ("data.episodes", "data.heldout", "tokenizer.steps", "mgt.steps",
                "eval.episodes", "eval.jobs"):
        if v[key] < 1:
            raise ConfigError(f"{key} must be >= 1, got {v[key]}")
    for key in ("mgt.history_scramble", "mgt.pending_scramble",
                "mgt.varlen_fraction",
                "mgt.zero_history_fraction", "mgt.plan_fraction"):
        if not 0.0 <= v[key] <= 1.0:
            raise ConfigError(f"{key} must be in [0, 1], got {v[key]}")
    cfg.protect_first()
    cfg.sampler()  # bounds-check the sampler block
