"""Experiment configuration: schema, defaults, and batched validation.

Configs are YAML. Defaults follow the reference protocol: 50 sampling
steps, 25 refinement iterations at learning rate 1e-3, guidance scale 7.5,
100 samples per arm. ``parse_config`` reports every validation problem it
finds, not just the first.
"""

import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .denoisers import GaussianMixtureDenoiser
from .errors import ConfigError
from .inversion import TinaConfig
from .schedule import NoiseSchedule, make_linear_schedule
from .trainer import TrainConfig

ARM_TEXT = "TextGuided"
ARM_STANDARD = "StandardInvNull"
ARM_TINALESS = "TinaLessK"
ARM_TINA = "Tina"
STANDARD_ARMS = (ARM_TEXT, ARM_STANDARD, ARM_TINALESS, ARM_TINA)

_ARM_ALIASES = {
    "text": ARM_TEXT, "textguided": ARM_TEXT,
    "standard": ARM_STANDARD, "standardinvnull": ARM_STANDARD,
    "tinaless": ARM_TINALESS, "tinalessk": ARM_TINALESS,
    "tina": ARM_TINA,
}

DEFAULT_OUTPUT_ENV = "TINALAB_OUT_DIR"


@dataclass(frozen=True)
class ArmSpec:
    name: str
    tina: TinaConfig | None = None  # inner-loop settings for inversion arms


@dataclass(frozen=True)
class ScheduleSpec:
    num_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    train_steps: int | None = None
    alphas: tuple | None = None

    def build(self) -> NoiseSchedule:
        if self.alphas is not None:
            return NoiseSchedule(np.asarray(self.alphas, dtype=np.float64))
        return make_linear_schedule(self.num_steps, self.beta_start, self.beta_end,
                                    train_steps=self.train_steps)


@dataclass(frozen=True)
class DataSpec:
    dim: int
    weights: tuple
    means: tuple          # tuple of tuples, one per component
    variances: tuple
    concepts: dict        # concept -> tuple of component indices

    def build(self, schedule) -> GaussianMixtureDenoiser:
        return GaussianMixtureDenoiser(
            np.asarray(self.weights), np.asarray(self.means),
            np.asarray(self.variances), dict(self.concepts), schedule)


@dataclass(frozen=True)
class TrainSpec:
    config: TrainConfig
    hidden: tuple = (64, 64)
    emb_dim: int = 4
    null_stream: float = 0.05                  # share of training draws that are unconditional
    null_pool: int | None = None               # fixed-pool size for the unconditional stream
    null_concept_scale: dict = field(default_factory=dict)  # reweighting inside the null stream
    concept_fractions: dict = field(default_factory=dict)  # shares within the conditional stream


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "analytic"             # analytic | mlp
    path: str | None = None
    train: TrainSpec | None = None


@dataclass(frozen=True)
class ErasureSpec:
    method: str = "remap"              # remap | finetune
    concepts: tuple = ()
    finetune: TrainConfig | None = None
    finetune_scope: str = "embedding"


@dataclass(frozen=True)
class AttackSpec:
    target_concept: str
    arms: tuple                        # of ArmSpec
    samples: int = 100
    guidance: float = 7.5
    target_filter: str = "bayes"       # bayes | none
    max_target_attempts: int = 50
    workers: int = 1


@dataclass(frozen=True)
class EvalSpec:
    separability_layer: int = 2
    separability_probe_step: int = 10
    separability_per_concept: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    schedule: ScheduleSpec
    data: DataSpec
    model: ModelSpec
    erasure: ErasureSpec
    attack: AttackSpec
    evaluation: EvalSpec
    output_dir: str


def canonical_arm(name: str):
    return _ARM_ALIASES.get(str(name).strip().lower())


def _get(section, key, default=None):
    if section is None:
        return default
    return section.get(key, default)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML experiment config.

    Raises ConfigError carrying the full list of problems; YAML syntax
    errors propagate with line/column information.
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError([f"config syntax error{where}: {getattr(exc, 'problem', exc)}"])
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a mapping"])

    problems = []
    known = {"seed", "output_dir", "schedule", "data", "model", "erasure",
             "attack", "evaluation"}
    for key in raw:
        if key not in known:
            problems.append(f"unknown top-level key {key!r}")

    seed = raw.get("seed")
    if seed is None:
        problems.append("missing required field 'seed'")
    elif not isinstance(seed, int):
        problems.append(f"'seed' must be an integer, got {seed!r}")

    # schedule ------------------------------------------------------------
    sched_raw = raw.get("schedule") or {}
    schedule = ScheduleSpec(
        num_steps=_get(sched_raw, "num_steps", 50),
        beta_start=float(_get(sched_raw, "beta_start", 1e-4)),
        beta_end=float(_get(sched_raw, "beta_end", 0.02)),
        train_steps=_get(sched_raw, "train_steps"),
        alphas=tuple(sched_raw["alphas"]) if "alphas" in sched_raw else None,
    )
    try:
        built_schedule = schedule.build()
    except (ValueError, TypeError) as exc:
        problems.append(f"schedule: {exc}")
        built_schedule = None

    # data ----------------------------------------------------------------
    data = None
    data_raw = raw.get("data")
    if not data_raw:
        problems.append("missing required section 'data'")
    else:
        comps = data_raw.get("components") or []
        concepts = data_raw.get("concepts") or {}
        if not comps:
            problems.append("data: needs at least one component")
        if not concepts:
            problems.append("data: needs a concepts table")
        dim = data_raw.get("dim")
        weights, means, variances = [], [], []
        for i, comp in enumerate(comps):
            try:
                weights.append(float(comp["weight"]))
                means.append(tuple(float(v) for v in comp["mean"]))
                variances.append(float(comp["variance"]))
            except (KeyError, TypeError, ValueError) as exc:
                problems.append(f"data: component {i} malformed ({exc})")
        if means and dim is None:
            dim = len(means[0])
        if means and any(len(m) != dim for m in means):
            problems.append(f"data: component means disagree with dim={dim}")
        data = DataSpec(dim=dim or 0, weights=tuple(weights), means=tuple(means),
                        variances=tuple(variances),
                        concepts={str(k): tuple(v) for k, v in concepts.items()})
        if built_schedule is not None and means:
            try:
                data.build(built_schedule)
            except Exception as exc:
                problems.append(f"data: {exc}")

    # model ----------------------------------------------------------------
    model_raw = raw.get("model") or {}
    kind = _get(model_raw, "kind", "analytic")
    if kind not in ("analytic", "mlp"):
        problems.append(f"model: unknown kind {kind!r} (choose analytic or mlp)")
    train_spec = None
    if "train" in model_raw:
        t = model_raw["train"] or {}
        try:
            train_spec = TrainSpec(
                config=TrainConfig(
                    seed=t["seed"],
                    epochs=_get(t, "epochs", 100),
                    batch_size=_get(t, "batch_size", 128),
                    batches_per_epoch=_get(t, "batches_per_epoch", 50),
                    lr=float(_get(t, "lr", 2e-3)),
                    null_fraction=0.0,
                ),
                hidden=tuple(_get(t, "hidden", (64, 64))),
                emb_dim=_get(t, "emb_dim", 4),
                null_stream=float(_get(t, "null_stream", 0.05)),
                null_pool=_get(t, "null_pool"),
                null_concept_scale={str(k): float(v)
                                    for k, v in (_get(t, "null_concept_scale") or {}).items()},
                concept_fractions={str(k): float(v)
                                   for k, v in (_get(t, "concept_fractions") or {}).items()},
            )
        except KeyError as exc:
            problems.append(f"model.train: missing required field {exc}")
        except (TypeError, ValueError) as exc:
            problems.append(f"model.train: {exc}")
    if kind == "mlp" and not model_raw.get("path") and train_spec is None:
        problems.append("model: kind 'mlp' needs a 'path' or a 'train' block")
    model = ModelSpec(kind=kind, path=model_raw.get("path"), train=train_spec)

    # erasure ----------------------------------------------------------------
    er_raw = raw.get("erasure") or {}
    method = _get(er_raw, "method", "remap")
    if method not in ("remap", "finetune"):
        problems.append(f"erasure: unknown method {method!r} (choose remap or finetune)")
    finetune_cfg = None
    if "finetune" in er_raw:
        f = er_raw["finetune"] or {}
        try:
            finetune_cfg = TrainConfig(
                seed=f["seed"],
                epochs=_get(f, "epochs", 40),
                batch_size=_get(f, "batch_size", 64),
                batches_per_epoch=_get(f, "batches_per_epoch", 40),
                lr=float(_get(f, "lr", 2e-3)),
            )
        except KeyError as exc:
            problems.append(f"erasure.finetune: missing required field {exc}")
        except (TypeError, ValueError) as exc:
            problems.append(f"erasure.finetune: {exc}")
    if method == "finetune" and finetune_cfg is None:
        problems.append("erasure: method 'finetune' needs a 'finetune' block with a seed")
    scope = _get(er_raw, "scope", "embedding")
    if scope not in ("embedding", "all"):
        problems.append(f"erasure: unknown finetune scope {scope!r}")
    erase_concepts = tuple(str(c) for c in (_get(er_raw, "concepts") or ()))
    if data is not None:
        for c in erase_concepts:
            if c not in data.concepts:
                problems.append(f"erasure: concept {c!r} not in the data concept table")

    # attack ----------------------------------------------------------------
    at_raw = raw.get("attack") or {}
    default_tina_raw = at_raw.get("tina") or {}

    def build_tina(overrides=None):
        merged = dict(default_tina_raw)
        merged.update(overrides or {})
        return TinaConfig(
            k=merged.get("k", 25),
            eta=float(merged.get("eta", 1e-3)),
            optimizer=merged.get("optimizer", "adamw"),
            residual_tolerance=float(merged.get("residual_tolerance", 1e-10)),
        )

    arm_entries = at_raw.get("arms", ["text", "standard", "tinaless", "tina"])
    arms = []
    if not arm_entries:
        problems.append("attack: arms must be non-empty")
    for entry in arm_entries or ():
        if isinstance(entry, str):
            name, overrides = entry, {}
        elif isinstance(entry, dict) and "name" in entry:
            name = entry["name"]
            overrides = {k: v for k, v in entry.items() if k != "name"}
        else:
            problems.append(f"attack: malformed arm entry {entry!r}")
            continue
        canon = canonical_arm(name)
        if canon is None:
            problems.append(
                f"attack: unknown arm {name!r}; valid arms: "
                + ", ".join(sorted(set(_ARM_ALIASES.values()))))
            continue
        try:
            if canon == ARM_TEXT:
                arms.append(ArmSpec(canon, None))
            elif canon == ARM_STANDARD:
                arms.append(ArmSpec(canon, None))
            elif canon == ARM_TINALESS:
                overrides.setdefault("k", 5)
                arms.append(ArmSpec(canon, build_tina(overrides)))
            else:
                arms.append(ArmSpec(canon, build_tina(overrides)))
        except (TypeError, ValueError) as exc:
            problems.append(f"attack: arm {name!r}: {exc}")

    target = at_raw.get("target_concept")
    if target is None:
        if data is not None and data.concepts:
            target = next(iter(data.concepts))
        else:
            problems.append("attack: missing target_concept")
    elif data is not None and str(target) not in data.concepts:
        problems.append(f"attack: target_concept {target!r} not in the data concept table")
    target_filter = _get(at_raw, "target_filter", "bayes")
    if target_filter not in ("bayes", "none"):
        problems.append(f"attack: unknown target_filter {target_filter!r}")
    samples = _get(at_raw, "samples", 100)
    if not isinstance(samples, int) or samples < 0:
        problems.append(f"attack: samples must be a non-negative integer, got {samples!r}")
    guidance = float(_get(at_raw, "guidance", 7.5))
    if guidance < 0:
        problems.append("attack: guidance scale must be >= 0")
    workers = _get(at_raw, "workers", 1)
    if not isinstance(workers, int) or workers < 1:
        problems.append(f"attack: workers must be a positive integer, got {workers!r}")
    attack = AttackSpec(target_concept=str(target), arms=tuple(arms),
                        samples=samples if isinstance(samples, int) else 0,
                        guidance=guidance, target_filter=target_filter,
                        max_target_attempts=_get(at_raw, "max_target_attempts", 50),
                        workers=workers if isinstance(workers, int) else 1)

    # erasing the attacked concept is the default experiment
    if not erase_concepts and target is not None:
        erase_concepts = (str(target),)
    erasure = ErasureSpec(method=method, concepts=erase_concepts,
                          finetune=finetune_cfg, finetune_scope=scope)

    # evaluation --------------------------------------------------------------
    ev_raw = raw.get("evaluation") or {}
    evaluation = EvalSpec(
        separability_layer=_get(ev_raw, "separability_layer", 2),
        separability_probe_step=_get(ev_raw, "separability_probe_step", 10),
        separability_per_concept=_get(ev_raw, "separability_per_concept", 50),
    )

    output_dir = raw.get("output_dir") or os.environ.get(DEFAULT_OUTPUT_ENV) or "tinalab_out"

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(seed=seed, schedule=schedule, data=data, model=model,
                            erasure=erasure, attack=attack, evaluation=evaluation,
                            output_dir=str(output_dir))


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
