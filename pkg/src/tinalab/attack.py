"""The two-phase attack pipeline and its manifest.

Phase 1 (inversion) sees the target latent, the erased model and the null
condition; phase 2 (regeneration) sees only the optimized initial noise,
the same erased model and the null condition -- no target or concept
information can flow into it, which ``regenerate``'s signature enforces
structurally.

Every numeric output is a pure function of (config, seed): per-sample
random streams are keyed as [seed, purpose, sample, ...], so worker
concurrency cannot change results.
"""

import dataclasses
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ARM_STANDARD, ARM_TEXT, ExperimentConfig
from .denoisers import NULL, Condition, GaussianMixtureDenoiser, MlpDenoiser, erase
from .errors import ConfigError
from .evaluation import bayes_classify, reconstruction_error
from .inversion import standard_inversion, tina_inversion
from .model_io import load_latent, load_model, save_latent, save_model
from .sampler import ddim_sample
from .trainer import finetune_erase, train_denoiser

# rng purpose tags
_TARGET = 1
_TEXT_NOISE = 2


def config_hash(config: ExperimentConfig) -> str:
    # identifies the experiment, not where its outputs land
    canonical = dataclasses.replace(config, output_dir="")
    return hashlib.sha256(repr(canonical).encode()).hexdigest()[:16]


def make_stream_sampler(data_model: GaussianMixtureDenoiser, null_stream: float,
                        concept_fractions: dict, null_pool: int | None = None,
                        pool_seed: int = 0, null_concept_scale: dict | None = None):
    """Training-data sampler with an explicit unconditional stream and
    optional per-concept shares of the conditional stream.

    ``null_concept_scale`` reweights concepts inside the unconditional
    stream (0 removes one entirely): the learned unconditional field is
    then weakly constrained around that concept by construction, while its
    conditional field still trains on fresh draws. ``null_pool`` instead
    resamples a fixed pool of unconditional draws (finite-sample roughness).
    """
    concepts = list(data_model.concept_table)
    shares = np.array([concept_fractions.get(c, np.nan) for c in concepts])
    unset = np.isnan(shares)
    remaining = 1.0 - np.nansum(shares)
    if remaining < -1e-9 or (unset.sum() == 0 and abs(remaining) > 1e-9):
        raise ConfigError([f"concept_fractions sum beyond 1: {concept_fractions}"])
    if unset.any():
        shares[unset] = max(remaining, 0.0) / unset.sum()
    shares = shares / shares.sum()

    null_weights = data_model.weights.copy()
    if null_concept_scale:
        for concept, scale in null_concept_scale.items():
            if concept not in data_model.concept_table:
                raise ConfigError([f"null_concept_scale: unknown concept {concept!r}"])
            if scale < 0:
                raise ConfigError([f"null_concept_scale: negative scale for {concept!r}"])
            for idx in data_model.concept_table[concept]:
                null_weights[idx] *= scale
    if null_weights.sum() <= 0:
        raise ConfigError(["null_concept_scale removed every component"])
    null_weights = null_weights / null_weights.sum()

    pool = None
    if null_pool:
        pool_rng = np.random.default_rng([pool_seed, 0xF1D])
        comp = pool_rng.choice(len(null_weights), size=null_pool, p=null_weights)
        sig = np.sqrt(data_model.variances[comp])[:, None]
        pool = data_model.means[comp] + sig * pool_rng.standard_normal((null_pool, data_model.dim))

    def draw_null(rng):
        if pool is not None:
            return pool[rng.integers(len(pool))]
        comp = rng.choice(len(null_weights), p=null_weights)
        return (data_model.means[comp]
                + np.sqrt(data_model.variances[comp]) * rng.standard_normal(data_model.dim))

    def sampler(rng, n):
        z0 = np.empty((n, data_model.dim))
        conds = []
        for j in range(n):
            if rng.random() < null_stream:
                z0[j] = draw_null(rng)
                conds.append(NULL)
            else:
                c = concepts[rng.choice(len(concepts), p=shares)]
                z0[j] = data_model.sample_clean(rng, Condition(c), 1)[0]
                conds.append(Condition(c))
        return z0, conds

    return sampler


def build_original_model(config: ExperimentConfig, schedule, data_model,
                         out_dir: Path | None = None):
    """The pre-erasure model: the analytic mixture itself, or a network
    loaded from disk / trained from the data spec. Returns (model, history).
    """
    spec = config.model
    if spec.kind == "analytic":
        return data_model, None
    if spec.path:
        path = Path(spec.path)
        if path.exists():
            return load_model(path), None
    if spec.train is None:
        raise ConfigError([f"model path {spec.path!r} not found and no train block given"])
    sampler = make_stream_sampler(data_model, spec.train.null_stream,
                                  spec.train.concept_fractions,
                                  null_pool=spec.train.null_pool,
                                  pool_seed=spec.train.config.seed,
                                  null_concept_scale=spec.train.null_concept_scale)
    model, history = train_denoiser(sampler, list(data_model.concept_table),
                                    spec.train.config, schedule,
                                    dim=data_model.dim, hidden=spec.train.hidden,
                                    emb_dim=spec.train.emb_dim)
    if spec.path:
        save_model(model, spec.path)
    elif out_dir is not None:
        save_model(model, out_dir / "model.json")
    return model, history


def build_erased_model(config: ExperimentConfig, original, schedule):
    spec = config.erasure
    if not spec.concepts:
        raise ConfigError(["erasure: no concepts listed"])
    if spec.method == "remap":
        return erase(original, spec.concepts), None
    if not isinstance(original, MlpDenoiser):
        raise ConfigError(["erasure: method 'finetune' needs a network model"])
    model = original
    history = []
    for concept in spec.concepts:
        model, h = finetune_erase(model, concept, spec.finetune, schedule,
                                  scope=spec.finetune_scope)
        history.extend(h)
    return model, history


def draw_target(original, data_model, schedule, concept: str, seed: int, index: int,
                target_filter: str = "bayes", max_attempts: int = 50):
    """Target latent: a concept-conditioned generation of the original model.

    With the Bayes filter enabled, draws are resampled until the classifier
    assigns them to the requested concept (the analog of keeping only
    ground-truth exemplars that actually show the concept).
    """
    attempts = max_attempts if target_filter == "bayes" else 1
    for attempt in range(attempts):
        rng = np.random.default_rng([seed, _TARGET, index, attempt])
        noise = rng.standard_normal(original.dim)
        z0 = ddim_sample(original, noise, Condition(concept), schedule).final
        if target_filter != "bayes":
            return z0, attempt
        if bayes_classify(data_model, z0)[0] == concept:
            return z0, attempt
    raise RuntimeError(
        f"no classifier-valid target for sample {index} in {max_attempts} draws")


def invert_for_arm(arm, erased, z0, schedule):
    """Phase 1 for the inversion arms. Returns (z_T_star, report)."""
    if arm.name == ARM_STANDARD:
        report = standard_inversion(erased, z0, NULL, schedule)
    else:
        report = tina_inversion(erased, z0, schedule, arm.tina)
    return report.z_T_star, report


def regenerate(erased, z_T_star, condition, schedule, guidance=None):
    """Phase 2: deterministic sampling from the optimized noise only."""
    return ddim_sample(erased, z_T_star, condition, schedule, guidance=guidance).final


def _run_one(arm, index, config, schedule, original, erased, data_model,
             out_dir: Path | None):
    concept = config.attack.target_concept
    z0, _ = draw_target(original, data_model, schedule, concept, config.seed, index,
                        config.attack.target_filter, config.attack.max_target_attempts)
    if arm.name == ARM_TEXT:
        rng = np.random.default_rng([config.seed, _TEXT_NOISE, index])
        z_T = rng.standard_normal(erased.dim)
        report = None
        z0_prime = regenerate(erased, z_T, Condition(concept), schedule,
                              guidance=config.attack.guidance)
    else:
        z_T, report = invert_for_arm(arm, erased, z0, schedule)
        z0_prime = regenerate(erased, z_T, NULL, schedule)
    predicted, posterior = bayes_classify(data_model, z0_prime)
    record = {
        "arm": arm.name,
        "index": index,
        "target_concept": concept,
        "predicted_concept": predicted,
        "posterior_prob": posterior,
        "recon_error_l2": reconstruction_error(z0, z0_prime),
        "status": "ok",
        "paths": {},
    }
    if out_dir is not None:
        # manifest paths are relative to the manifest's directory, so runs
        # with the same seed are byte-identical wherever they land
        rel = Path("samples") / arm.name / f"{index:04d}"
        sample_dir = out_dir / rel
        sample_dir.mkdir(parents=True, exist_ok=True)
        save_latent(z0, sample_dir / "target.lat")
        save_latent(z_T, sample_dir / "noise.lat")
        save_latent(z0_prime, sample_dir / "regen.lat")
        record["paths"] = {
            "target": str(rel / "target.lat"),
            "noise": str(rel / "noise.lat"),
            "regen": str(rel / "regen.lat"),
        }
        if report is not None:
            with open(sample_dir / "residuals.csv", "w", encoding="utf-8") as fh:
                fh.write("t,init_residual,final_residual,iterations_used\n")
                for t, init_r, final_r, iters in report.residual_curve():
                    fh.write(f"{t},{init_r!r},{final_r!r},{iters}\n")
            record["paths"]["residuals"] = str(rel / "residuals.csv")
    return record


def run_attack(config: ExperimentConfig, base_dir=None, save_artifacts=True):
    """Run every configured arm over N shared targets; returns the manifest.

    Any stage error marks that sample failed (and is kept in the manifest);
    more than 50% failures abort the whole run.
    """
    out_dir = Path(base_dir if base_dir is not None else config.output_dir)
    if save_artifacts:
        out_dir.mkdir(parents=True, exist_ok=True)
    schedule = config.schedule.build()
    data_model = config.data.build(schedule)
    original, train_history = build_original_model(
        config, schedule, data_model, out_dir if save_artifacts else None)
    erased, erase_history = build_erased_model(config, original, schedule)

    records = []
    failures = 0
    total = len(config.attack.arms) * config.attack.samples

    def job(args):
        arm_index, arm, i = args
        try:
            return _run_one(arm, i, config, schedule, original, erased, data_model,
                            out_dir if save_artifacts else None)
        except Exception as exc:
            return {"arm": arm.name, "index": i, "status": "failed",
                    "target_concept": config.attack.target_concept,
                    "error": f"{type(exc).__name__}: {exc}", "paths": {}}

    jobs = [(ai, arm, i) for ai, arm in enumerate(config.attack.arms)
            for i in range(config.attack.samples)]
    if config.attack.workers > 1:
        with ThreadPoolExecutor(max_workers=config.attack.workers) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(j) for j in jobs]
    for rec in results:
        records.append(rec)
        if rec["status"] == "failed":
            failures += 1
    if total and failures * 2 > total:
        raise RuntimeError(f"attack aborted: {failures}/{total} samples failed")

    manifest = {
        "tool_version": __version__,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "target_concept": config.attack.target_concept,
        "arms": [a.name for a in config.attack.arms],
        "records": records,
    }
    if train_history:
        manifest["training_loss"] = train_history
    if erase_history:
        manifest["erasure_loss"] = erase_history
    if save_artifacts:
        manifest_path = out_dir / "manifest.json"
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return manifest


def arm_records(manifest, arm_name):
    return [r for r in manifest["records"]
            if r["arm"] == arm_name and r["status"] == "ok"]


def arm_summary(manifest):
    """Per-arm (n, hits, asr, mean recon error) as exact counts."""
    out = []
    for arm in manifest["arms"]:
        recs = arm_records(manifest, arm)
        hits = sum(1 for r in recs if r["predicted_concept"] == r["target_concept"])
        mean_err = float(np.mean([r["recon_error_l2"] for r in recs])) if recs else float("nan")
        out.append({"arm": arm, "samples": len(recs), "hits": hits,
                    "asr": hits / len(recs) if recs else float("nan"),
                    "mean_recon_error": mean_err})
    return out


def arm_reports(manifest):
    """Typed per-arm outcome reports built from the manifest records."""
    from .evaluation import AttackReport, SampleRecord

    reports = []
    for arm in manifest["arms"]:
        recs = arm_records(manifest, arm)
        samples = tuple(SampleRecord(r["target_concept"], r["predicted_concept"],
                                     r["posterior_prob"], r["recon_error_l2"])
                        for r in recs)
        hits = sum(1 for s in samples if s.predicted_concept == s.target_concept)
        reports.append(AttackReport(arm=arm, samples=samples, hits=hits))
    return reports


def load_manifest(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def validate_manifest(manifest, config: ExperimentConfig, base_dir="."):
    """Integrity check: every referenced artifact loads and the recorded
    metrics recompute from it. ``base_dir`` anchors the manifest's relative
    paths. Returns a list of problems (empty = valid).
    """
    problems = []
    base = Path(base_dir)
    schedule = config.schedule.build()
    data_model = config.data.build(schedule)
    for rec in manifest["records"]:
        if rec["status"] != "ok":
            continue
        paths = rec.get("paths") or {}
        if not paths:
            continue
        try:
            z0 = load_latent(base / paths["target"])
            z0_prime = load_latent(base / paths["regen"])
            load_latent(base / paths["noise"])
        except Exception as exc:
            problems.append(f"{rec['arm']}#{rec['index']}: artifact unreadable: {exc}")
            continue
        err = reconstruction_error(z0, z0_prime)
        if abs(err - rec["recon_error_l2"]) > 1e-12:
            problems.append(f"{rec['arm']}#{rec['index']}: recon error mismatch")
        predicted, _ = bayes_classify(data_model, z0_prime)
        if predicted != rec["predicted_concept"]:
            problems.append(f"{rec['arm']}#{rec['index']}: classification mismatch")
    return problems
