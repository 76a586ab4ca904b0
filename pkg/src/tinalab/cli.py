"""Command-line interface.

Subcommands map one-to-one onto the library operations: train, erase,
sample, invert, attack, eval, export. Every subcommand takes --config and
honors --seed / --output-dir overrides. Exit codes: 0 success, 2 config
error, 3 numeric/training error, 4 I/O error, 1 anything else. Errors go
to stderr with a machine-parseable prefix "tinalab: error [<class>]:".
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .attack import (
    arm_summary,
    build_erased_model,
    build_original_model,
    draw_target,
    load_manifest,
    run_attack,
    validate_manifest,
)
from .config import load_config
from .denoisers import NULL, Condition
from .errors import ConfigError, NumericError, TrainingError
from .export import export_results
from .inversion import TinaConfig, standard_inversion, tina_inversion
from .model_io import (
    load_latent,
    save_latent,
    save_model,
    save_trajectory_binary,
    save_trajectory_csv,
)
from .sampler import ddim_sample


def _write_loss_csv(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, loss in enumerate(history):
            fh.write(f"{epoch},{loss!r}\n")


def _prepare(args):
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.output_dir is not None:
        config = dataclasses.replace(config, output_dir=args.output_dir)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return config, out


def cmd_train(args):
    config, out = _prepare(args)
    schedule = config.schedule.build()
    data_model = config.data.build(schedule)
    if config.model.train is None:
        raise ConfigError(["train: the config has no model.train block"])
    model, history = build_original_model(config, schedule, data_model, out)
    path = Path(config.model.path) if config.model.path else out / "model.json"
    if not path.exists():
        save_model(model, path)
    if history:
        _write_loss_csv(history, out / "loss_curve.csv")
    print(f"model written to {path}" + (f"; loss {history[0]:.4f} -> {history[-1]:.4f}"
                                        if history else " (loaded, no training run)"))
    return 0


def cmd_erase(args):
    config, out = _prepare(args)
    schedule = config.schedule.build()
    data_model = config.data.build(schedule)
    original, _ = build_original_model(config, schedule, data_model, out)
    erased, history = build_erased_model(config, original, schedule)
    path = out / "erased_model.json"
    save_model(erased, path)
    if history:
        _write_loss_csv(history, out / "erasure_loss_curve.csv")
    print(f"erased model ({config.erasure.method}: {', '.join(config.erasure.concepts)}) "
          f"written to {path}")
    return 0


def cmd_sample(args):
    config, out = _prepare(args)
    schedule = config.schedule.build()
    data_model = config.data.build(schedule)
    original, _ = build_original_model(config, schedule, data_model, out)
    model = original
    if args.erased:
        model, _ = build_erased_model(config, original, schedule)
    condition = Condition(args.concept) if args.concept else NULL
    rng = np.random.default_rng([config.seed, 3, args.index])
    z_T = rng.standard_normal(model.dim)
    guidance = config.attack.guidance if args.guided else None
    traj = ddim_sample(model, z_T, condition, schedule, guidance=guidance)
    stem = out / f"sample_{args.index:04d}"
    save_trajectory_csv(traj, stem.with_suffix(".csv"))
    save_trajectory_binary(traj, stem.with_suffix(".trj"))
    save_latent(traj.final, stem.with_suffix(".lat"))
    print(f"trajectory written to {stem}.csv / .trj; final latent to {stem}.lat")
    return 0


def cmd_invert(args):
    config, out = _prepare(args)
    schedule = config.schedule.build()
    data_model = config.data.build(schedule)
    original, _ = build_original_model(config, schedule, data_model, out)
    erased, _ = build_erased_model(config, original, schedule)
    if args.input:
        z0 = load_latent(args.input)
    else:
        z0, _ = draw_target(original, data_model, schedule,
                            config.attack.target_concept, config.seed, args.index,
                            config.attack.target_filter, config.attack.max_target_attempts)
    if args.mode == "standard":
        condition = Condition(args.condition) if args.condition else NULL
        report = standard_inversion(erased, z0, condition, schedule)
    else:
        base = next((a.tina for a in config.attack.arms if a.tina is not None),
                    TinaConfig())
        overrides = {}
        if args.k is not None:
            overrides["k"] = args.k
        if args.eta is not None:
            overrides["eta"] = args.eta
        report = tina_inversion(erased, z0, schedule,
                                dataclasses.replace(base, **overrides))
    stem = out / f"invert_{args.mode}_{args.index:04d}"
    save_latent(report.z_T_star, Path(f"{stem}.lat"))
    with open(f"{stem}_residuals.csv", "w", encoding="utf-8") as fh:
        fh.write("t,init_residual,final_residual,iterations_used\n")
        for t, init_r, final_r, iters in report.residual_curve():
            fh.write(f"{t},{init_r!r},{final_r!r},{iters}\n")
    final = report.per_step[-1].final_residual if report.per_step else 0.0
    print(f"optimized noise written to {stem}.lat (mode {report.mode}, "
          f"last-step residual {final:.3e})")
    return 0


def cmd_attack(args):
    config, out = _prepare(args)
    manifest = run_attack(config, base_dir=out)
    for row in arm_summary(manifest):
        asr = f"{row['asr']:.4f}" if row["samples"] else "n/a"
        print(f"{row['arm']:<16} samples={row['samples']:<4} hits={row['hits']:<4} asr={asr}")
    print(f"manifest written to {out / 'manifest.json'}")
    return 0


def cmd_eval(args):
    config, out = _prepare(args)
    if args.separability:
        return _eval_separability(config, out)
    manifest_path = Path(args.manifest) if args.manifest else out / "manifest.json"
    manifest = load_manifest(manifest_path)
    problems = validate_manifest(manifest, config, base_dir=manifest_path.parent)
    for row in arm_summary(manifest):
        asr = f"{row['asr']:.4f}" if row["samples"] else "n/a"
        err = f"{row['mean_recon_error']:.4f}" if row["samples"] else "n/a"
        print(f"{row['arm']:<16} samples={row['samples']:<4} hits={row['hits']:<4} "
              f"asr={asr} mean_recon={err}")
    if problems:
        for p in problems:
            print(f"integrity: {p}", file=sys.stderr)
        return 1
    print("manifest integrity: ok")
    return 0


def _eval_separability(config, out):
    from .denoisers import MlpDenoiser
    from .export import export_separability
    from .separability import run_separability

    schedule = config.schedule.build()
    data_model = config.data.build(schedule)
    model, _ = build_original_model(config, schedule, data_model, out)
    if not isinstance(model, MlpDenoiser):
        raise ConfigError(["separability analysis needs a network model (kind: mlp)"])
    tina = next((a.tina for a in config.attack.arms if a.tina is not None), TinaConfig())
    result = run_separability(
        model, data_model, schedule,
        per_concept=config.evaluation.separability_per_concept,
        probe_step=config.evaluation.separability_probe_step,
        layer=config.evaluation.separability_layer,
        tina=tina, seed=config.seed)
    written = export_separability(result.noises, result.features, list(result.labels),
                                  {"noise": result.noise_silhouette,
                                   "features": result.feature_silhouette},
                                  out / "separability")
    print(f"silhouette: noises {result.noise_silhouette:.4f}, "
          f"features {result.feature_silhouette:.4f} "
          f"(layer {result.layer}, probe step {result.probe_step})")
    for path in written:
        print(path)
    return 0


def cmd_export(args):
    config, out = _prepare(args)
    manifest_path = Path(args.manifest) if args.manifest else out / "manifest.json"
    manifest = load_manifest(manifest_path)
    written = export_results(manifest, args.export_dir or out / "report",
                             base_dir=manifest_path.parent)
    for path in written:
        print(path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tinalab",
        description="Text-free inversion attacks on concept-erased diffusion models, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--output-dir", default=None, help="override the output directory")

    common(sub.add_parser("train", help="train the network denoiser from the data spec"))
    common(sub.add_parser("erase", help="build and save the erased model"))

    p = sub.add_parser("sample", help="run deterministic generation from seeded noise")
    common(p)
    p.add_argument("--concept", default=None, help="condition (omit for null)")
    p.add_argument("--guided", action="store_true", help="apply the config guidance scale")
    p.add_argument("--erased", action="store_true", help="sample the erased model")
    p.add_argument("--index", type=int, default=0, help="noise index within the seed stream")

    p = sub.add_parser("invert", help="trace a target latent back to initial noise")
    common(p)
    p.add_argument("--mode", choices=("standard", "tina"), default="tina")
    p.add_argument("--k", type=int, default=None, help="inner iterations override")
    p.add_argument("--eta", type=float, default=None, help="inner learning rate override")
    p.add_argument("--input", default=None, help="latent dump to invert (default: drawn target)")
    p.add_argument("--condition", default=None,
                   help="debug: condition for standard inversion (default null)")
    p.add_argument("--index", type=int, default=0, help="target index within the seed stream")

    common(sub.add_parser("attack", help="run the configured arms end to end"))

    p = sub.add_parser("eval", help="summarize and integrity-check a manifest")
    common(p)
    p.add_argument("--manifest", default=None, help="manifest path (default: <out>/manifest.json)")
    p.add_argument("--separability", action="store_true",
                   help="run the latent separability analysis instead")

    p = sub.add_parser("export", help="write CSV tables and SVG figures from a manifest")
    common(p)
    p.add_argument("--manifest", default=None, help="manifest path (default: <out>/manifest.json)")
    p.add_argument("--export-dir", default=None, help="directory for the report files")
    return parser


_HANDLERS = {
    "train": cmd_train, "erase": cmd_erase, "sample": cmd_sample,
    "invert": cmd_invert, "attack": cmd_attack, "eval": cmd_eval,
    "export": cmd_export,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"tinalab: error [config]: {problem}", file=sys.stderr)
        return 2
    except (NumericError, TrainingError) as exc:
        print(f"tinalab: error [numeric]: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"tinalab: error [io]: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # pragma: no cover - defensive
        print(f"tinalab: error [internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
