"""Result export: delimited tables plus figures rendered alongside them.

CSV files carry full-precision floats (shortest round-trip repr) and are
byte-stable across runs of the same seed. Figures are SVG with a fixed
hash salt and no date metadata, so re-exports of identical data produce
identical files.
"""

import csv
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "tinalab"

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .attack import arm_records, arm_summary  # noqa: E402
from .evaluation import pca_projection  # noqa: E402
from .model_io import load_latent  # noqa: E402

SAMPLE_COLUMNS = ("index", "target_concept", "predicted_concept",
                  "posterior_prob", "recon_error_l2")
SUMMARY_COLUMNS = ("arm", "samples", "hits", "asr", "mean_recon_error")

_ARM_COLORS = {"TextGuided": "tab:gray", "StandardInvNull": "tab:orange",
               "TinaLessK": "tab:green", "Tina": "tab:blue"}


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _savefig(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def export_results(manifest, out_dir, base_dir="."):
    """Write per-arm sample tables, the summary, residual curves, loss
    curves and SVG figures. ``base_dir`` anchors the manifest's relative
    artifact paths. Returns the list of written paths.
    """
    out = Path(out_dir)
    base = Path(base_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    # per-arm sample tables
    for arm in manifest["arms"]:
        recs = arm_records(manifest, arm)
        path = out / f"samples_{arm}.csv"
        _write_csv(path, SAMPLE_COLUMNS,
                   [(r["index"], r["target_concept"], r["predicted_concept"],
                     r["posterior_prob"], r["recon_error_l2"]) for r in recs])
        written.append(path)

    # summary table (exact count ratios) as CSV and aligned text
    summary = arm_summary(manifest)
    path = out / "summary.csv"
    _write_csv(path, SUMMARY_COLUMNS,
               [(s["arm"], s["samples"], s["hits"], s["asr"], s["mean_recon_error"])
                for s in summary])
    written.append(path)
    text_path = out / "summary.txt"
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(f"{'arm':<16}{'samples':>9}{'hits':>7}{'asr':>9}{'mean_recon':>13}\n")
        for s in summary:
            asr = f"{s['asr']:.4f}" if s["samples"] else "n/a"
            err = f"{s['mean_recon_error']:.4f}" if s["samples"] else "n/a"
            fh.write(f"{s['arm']:<16}{s['samples']:>9}{s['hits']:>7}{asr:>9}{err:>13}\n")
    written.append(text_path)

    # residual-vs-step tables and figure
    curves = {}
    for arm in manifest["arms"]:
        rows = _mean_residual_curve(manifest, arm, base)
        if rows is None:
            continue
        path = out / f"residuals_{arm}.csv"
        _write_csv(path, ("t", "mean_init_residual", "mean_final_residual"), rows)
        written.append(path)
        curves[arm] = rows
    if curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        for arm, rows in curves.items():
            ts = [r[0] for r in rows]
            ax.semilogy(ts, [max(r[1], 1e-300) for r in rows], "--",
                        color=_ARM_COLORS.get(arm, "k"), alpha=0.6)
            ax.semilogy(ts, [max(r[2], 1e-300) for r in rows], "-",
                        color=_ARM_COLORS.get(arm, "k"), label=arm)
        ax.set_xlabel("inversion step t")
        ax.set_ylabel("fixed-point residual")
        ax.set_title("per-step residual before (dashed) and after refinement")
        ax.legend()
        fig.tight_layout()
        path = out / "residuals.svg"
        _savefig(fig, path)
        written.append(path)

    # training / erasure loss curves
    for key, name in (("training_loss", "loss_curve.csv"),
                      ("erasure_loss", "erasure_loss_curve.csv")):
        if key in manifest:
            path = out / name
            _write_csv(path, ("epoch", "mean_loss"),
                       list(enumerate(manifest[key])))
            written.append(path)

    # 2-D scatter of regenerated latents colored by classification
    points, labels, arms_of = [], [], []
    for arm in manifest["arms"]:
        for r in arm_records(manifest, arm):
            regen = r.get("paths", {}).get("regen")
            if regen and (base / regen).exists():
                points.append(load_latent(base / regen))
                labels.append(r["predicted_concept"])
                arms_of.append(arm)
    if points:
        proj = pca_projection(np.asarray(points))
        concepts = sorted(set(labels))
        cmap = plt.get_cmap("tab10")
        fig, axes = plt.subplots(1, len(manifest["arms"]), figsize=(4 * len(manifest["arms"]), 4),
                                 sharex=True, sharey=True, squeeze=False)
        for col, arm in enumerate(manifest["arms"]):
            ax = axes[0][col]
            for ci, concept in enumerate(concepts):
                mask = [(a == arm and lab == concept) for a, lab in zip(arms_of, labels)]
                if any(mask):
                    sel = proj[np.asarray(mask)]
                    ax.scatter(sel[:, 0], sel[:, 1], s=12, color=cmap(ci % 10),
                               label=concept)
            ax.set_title(arm)
            ax.set_xlabel("pc 1")
            if col == 0:
                ax.set_ylabel("pc 2")
                ax.legend(title="classified as", fontsize=8)
        fig.suptitle("regenerated latents (shared 2-D projection)")
        fig.tight_layout()
        path = out / "scatter.svg"
        _savefig(fig, path)
        written.append(path)

    return written


def _mean_residual_curve(manifest, arm, base):
    """Mean per-step residuals over an arm's samples, read back from the
    per-sample CSV artifacts; None when the arm has no inversion reports."""
    init_sums, final_sums, counts = {}, {}, {}
    found = False
    for rec in arm_records(manifest, arm):
        path = rec.get("paths", {}).get("residuals")
        path = (base / path) if path else None
        if not path or not Path(path).exists():
            continue
        found = True
        with open(path, "r", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                t = int(row["t"])
                init_sums[t] = init_sums.get(t, 0.0) + float(row["init_residual"])
                final_sums[t] = final_sums.get(t, 0.0) + float(row["final_residual"])
                counts[t] = counts.get(t, 0) + 1
    if not found:
        return None
    return [(t, init_sums[t] / counts[t], final_sums[t] / counts[t])
            for t in sorted(counts)]


def export_separability(z_noises, features, labels, scores, out_dir):
    """Separability artifacts: silhouette summary, the 2-D projections as
    CSV, and a side-by-side scatter figure. ``scores`` maps the space name
    ("noise", "features") to its silhouette value."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "separability.csv"
    _write_csv(path, ("space", "silhouette"), sorted(scores.items()))
    written.append(path)
    concepts = sorted(set(labels))
    cmap = plt.get_cmap("tab10")
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    panels = (("noise", "optimized initial noises", z_noises),
              ("features", "hidden-layer features", features))
    for ax, (key, title, vectors) in zip(axes, panels):
        proj = pca_projection(np.asarray(vectors))
        csv_path = out / f"projection_{key}.csv"
        _write_csv(csv_path, ("label", "pc1", "pc2"),
                   [(lab, p[0], p[1]) for lab, p in zip(labels, proj)])
        written.append(csv_path)
        for ci, concept in enumerate(concepts):
            sel = proj[np.asarray([lab == concept for lab in labels])]
            ax.scatter(sel[:, 0], sel[:, 1], s=12, color=cmap(ci % 10), label=concept)
        ax.set_title(f"{title} (silhouette {scores[key]:.3f})")
        ax.set_xlabel("pc 1")
    axes[0].set_ylabel("pc 2")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = out / "separability.svg"
    _savefig(fig, path)
    written.append(path)
    return written
