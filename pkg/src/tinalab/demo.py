"""The bundled demonstration setup.

A 25-component mixture in a 16-dim latent space whose means live in a
random 5-dim subspace, packed with pairwise distance >= 6 units. The
attacked concept "a" is a rare (weight 0.04), tight (sigma 0.25) mode --
regenerating it demands fine-scale fidelity, which is exactly what the
approximate inverter loses -- while concepts b, c, d own eight broad
(sigma 1.0) components each. The attacked model is a small network
trained on this mixture; the analytic mixture itself serves as the
ground-truth classifier.
"""

import numpy as np
import yaml

DEMO_MIX_SEED = 42
DEMO_DIM = 16
DEMO_SUBSPACE = 5
DEMO_MIN_SEP = 6.0
DEMO_BALL_RADIUS = 9.0
DEMO_N_COMPONENTS = 25
DEMO_PER_CONCEPT = 8
DEMO_W_A = 0.04
DEMO_SIGMA_A = 0.25
DEMO_SIGMA = 1.0


def demo_components():
    """Deterministic component layout: (weights, means, variances, concepts)."""
    rng = np.random.default_rng(DEMO_MIX_SEED)
    basis, _ = np.linalg.qr(rng.normal(size=(DEMO_DIM, DEMO_SUBSPACE)))
    pts = []
    while len(pts) < DEMO_N_COMPONENTS:
        cand = rng.normal(size=DEMO_SUBSPACE)
        cand = cand / np.linalg.norm(cand) * DEMO_BALL_RADIUS * rng.uniform(0, 1) ** (1 / DEMO_SUBSPACE)
        if all(np.linalg.norm(cand - p) >= DEMO_MIN_SEP for p in pts):
            pts.append(cand)
    pts = np.array(pts) @ basis.T
    center = pts.mean(axis=0)
    order = np.argsort(np.linalg.norm(pts - center, axis=1))
    a_idx = int(order[len(order) // 3])  # inside the pack, off-center
    others = [i for i in range(DEMO_N_COMPONENTS) if i != a_idx]
    means = np.vstack([pts[a_idx], pts[others]])
    weights = np.concatenate([[DEMO_W_A],
                              np.full(DEMO_N_COMPONENTS - 1,
                                      (1.0 - DEMO_W_A) / (DEMO_N_COMPONENTS - 1))])
    variances = np.concatenate([[DEMO_SIGMA_A ** 2],
                                np.full(DEMO_N_COMPONENTS - 1, DEMO_SIGMA ** 2)])
    concepts = {"a": [0]}
    for i, name in enumerate("bcd"):
        concepts[name] = list(range(1 + i * DEMO_PER_CONCEPT, 1 + (i + 1) * DEMO_PER_CONCEPT))
    return weights, means, variances, concepts


def demo_config_dict(seed=0, samples=100, erasure_method="remap",
                     arms=("text", "standard", {"name": "tinaless", "k": 5}, "tina"),
                     output_dir="tinalab_out"):
    weights, means, variances, concepts = demo_components()
    cfg = {
        "seed": seed,
        "output_dir": output_dir,
        "schedule": {"num_steps": 50, "beta_start": 1e-4, "beta_end": 0.02,
                     "train_steps": 1000},
        "data": {
            "dim": DEMO_DIM,
            "components": [
                {"weight": float(w), "mean": [float(v) for v in m], "variance": float(s2)}
                for w, m, s2 in zip(weights, means, variances)
            ],
            "concepts": concepts,
        },
        "model": {
            "kind": "mlp",
            "train": {
                "seed": 7, "epochs": 100, "batch_size": 128, "batches_per_epoch": 50,
                "lr": 2e-3, "hidden": [64, 64], "emb_dim": 4,
                "null_stream": 0.05, "concept_fractions": {"a": 0.4},
            },
        },
        "erasure": {"method": erasure_method, "concepts": ["a"]},
        "attack": {
            "target_concept": "a",
            "samples": samples,
            "guidance": 7.5,
            "target_filter": "bayes",
            "arms": list(arms),
            "tina": {"k": 25, "eta": 1e-3, "optimizer": "adamw",
                     "residual_tolerance": 1e-10},
        },
        "evaluation": {"separability_layer": 2, "separability_probe_step": 10},
    }
    if erasure_method == "finetune":
        cfg["erasure"]["finetune"] = {"seed": 11, "epochs": 40, "batch_size": 64,
                                      "batches_per_epoch": 40, "lr": 2e-3}
    return cfg


def demo_config_yaml(**kwargs) -> str:
    return yaml.safe_dump(demo_config_dict(**kwargs), sort_keys=False,
                          default_flow_style=None, width=100)


def write_demo_config(path, **kwargs):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(demo_config_yaml(**kwargs))
