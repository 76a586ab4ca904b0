"""Persistence: model files, latent dumps, trajectory exports.

Model files are self-describing JSON with a format-version field. Floats
are serialized with Python's shortest round-trip repr, keys are sorted and
indentation fixed, so save -> load -> save reproduces identical bytes.

Latent vectors use a small binary format: magic ``LATB``, little-endian
u32 version, u32 length, then float64 payload. Trajectories use magic
``TRJB`` with a (rows, dim, direction) header ahead of the payload.
"""

import json
import struct

import numpy as np

from .denoisers import Denoiser, ErasedDenoiser, GaussianMixtureDenoiser, MlpDenoiser
from .errors import ModelError
from .sampler import Trajectory
from .schedule import NoiseSchedule

MODEL_FORMAT_VERSION = 1
LATENT_MAGIC = b"LATB"
TRAJECTORY_MAGIC = b"TRJB"
BINARY_VERSION = 1


def _schedule_to_obj(schedule: NoiseSchedule):
    return {"alphas": schedule.alphas.tolist()}


def _schedule_from_obj(obj):
    return NoiseSchedule(np.asarray(obj["alphas"], dtype=np.float64))


def model_to_obj(model: Denoiser):
    if isinstance(model, GaussianMixtureDenoiser):
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": "mixture",
            "dim": model.dim,
            "weights": model.weights.tolist(),
            "means": model.means.tolist(),
            "variances": model.variances.tolist(),
            "concept_table": {k: list(v) for k, v in model.concept_table.items()},
            "schedule": _schedule_to_obj(model.schedule),
        }
    if isinstance(model, MlpDenoiser):
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": "mlp",
            "dim": model.dim,
            "hidden": list(model.hidden),
            "weights": [w.tolist() for w in model.ws],
            "biases": [b.tolist() for b in model.bs],
            "embeddings": model.embeddings.tolist(),
            "concepts": list(model.concept_ids),
            "num_steps": model.num_steps,
        }
    if isinstance(model, ErasedDenoiser):
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": "erased",
            "erased_concepts": sorted(model.erased_concepts),
            "base": model_to_obj(model.base),
        }
    raise ModelError(f"cannot serialize model of type {type(model).__name__}")


def model_from_obj(obj):
    version = obj.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelError(f"unsupported model format version {version!r}")
    kind = obj.get("kind")
    if kind == "mixture":
        return GaussianMixtureDenoiser(
            weights=np.asarray(obj["weights"], dtype=np.float64),
            means=np.asarray(obj["means"], dtype=np.float64),
            variance=np.asarray(obj["variances"], dtype=np.float64),
            concept_table=obj["concept_table"],
            schedule=_schedule_from_obj(obj["schedule"]),
        )
    if kind == "mlp":
        return MlpDenoiser(
            dim=obj["dim"],
            hidden=obj["hidden"],
            ws=[np.asarray(w, dtype=np.float64) for w in obj["weights"]],
            bs=[np.asarray(b, dtype=np.float64) for b in obj["biases"]],
            embeddings=np.asarray(obj["embeddings"], dtype=np.float64),
            concept_ids=obj["concepts"],
            num_steps=obj["num_steps"],
        )
    if kind == "erased":
        return ErasedDenoiser(model_from_obj(obj["base"]), obj["erased_concepts"])
    raise ModelError(f"unknown model kind {kind!r}")


def dumps_model(model: Denoiser) -> str:
    return json.dumps(model_to_obj(model), indent=2, sort_keys=True) + "\n"


def save_model(model: Denoiser, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> Denoiser:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_obj(json.load(fh))


def save_latent(z, path):
    z = np.ascontiguousarray(z, dtype="<f8")
    if z.ndim != 1:
        raise ValueError("latent dump holds a single vector")
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC)
        fh.write(struct.pack("<II", BINARY_VERSION, len(z)))
        fh.write(z.tobytes())


def load_latent(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != LATENT_MAGIC:
            raise ValueError(f"not a latent dump: bad magic {magic!r}")
        version, n = struct.unpack("<II", fh.read(8))
        if version != BINARY_VERSION:
            raise ValueError(f"unsupported latent dump version {version}")
        data = np.frombuffer(fh.read(8 * n), dtype="<f8")
        if len(data) != n:
            raise ValueError("latent dump truncated")
        return data.astype(np.float64)


def save_trajectory_binary(traj: Trajectory, path):
    lat = np.ascontiguousarray(traj.latents, dtype="<f8")
    direction_flag = 0 if traj.direction == "generation" else 1
    with open(path, "wb") as fh:
        fh.write(TRAJECTORY_MAGIC)
        fh.write(struct.pack("<IIII", BINARY_VERSION, lat.shape[0], lat.shape[1], direction_flag))
        fh.write(lat.tobytes())


def load_trajectory_binary(path) -> Trajectory:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TRAJECTORY_MAGIC:
            raise ValueError(f"not a trajectory dump: bad magic {magic!r}")
        version, rows, dim, direction_flag = struct.unpack("<IIII", fh.read(16))
        if version != BINARY_VERSION:
            raise ValueError(f"unsupported trajectory dump version {version}")
        data = np.frombuffer(fh.read(8 * rows * dim), dtype="<f8")
        if len(data) != rows * dim:
            raise ValueError("trajectory dump truncated")
        return Trajectory(data.reshape(rows, dim).astype(np.float64),
                          direction="generation" if direction_flag == 0 else "inversion")


def trajectory_csv_lines(traj: Trajectory):
    """CSV rows: step index in traversal order, then latent components."""
    dim = traj.latents.shape[1]
    header = "step," + ",".join(f"z{i}" for i in range(dim))
    lines = [header]
    for step, z in enumerate(traj.latents):
        lines.append(f"{step}," + ",".join(repr(float(v)) for v in z))
    return lines


def save_trajectory_csv(traj: Trajectory, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(trajectory_csv_lines(traj)) + "\n")
