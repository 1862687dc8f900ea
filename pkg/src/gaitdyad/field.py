"""Latent-space interaction forces and the continuous force fields regressed from them."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gmm as gm
from .strides import JOINT_NAMES, StrideDataset, denormalize, normalize
from .vae import VaeModel, decode, encode

ROLES = ("patient-field", "therapist-field")


def latent_force(z_self, z_other, k_stiff):
    """Spring force pulling ``z_self`` toward ``z_other``: K (z_other - z_self)."""
    k = np.asarray(k_stiff, dtype=float)
    if np.any(k < 0):
        raise ValueError("stiffness must be non-negative")
    z_self = np.asarray(z_self, dtype=float)
    diff = np.asarray(z_other, dtype=float) - z_self
    return (k[..., None] if k.ndim == diff.ndim - 1 else k) * diff


@dataclass
class LatentForceSamples:
    """Columnar LatentForceSample set for one joint and role."""

    z_p: np.ndarray  # (N, 2)
    F: np.ndarray  # (N, 2)
    joint: str
    role: str
    dyad_id: np.ndarray  # (N,)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if not (np.all(np.isfinite(self.z_p)) and np.all(np.isfinite(self.F))):
            raise ValueError("latent force samples must be finite")

    def __len__(self):
        return len(self.z_p)

    @property
    def joint_samples(self):
        return np.hstack([self.z_p, self.F])

    def subset(self, mask):
        return LatentForceSamples(self.z_p[mask], self.F[mask], self.joint, self.role, self.dyad_id[mask])


def latent_forces(dataset: StrideDataset, model: VaeModel, joint: str):
    """Encode every pair with the joint's VAE (latent mean) and apply the spring law.

    Both fields are indexed by the patient latent: the patient field holds
    F_p = K_p (z_t - z_p), the therapist field F_t = K_t (z_p - z_t).
    """
    if model.joint != joint:
        raise ValueError(f"model is for joint {model.joint!r}, requested {joint!r}")
    if model.stats is None:
        raise ValueError("model has no normalisation stats")
    j = JOINT_NAMES.index(joint)
    pat = np.stack([p.patient.values[j] for p in dataset.pairs])
    ther = np.stack([p.therapist.values[j] for p in dataset.pairs])
    z_p, _ = encode(model, normalize(pat, model.stats))
    z_t, _ = encode(model, normalize(ther, model.stats))
    k_p = np.array([p.patient.k_p[j] for p in dataset.pairs])
    k_t = np.array([p.patient.k_t[j] for p in dataset.pairs])
    dyad = np.array([p.patient.dyad_id for p in dataset.pairs])
    return (
        LatentForceSamples(z_p, latent_force(z_p, z_t, k_p), joint, "patient-field", dyad),
        LatentForceSamples(z_p, latent_force(z_t, z_p, k_t), joint, "therapist-field", dyad),
    )


def latent_bounds(z):
    z = np.asarray(z, dtype=float)
    return np.stack([z.min(axis=0), z.max(axis=0)], axis=1)  # (2, [lo, hi])


def sample_grid(bounds, resolution: int = 25) -> np.ndarray:
    """Regular grid over closed per-axis bounds; first coordinate varies fastest."""
    bounds = np.asarray(bounds, dtype=float)
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if bounds.shape != (2, 2) or np.any(bounds[:, 1] <= bounds[:, 0]):
        raise ValueError(f"degenerate latent bounds {bounds.tolist()}")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in bounds]
    g2, g1 = np.meshgrid(axes[1], axes[0], indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()])


@dataclass
class ForceField:
    """FieldRecord table: grid points, decoded strides (deg), E[F|z], Cov[F|z]."""

    z: np.ndarray
    strides: np.ndarray
    F: np.ndarray
    cov: np.ndarray
    joint: str
    role: str
    resolution: int
    bounds: np.ndarray
    gmm: gm.GmmModel

    def __len__(self):
        return len(self.z)

    def write(self, path):
        """CSV (one row per grid point) plus a JSON sidecar with grid spec and mixture parameters."""
        path = Path(path)
        n = self.strides.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z1", "z2", "F1", "F2", "covF11", "covF12", "covF22", *[f"s{i}" for i in range(n)]])
            for z, F, C, s in zip(self.z, self.F, self.cov, self.strides):
                w.writerow([repr(float(v)) for v in (*z, *F, C[0, 0], C[0, 1], C[1, 1], *s)])
        meta = {
            "joint": self.joint,
            "role": self.role,
            "grid": {"resolution": self.resolution, "bounds": self.bounds.tolist(), "order": "z1 fastest"},
            "gmm": self.gmm.to_dict(),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def build_field(gmm: gm.GmmModel, decoder: VaeModel, bounds, resolution: int = 25, role: str = "patient-field") -> ForceField:
    if gmm.joint and gmm.joint != decoder.joint:
        raise ValueError(f"mixture joint {gmm.joint!r} does not match decoder joint {decoder.joint!r}")
    grid = sample_grid(bounds, resolution)
    s = decode(decoder, grid)
    if decoder.stats is not None:
        s = denormalize(s, decoder.stats)
    F, cov = gm.gmr_expect(gmm, grid)
    return ForceField(grid, s, F, cov, decoder.joint, role, resolution, np.asarray(bounds, dtype=float), gmm)


def fit_field(samples: LatentForceSamples, decoder: VaeModel, K: int = 10, config: gm.GmmConfig | None = None,
              resolution: int = 25) -> ForceField:
    """Fit the joint (z_p, F) mixture and evaluate it on a grid spanning the observed latents."""
    mix = gm.fit_gmm(samples.joint_samples, K, config, joint=samples.joint)
    return build_field(mix, decoder, latent_bounds(samples.z_p), resolution, samples.role)


def fit_fields(dataset: StrideDataset, models: dict, K: int = 10, config: gm.GmmConfig | None = None,
               resolution: int = 25, pooled: bool = True) -> dict:
    """Fields for every joint and role; keys (joint, role) or (joint, role, dyad_id) when not pooled."""
    out = {}
    for joint in JOINT_NAMES:
        for samples in latent_forces(dataset, models[joint], joint):
            if pooled:
                out[(joint, samples.role)] = fit_field(samples, models[joint], K, config, resolution)
            else:
                for d in np.unique(samples.dyad_id):
                    sub = samples.subset(samples.dyad_id == d)
                    out[(joint, samples.role, int(d))] = fit_field(sub, models[joint], K, config, resolution)
    return out


def mean_angle_deviation(F_a, F_b, min_norm: float = 0.0) -> float:
    """Mean angle in degrees between paired 2-D vectors, ignoring rows where either is shorter than ``min_norm``."""
    F_a = np.atleast_2d(F_a)
    F_b = np.atleast_2d(F_b)
    na = np.linalg.norm(F_a, axis=1)
    nb = np.linalg.norm(F_b, axis=1)
    keep = (na > min_norm) & (nb > min_norm)
    cos = np.sum(F_a[keep] * F_b[keep], axis=1) / (na[keep] * nb[keep])
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).mean())


def interior_mask(resolution: int) -> np.ndarray:
    """Grid points not on the outer ring."""
    idx = np.arange(resolution * resolution)
    i1, i2 = idx % resolution, idx // resolution
    return (i1 > 0) & (i1 < resolution - 1) & (i2 > 0) & (i2 < resolution - 1)
