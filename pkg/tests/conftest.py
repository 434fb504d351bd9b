"""Shared fixtures and independent numeric oracles.

Oracles here are written from first principles (closed-form optics and
geometry), deliberately not reusing the package's own arithmetic, so tests
compare two independent derivations.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from nerg.cli import RunConfig, demo_scene, parse_config
from nerg.field import Aabb


# ---------------------------------------------------------------------------
# analytic oracles


def beer_lambert_transmittance(sigma: float, length: float) -> float:
    """Transmittance through a homogeneous medium of given optical length."""
    return math.exp(-sigma * length)


def ray_sphere_entry(origin, direction, center, radius) -> float | None:
    """Distance to the first sphere intersection, or None if missed."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    oc = o - c
    b = float(np.dot(oc, d))
    disc = b * b - (float(np.dot(oc, oc)) - radius * radius)
    if disc < 0:
        return None
    t = -b - math.sqrt(disc)
    return t if t > 0 else None


def ray_box_interval(origin, direction, lo, hi):
    """(t_in, t_out) of a ray against an axis-aligned box, or None.

    Classic slab method; direction components of zero are handled by the
    IEEE inf convention.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (np.asarray(lo) - o) / d
        t2 = (np.asarray(hi) - o) / d
    t_near = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    t_far = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    t_in = float(np.max(t_near))
    t_out = float(np.min(t_far))
    if t_in > t_out:
        return None
    return t_in, t_out


def segment_hits_box(p0, p1, lo, hi, t_min=0.0, t_max=1.0):
    """Whether the segment p0->p1 crosses the box within (t_min, t_max)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    hit = ray_box_interval(p0, p1 - p0, lo, hi)
    if hit is None:
        return False
    t_in, t_out = hit
    return t_in < t_max and t_out > t_min


def vmf_density_reference(kappa: float, mu, omega) -> float:
    """vMF density from the textbook constant C(k) = k / (4 pi sinh k),
    evaluated in log space; independent of the package's formulation."""
    dot = float(np.dot(mu, omega))
    # log C(k) = log k - log(4 pi) - log(sinh k); sinh via exp for stability
    log_sinh = kappa + math.log1p(-math.exp(-2.0 * kappa)) - math.log(2.0)
    return math.exp(math.log(kappa) - math.log(4.0 * math.pi) - log_sinh + kappa * dot)


def kde_reference(rays: np.ndarray, kappa: float, omega) -> float:
    """Arithmetic-mean vMF KDE via the reference density."""
    return float(np.mean([vmf_density_reference(kappa, r, omega) for r in rays]))


# ---------------------------------------------------------------------------
# fixtures


@pytest.fixture(scope="session")
def shelf_scene():
    return demo_scene("shelf")


@pytest.fixture(scope="session")
def wall_scene():
    return demo_scene("wall")


@pytest.fixture()
def unit_cube_aabb():
    return Aabb(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))


TINY_CONFIG = {
    "schema_version": 1,
    "seed": 7,
    "out": "",  # filled per test
    "scene": {"preset": "shelf"},
    "gaze": {"synth": {"groups": [
        {"attractors": [{"point": [-0.78, -0.5, 1.0], "weight": 3.0},
                        {"point": [-0.78, 0.6, 0.7], "weight": 1.0}],
         "count": 600,
         "volume": {"min": [-0.55, -1.6, 1.2], "max": [-0.05, 1.6, 1.8]},
         "noise_kappa": 150.0}]}},
    "probes": {"placement": "grid", "radius": 0.1, "cap": 256, "kappa": 50.0},
    "model": {"variant": "emitcapture", "depth": 2, "width": 32,
              "l_pos": 4, "l_dir": 2},
    "train": {"epochs": 3, "batch_size": 2048, "train_probes": 48,
              "test_probes": 12, "samples_per_probe": 64},
    "integrator": {"near": 0.0, "far": 6.0, "steps": 96},
    "occlusion": {"enabled": True, "d_f": 0.05},
    "render": {"resolution": [64, 48],
               "camera": {"position": [0.0, -1.7, 1.5], "look_at": [0.0, 0.4, 0.9],
                          "fov_deg": 65.0},
               "observer": "coupled"},
    "eval": {"n_dirs": 128},
    "bench": {"resolution": [96, 72], "n_cams": 2},
}


def tiny_config(out_dir) -> RunConfig:
    obj = {**TINY_CONFIG, "out": str(out_dir)}
    # deep-copy nested dicts so tests can mutate their own copy safely
    import copy

    return parse_config(copy.deepcopy(obj))


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """One fully trained tiny pipeline, shared by CLI/render/service tests."""
    from nerg.cli import run_eval, run_gaze, run_probes, run_render, run_scene, run_train

    out = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config(out)
    for step in (run_scene, run_gaze, run_probes, run_train, run_eval, run_render):
        step(cfg)
    return cfg
