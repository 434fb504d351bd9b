"""Batch pipeline: scene/gaze/probes/train/eval/render/bench/serve.

All commands share one JSON config schema (strict: unknown keys are
rejected) plus a handful of flag overrides, and every command writes its
artifacts together with a manifest recording the fully resolved config,
seeds, library versions and input hashes.  Artifacts are reproducible
byte-for-byte from the same config; timestamps live only in manifests.

Exit codes: 0 success, 2 config or input parse failure, 3 missing input
file, 4 numeric divergence during training, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import (ConfigurationError, DataFormatError, DivergenceError, NergError,
               __version__)
from .core import Camera, Vec3, WorldTransform
from .field import (Aabb, AnalyticScene, Box, IntegratorConfig, Slab, Sphere,
                    load_scene, load_voxel_grid, save_scene)
from .nerg import (EncodingConfig, NergModel, TrainConfig, evaluate,
                   load_checkpoint, save_checkpoint, save_loss_history,
                   train_on_probes)
from .probes import (build_probes, load_gaze_rays, load_probe_set,
                     save_gaze_rays, save_probe_set, split_probe_set, synth_gaze)
from .render import (ObserverState, OcclusionConfig, bench_frame_time, colorize,
                     render_frame, save_bench_report, save_frame_buffers, save_png)

SCHEMA_VERSION = 1

_VARIANT_FLAG = {"emit": "emit", "capture": "capture", "emit-capture": "emitcapture"}


# ---------------------------------------------------------------------------
# config schema


@dataclass(frozen=True)
class SynthGroup:
    """One population of synthetic observers and what they attend to."""

    attractors: tuple   # ((x, y, z), weight) pairs
    count: int
    volume: Aabb
    noise_kappa: float = 150.0


@dataclass(frozen=True)
class CameraSpec:
    position: tuple
    look_at: tuple
    up: tuple = (0.0, 0.0, 1.0)
    fov_deg: float = 60.0

    def build(self, width: int, height: int) -> Camera:
        return Camera.look_at(Vec3(*self.position), Vec3(*self.look_at),
                              up_hint=self.up,
                              fov_y=float(np.deg2rad(self.fov_deg)),
                              width=width, height=height)

    def to_json(self) -> dict:
        return {"position": list(self.position), "look_at": list(self.look_at),
                "up": list(self.up), "fov_deg": self.fov_deg}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "out"
    scene_preset: str | None = "shelf"
    scene_path: str | None = None
    gaze_path: str | None = None
    synth_groups: tuple = ()
    world_transform: tuple | None = None  # 16 row-major floats
    probes_placement: str = "grid"
    probes_radius: float = 0.1
    probes_cap: int = 1024
    probes_kappa: float = 50.0
    probes_spacing: float | None = None
    probes_count: int | None = None
    variant: str = "emitcapture"
    depth: int = 4
    width: int = 128
    l_pos: int = 10
    l_dir: int = 4
    include_raw: bool = True
    train: TrainConfig = TrainConfig()
    integrator: IntegratorConfig = IntegratorConfig()
    occlusion: OcclusionConfig = OcclusionConfig()
    render_resolution: tuple = (512, 512)
    camera: CameraSpec = CameraSpec((0.0, -1.7, 1.5), (0.0, 0.4, 0.9))
    observer: object = "coupled"  # "coupled" or an (x, y, z) tuple
    colormap: str = "viridis"
    alpha: float = 0.6
    g_max: float | None = None
    eval_n_dirs: int = 1024
    bench_resolution: tuple = (1280, 720)
    bench_cams: int = 32
    service_port: int = 8000
    service_max_resolution: tuple = (1024, 1024)
    service_queue_depth: int = 4

    def to_json(self) -> dict:
        """The fully resolved config, in the same shape the file uses."""
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "out": self.out,
            "scene": {"preset": self.scene_preset, "path": self.scene_path},
            "gaze": {
                "path": self.gaze_path,
                "world_transform": list(self.world_transform) if self.world_transform else None,
                "synth": {"groups": [
                    {"attractors": [{"point": list(p), "weight": w}
                                    for p, w in g.attractors],
                     "count": g.count,
                     "volume": g.volume.to_json(),
                     "noise_kappa": g.noise_kappa}
                    for g in self.synth_groups]},
            },
            "probes": {"placement": self.probes_placement, "radius": self.probes_radius,
                       "cap": self.probes_cap, "kappa": self.probes_kappa,
                       "spacing": self.probes_spacing, "count": self.probes_count},
            "model": {"variant": self.variant, "depth": self.depth, "width": self.width,
                      "l_pos": self.l_pos, "l_dir": self.l_dir,
                      "include_raw": self.include_raw},
            "train": {"epochs": self.train.epochs, "lr": self.train.lr,
                      "batch_size": self.train.batch_size, "beta1": self.train.beta1,
                      "beta2": self.train.beta2, "adam_eps": self.train.adam_eps,
                      "train_probes": self.train.train_probes,
                      "test_probes": self.train.test_probes,
                      "samples_per_probe": self.train.samples_per_probe},
            "integrator": {"near": self.integrator.near, "far": self.integrator.far,
                           "steps": self.integrator.steps,
                           "early_stop": self.integrator.early_stop,
                           "opacity_threshold": self.integrator.opacity_threshold,
                           "background_depth": self.integrator.background_depth,
                           "jitter": self.integrator.jitter},
            "occlusion": {"enabled": self.occlusion.enabled, "d_f": self.occlusion.d_f,
                          "eps": self.occlusion.eps},
            "render": {"resolution": list(self.render_resolution),
                       "camera": self.camera.to_json(),
                       "observer": self.observer if isinstance(self.observer, str)
                       else list(self.observer),
                       "colormap": self.colormap, "alpha": self.alpha,
                       "g_max": self.g_max},
            "eval": {"n_dirs": self.eval_n_dirs},
            "bench": {"resolution": list(self.bench_resolution),
                      "n_cams": self.bench_cams},
            "service": {"port": self.service_port,
                        "max_resolution": list(self.service_max_resolution),
                        "queue_depth": self.service_queue_depth},
        }


def _strict(obj: dict, allowed, ctx: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{ctx}: expected an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigurationError(f"{ctx}: unknown keys {unknown}")


def _num(obj, key, ctx, default=None, integer=False, optional=False):
    if key not in obj or obj[key] is None:
        if default is not None or optional:
            return default
        raise ConfigurationError(f"{ctx}: missing required key '{key}'")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError(f"{ctx}.{key}: expected a number, got {v!r}")
    if integer:
        if not isinstance(v, int):
            raise ConfigurationError(f"{ctx}.{key}: expected an integer, got {v!r}")
        return v
    return float(v)


def _vec(obj, key, ctx, length=3, default=None):
    if key not in obj or obj[key] is None:
        if default is not None:
            return default
        raise ConfigurationError(f"{ctx}: missing required key '{key}'")
    v = obj[key]
    if (not isinstance(v, list) or len(v) != length
            or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v)):
        raise ConfigurationError(f"{ctx}.{key}: expected {length} numbers")
    return tuple(float(x) for x in v)


def _aabb_json(obj, ctx) -> Aabb:
    _strict(obj, {"min", "max"}, ctx)
    return Aabb(np.asarray(_vec(obj, "min", ctx)), np.asarray(_vec(obj, "max", ctx)))


def parse_config(obj: dict) -> RunConfig:
    """Validate a config dict against the schema; every key is checked."""
    _strict(obj, {"schema_version", "seed", "out", "scene", "gaze", "probes",
                  "model", "train", "integrator", "occlusion", "render", "eval",
                  "bench", "service"}, "config")
    version = obj.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"config: unsupported schema_version {version}")
    cfg = RunConfig()

    seed = _num(obj, "seed", "config", default=cfg.seed, integer=True)
    out = obj.get("out", cfg.out)
    if not isinstance(out, str):
        raise ConfigurationError("config.out: expected a string path")

    scene_preset, scene_path = cfg.scene_preset, cfg.scene_path
    if "scene" in obj:
        sc = obj["scene"]
        _strict(sc, {"preset", "path"}, "config.scene")
        scene_preset = sc.get("preset")
        scene_path = sc.get("path")
        if scene_preset is not None and scene_preset not in PRESET_NAMES:
            raise ConfigurationError(
                f"config.scene.preset: unknown preset {scene_preset!r}; "
                f"choices are {sorted(PRESET_NAMES)}")
        if scene_preset is None and scene_path is None:
            raise ConfigurationError("config.scene: need 'preset' or 'path'")

    gaze_path, groups, world_transform = cfg.gaze_path, cfg.synth_groups, None
    if "gaze" in obj:
        gz = obj["gaze"]
        _strict(gz, {"path", "synth", "world_transform"}, "config.gaze")
        gaze_path = gz.get("path")
        wt = gz.get("world_transform")
        if wt is not None:
            if not isinstance(wt, list) or len(wt) != 16:
                raise ConfigurationError(
                    "config.gaze.world_transform: expected 16 row-major numbers")
            WorldTransform.from_flat(wt)  # validates it is a similarity
            world_transform = tuple(float(x) for x in wt)
        if "synth" in gz and gz["synth"] is not None:
            _strict(gz["synth"], {"groups"}, "config.gaze.synth")
            raw_groups = gz["synth"].get("groups", [])
            if not isinstance(raw_groups, list):
                raise ConfigurationError("config.gaze.synth.groups: expected a list")
            parsed = []
            for i, g in enumerate(raw_groups):
                ctx = f"config.gaze.synth.groups[{i}]"
                _strict(g, {"attractors", "count", "volume", "noise_kappa"}, ctx)
                attractors = []
                for j, a in enumerate(g.get("attractors", [])):
                    _strict(a, {"point", "weight"}, f"{ctx}.attractors[{j}]")
                    attractors.append((_vec(a, "point", f"{ctx}.attractors[{j}]"),
                                       _num(a, "weight", f"{ctx}.attractors[{j}]",
                                            default=1.0)))
                if not attractors:
                    raise ConfigurationError(f"{ctx}: needs at least one attractor")
                parsed.append(SynthGroup(
                    tuple(attractors),
                    _num(g, "count", ctx, integer=True),
                    _aabb_json(g.get("volume", {}), f"{ctx}.volume"),
                    _num(g, "noise_kappa", ctx, default=150.0)))
            groups = tuple(parsed)

    pb = obj.get("probes", {})
    _strict(pb, {"placement", "radius", "cap", "kappa", "spacing", "count"},
            "config.probes")
    placement = pb.get("placement", cfg.probes_placement)
    if placement not in ("grid", "random"):
        raise ConfigurationError("config.probes.placement: must be 'grid' or 'random'")

    md = obj.get("model", {})
    _strict(md, {"variant", "depth", "width", "l_pos", "l_dir", "include_raw"},
            "config.model")
    variant = md.get("variant", cfg.variant)
    if variant not in ("emit", "capture", "emitcapture"):
        raise ConfigurationError(
            f"config.model.variant: must be emit|capture|emitcapture, got {variant!r}")
    include_raw = md.get("include_raw", cfg.include_raw)
    if not isinstance(include_raw, bool):
        raise ConfigurationError("config.model.include_raw: expected true/false")

    tr = obj.get("train", {})
    _strict(tr, {"epochs", "lr", "batch_size", "beta1", "beta2", "adam_eps",
                 "train_probes", "test_probes", "samples_per_probe"}, "config.train")
    d = cfg.train
    train = TrainConfig(
        epochs=_num(tr, "epochs", "config.train", default=d.epochs, integer=True),
        lr=_num(tr, "lr", "config.train", default=d.lr),
        batch_size=_num(tr, "batch_size", "config.train", default=d.batch_size,
                        integer=True),
        beta1=_num(tr, "beta1", "config.train", default=d.beta1),
        beta2=_num(tr, "beta2", "config.train", default=d.beta2),
        adam_eps=_num(tr, "adam_eps", "config.train", default=d.adam_eps),
        seed=seed,
        train_probes=_num(tr, "train_probes", "config.train",
                          default=d.train_probes, integer=True),
        test_probes=_num(tr, "test_probes", "config.train",
                         default=d.test_probes, integer=True),
        samples_per_probe=_num(tr, "samples_per_probe", "config.train",
                               default=d.samples_per_probe, integer=True))

    it = obj.get("integrator", {})
    _strict(it, {"near", "far", "steps", "early_stop", "opacity_threshold",
                 "background_depth", "jitter"}, "config.integrator")
    di = cfg.integrator
    jitter = it.get("jitter", di.jitter)
    if not isinstance(jitter, bool):
        raise ConfigurationError("config.integrator.jitter: expected true/false")
    integrator = IntegratorConfig(
        near=_num(it, "near", "config.integrator", default=di.near),
        far=_num(it, "far", "config.integrator", default=di.far),
        steps=_num(it, "steps", "config.integrator", default=di.steps, integer=True),
        early_stop=_num(it, "early_stop", "config.integrator", default=di.early_stop),
        opacity_threshold=_num(it, "opacity_threshold", "config.integrator",
                               default=di.opacity_threshold),
        background_depth=_num(it, "background_depth", "config.integrator",
                              optional=True),
        jitter=jitter)

    oc = obj.get("occlusion", {})
    _strict(oc, {"enabled", "d_f", "eps"}, "config.occlusion")
    enabled = oc.get("enabled", cfg.occlusion.enabled)
    if not isinstance(enabled, bool):
        raise ConfigurationError("config.occlusion.enabled: expected true/false")
    occlusion = OcclusionConfig(
        enabled=enabled,
        d_f=_num(oc, "d_f", "config.occlusion", default=cfg.occlusion.d_f),
        eps=_num(oc, "eps", "config.occlusion", optional=True))

    rd = obj.get("render", {})
    _strict(rd, {"resolution", "camera", "observer", "colormap", "alpha", "g_max"},
            "config.render")
    resolution = _resolution(rd.get("resolution"), "config.render.resolution",
                             cfg.render_resolution)
    camera = cfg.camera
    if "camera" in rd:
        cm = rd["camera"]
        _strict(cm, {"position", "look_at", "up", "fov_deg"}, "config.render.camera")
        camera = CameraSpec(
            position=_vec(cm, "position", "config.render.camera"),
            look_at=_vec(cm, "look_at", "config.render.camera"),
            up=_vec(cm, "up", "config.render.camera", default=(0.0, 0.0, 1.0)),
            fov_deg=_num(cm, "fov_deg", "config.render.camera", default=60.0))
    observer = cfg.observer
    if "observer" in rd:
        observer = _observer_value(rd["observer"], "config.render.observer")

    ev = obj.get("eval", {})
    _strict(ev, {"n_dirs"}, "config.eval")

    bn = obj.get("bench", {})
    _strict(bn, {"resolution", "n_cams"}, "config.bench")

    sv = obj.get("service", {})
    _strict(sv, {"port", "max_resolution", "queue_depth"}, "config.service")

    return RunConfig(
        seed=seed, out=out,
        scene_preset=scene_preset, scene_path=scene_path,
        gaze_path=gaze_path, synth_groups=groups, world_transform=world_transform,
        probes_placement=placement,
        probes_radius=_num(pb, "radius", "config.probes", default=cfg.probes_radius),
        probes_cap=_num(pb, "cap", "config.probes", default=cfg.probes_cap,
                        integer=True),
        probes_kappa=_num(pb, "kappa", "config.probes", default=cfg.probes_kappa),
        probes_spacing=_num(pb, "spacing", "config.probes", optional=True),
        probes_count=_num(pb, "count", "config.probes", optional=True, integer=True),
        variant=variant,
        depth=_num(md, "depth", "config.model", default=cfg.depth, integer=True),
        width=_num(md, "width", "config.model", default=cfg.width, integer=True),
        l_pos=_num(md, "l_pos", "config.model", default=cfg.l_pos, integer=True),
        l_dir=_num(md, "l_dir", "config.model", default=cfg.l_dir, integer=True),
        include_raw=include_raw,
        train=train, integrator=integrator, occlusion=occlusion,
        render_resolution=resolution, camera=camera, observer=observer,
        colormap=rd.get("colormap", cfg.colormap),
        alpha=_num(rd, "alpha", "config.render", default=cfg.alpha),
        g_max=_num(rd, "g_max", "config.render", optional=True),
        eval_n_dirs=_num(ev, "n_dirs", "config.eval", default=cfg.eval_n_dirs,
                         integer=True),
        bench_resolution=_resolution(bn.get("resolution"), "config.bench.resolution",
                                     cfg.bench_resolution),
        bench_cams=_num(bn, "n_cams", "config.bench", default=cfg.bench_cams,
                        integer=True),
        service_port=_num(sv, "port", "config.service", default=cfg.service_port,
                          integer=True),
        service_max_resolution=_resolution(sv.get("max_resolution"),
                                           "config.service.max_resolution",
                                           cfg.service_max_resolution),
        service_queue_depth=_num(sv, "queue_depth", "config.service",
                                 default=cfg.service_queue_depth, integer=True))


def _resolution(value, ctx: str, default: tuple) -> tuple:
    if value is None:
        return default
    if (not isinstance(value, list) or len(value) != 2
            or any(isinstance(v, bool) or not isinstance(v, int) or v < 1
                   for v in value)):
        raise ConfigurationError(f"{ctx}: expected [width, height] positive integers")
    return (value[0], value[1])


def _observer_value(value, ctx: str):
    if value == "coupled":
        return "coupled"
    if isinstance(value, list) and len(value) == 3:
        return tuple(float(v) for v in value)
    raise ConfigurationError(f"{ctx}: expected \"coupled\" or [x, y, z]")


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{p}: invalid JSON: {e}") from e
    return parse_config(obj)


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line flags win over config-file values."""
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out=args.out)
    if getattr(args, "variant", None) is not None:
        cfg = replace(cfg, variant=_VARIANT_FLAG[args.variant])
    if getattr(args, "resolution", None) is not None:
        try:
            w, h = (int(v) for v in args.resolution.lower().split("x"))
        except ValueError:
            raise ConfigurationError(
                f"--resolution: expected WxH, got {args.resolution!r}") from None
        cfg = replace(cfg, render_resolution=(w, h))
    if getattr(args, "observer", None) is not None:
        if args.observer == "coupled":
            cfg = replace(cfg, observer="coupled")
        else:
            parts = args.observer.split(",")
            if len(parts) != 3:
                raise ConfigurationError(
                    f"--observer: expected x,y,z or 'coupled', got {args.observer!r}")
            cfg = replace(cfg, observer=tuple(float(v) for v in parts))
    if getattr(args, "camera", None) is not None:
        bits = args.camera.split(":")
        if len(bits) not in (2, 3):
            raise ConfigurationError(
                "--camera: expected px,py,pz:tx,ty,tz[:fov_deg]")
        try:
            pos = tuple(float(v) for v in bits[0].split(","))
            tgt = tuple(float(v) for v in bits[1].split(","))
            fov = float(bits[2]) if len(bits) == 3 else cfg.camera.fov_deg
        except ValueError:
            raise ConfigurationError("--camera: malformed numbers") from None
        if len(pos) != 3 or len(tgt) != 3:
            raise ConfigurationError("--camera: positions need 3 components")
        cfg = replace(cfg, camera=CameraSpec(pos, tgt, cfg.camera.up, fov))
    if getattr(args, "falloff", None) is not None:
        cfg = replace(cfg, occlusion=replace(cfg.occlusion, d_f=args.falloff))
    if getattr(args, "no_occlusion", False):
        cfg = replace(cfg, occlusion=replace(cfg.occlusion, enabled=False))
    return cfg


def resolve_args(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(cfg, args)


# ---------------------------------------------------------------------------
# demo assets

PRESET_NAMES = {"shelf", "wall"}


def demo_scene(name: str) -> AnalyticScene:
    """Bundled analytic scenes: a two-aisle shelf and an occlusion wall."""
    if name == "shelf":
        prims = [
            Slab(axis=2, lo=-0.05, hi=0.0, sigma=80.0, albedo=(0.35, 0.35, 0.38)),
            Box((-1.5, -1.2, 0.0), (-0.9, 1.2, 1.6), 40.0, (0.55, 0.42, 0.30)),
            Box((0.9, -1.2, 0.0), (1.5, 1.2, 1.6), 40.0, (0.30, 0.42, 0.55)),
            Sphere((-0.78, -0.5, 1.0), 0.12, 60.0, (0.85, 0.20, 0.20)),
            Sphere((-0.78, 0.6, 0.7), 0.10, 60.0, (0.20, 0.75, 0.25)),
            Sphere((0.78, 0.0, 1.2), 0.12, 60.0, (0.95, 0.80, 0.15)),
            Sphere((0.78, -0.7, 0.5), 0.10, 60.0, (0.80, 0.30, 0.75)),
        ]
        aabb = Aabb(np.array([-2.0, -2.0, -0.05]), np.array([2.0, 2.0, 2.2]))
        return AnalyticScene(prims, background=(0.05, 0.06, 0.08), aabb=aabb)
    if name == "wall":
        prims = [
            # back panel filling the camera frame
            Box((-1.6, -1.8, -0.35), (-1.4, 1.8, 2.15), 60.0, (0.75, 0.70, 0.60)),
            # thick opaque blocker between observer region and the panel
            Box((-0.6, -0.9, -0.5), (-0.3, 0.1, 1.1), 200.0, (0.25, 0.25, 0.28)),
        ]
        aabb = Aabb(np.array([-2.0, -2.0, -0.5]), np.array([2.0, 2.0, 2.3]))
        return AnalyticScene(prims, background=(0.02, 0.02, 0.03), aabb=aabb)
    raise ConfigurationError(f"unknown scene preset {name!r}")


# ---------------------------------------------------------------------------
# manifests and artifact paths


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig,
                   inputs: list, outputs: list) -> Path:
    manifest = {
        "command": command,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "versions": {"package": __version__,
                     "python": platform.python_version(),
                     "numpy": np.__version__},
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _scene_file(cfg: RunConfig) -> Path:
    return Path(cfg.scene_path) if cfg.scene_path else Path(cfg.out) / "scene.json"


def _gaze_file(cfg: RunConfig) -> Path:
    return Path(cfg.gaze_path) if cfg.gaze_path else Path(cfg.out) / "gaze.csv"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; {hint}")
    return path


def _load_field(path: Path):
    if path.suffix == ".nvox":
        return load_voxel_grid(path)
    return load_scene(path)


# ---------------------------------------------------------------------------
# commands


def run_scene(cfg: RunConfig) -> list:
    if cfg.scene_preset is None:
        raise ConfigurationError(
            "scene generation needs config.scene.preset (a path is only an input)")
    out = _out_dir(cfg)
    scene = demo_scene(cfg.scene_preset)
    target = out / "scene.json"
    save_scene(scene, target)
    write_manifest(out, "scene", cfg, [], [target])
    print(f"wrote {target} ({len(scene.primitives)} primitives)")
    return [target]


def run_gaze(cfg: RunConfig) -> list:
    out = _out_dir(cfg)
    scene = load_scene(_require(_scene_file(cfg), "run the scene command first"))
    if not cfg.synth_groups:
        raise ConfigurationError("config.gaze.synth.groups is empty; nothing to generate")
    rays = []
    for i, group in enumerate(cfg.synth_groups):
        rays += synth_gaze(scene, list(group.attractors), group.count, group.volume,
                           noise_kappa=group.noise_kappa, seed=[cfg.seed, 3, i])
    target = out / "gaze.csv"
    save_gaze_rays(rays, target)
    write_manifest(out, "gaze", cfg, [_scene_file(cfg)], [target])
    print(f"wrote {target} ({len(rays)} rays)")
    return [target]


def run_probes(cfg: RunConfig) -> list:
    out = _out_dir(cfg)
    gaze_path = _require(_gaze_file(cfg), "run the gaze command first")
    transform = (WorldTransform.from_flat(cfg.world_transform)
                 if cfg.world_transform else None)
    rays = load_gaze_rays(gaze_path, transform=transform)
    probes = build_probes(rays, cfg.probes_placement, cfg.probes_radius,
                          cfg.probes_cap, seed=cfg.seed, kappa=cfg.probes_kappa,
                          spacing=cfg.probes_spacing, count=cfg.probes_count)
    train_set, test_set = split_probe_set(probes, cfg.train.train_probes,
                                          cfg.train.test_probes, seed=cfg.seed)
    t_path, e_path = out / "probes_train.nprb", out / "probes_test.nprb"
    save_probe_set(train_set, t_path)
    save_probe_set(test_set, e_path)
    write_manifest(out, "probes", cfg, [gaze_path], [t_path, e_path])
    print(f"built {len(probes)} probes -> {len(train_set)} train / {len(test_set)} test")
    return [t_path, e_path]


def _new_model(cfg: RunConfig, aabb: Aabb) -> NergModel:
    enc = EncodingConfig(cfg.l_pos, cfg.l_dir, cfg.include_raw)
    return NergModel(cfg.variant, enc, aabb, depth=cfg.depth, width=cfg.width,
                     seed=cfg.seed)


def run_train(cfg: RunConfig) -> list:
    out = _out_dir(cfg)
    scene_path = _require(_scene_file(cfg), "run the scene command first")
    probes_path = _require(out / "probes_train.nprb", "run the probes command first")
    scene = _load_field(scene_path)
    probes = load_probe_set(probes_path)
    model = _new_model(cfg, scene.aabb)
    ckpt, history_path = out / "checkpoint.nckpt", out / "loss_history.csv"
    try:
        _, history = train_on_probes(model, probes, cfg.train)
    except DivergenceError as e:
        # parameters were rolled back to the last finished epoch; keep them
        save_checkpoint(model, ckpt, metadata={"diverged": True,
                                               "epochs_completed": len(e.history)})
        save_loss_history(e.history, history_path)
        raise
    final = history[-1]
    save_checkpoint(model, ckpt, metadata={
        "epochs": len(history),
        "final": {"kld": final.kld, "cc": final.cc, "mae": final.mae,
                  "total": final.total}})
    save_loss_history(history, history_path)
    write_manifest(out, "train", cfg, [scene_path, probes_path], [ckpt, history_path])
    print(f"trained {cfg.variant} for {len(history)} epochs; "
          f"final total {final.total:.4f} -> {ckpt}")
    return [ckpt, history_path]


def run_eval(cfg: RunConfig) -> list:
    out = _out_dir(cfg)
    ckpt = _require(out / "checkpoint.nckpt", "run the train command first")
    probes_path = _require(out / "probes_test.nprb", "run the probes command first")
    model = load_checkpoint(ckpt)
    probes = load_probe_set(probes_path)
    report = evaluate(model, probes, n_dirs=cfg.eval_n_dirs, seed=cfg.seed)
    target = out / "eval.json"
    payload = {"kld": report.kld, "cc": report.cc, "mae": report.mae,
               "total": report.total, "count": report.count,
               "n_dirs": cfg.eval_n_dirs, "seed": cfg.seed,
               "variant": model.variant}
    target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "eval", cfg, [ckpt, probes_path], [target])
    print(f"eval: kld {report.kld:.4f}, cc {report.cc:.4f}, mae {report.mae:.4f}")
    return [target]


def _observer_state(cfg: RunConfig) -> ObserverState:
    if cfg.observer == "coupled":
        return ObserverState.coupled_to_camera()
    return ObserverState.at(cfg.observer)


def run_render(cfg: RunConfig) -> list:
    out = _out_dir(cfg)
    scene_path = _require(_scene_file(cfg), "run the scene command first")
    ckpt = _require(out / "checkpoint.nckpt", "run the train command first")
    field = _load_field(scene_path)
    model = load_checkpoint(ckpt)
    w, h = cfg.render_resolution
    cam = cfg.camera.build(w, h)
    frame = render_frame(field, model, cam, _observer_state(cfg), cfg.integrator,
                         cfg.occlusion)
    rgb_path = out / "render_rgb.png"
    gaze_path = out / "render_gaze.png"
    buf_path = out / "render.nfrm"
    save_png(frame.rgb, rgb_path)
    save_png(colorize(frame, cfg.colormap, cfg.alpha, cfg.g_max), gaze_path)
    save_frame_buffers(frame, buf_path)
    write_manifest(out, "render", cfg, [scene_path, ckpt],
                   [rgb_path, gaze_path, buf_path])
    print(f"rendered {w}x{h}; gaze range [{frame.gaze.min():.4g}, "
          f"{frame.gaze.max():.4g}] -> {gaze_path}")
    return [rgb_path, gaze_path, buf_path]


def run_bench(cfg: RunConfig) -> list:
    out = _out_dir(cfg)
    scene_path = _require(_scene_file(cfg), "run the scene command first")
    ckpt = _require(out / "checkpoint.nckpt", "run the train command first")
    field = _load_field(scene_path)
    model = load_checkpoint(ckpt)
    report = bench_frame_time(field, model, cfg.bench_resolution, cfg.bench_cams,
                              seed=cfg.seed, integ=cfg.integrator, occ=cfg.occlusion)
    target = out / "bench.json"
    save_bench_report(report, target)
    write_manifest(out, "bench", cfg, [scene_path, ckpt], [target])
    print(f"bench: mean {report['mean_ms']:.1f} ms, p50 {report['p50_ms']:.1f} ms, "
          f"p95 {report['p95_ms']:.1f} ms over {cfg.bench_cams} cameras")
    return [target]


def run_pipeline(cfg: RunConfig) -> list:
    artifacts = []
    for step in (run_scene, run_gaze, run_probes, run_train, run_eval, run_render):
        artifacts += step(cfg)
    return artifacts


def run_serve(cfg: RunConfig, args: argparse.Namespace) -> None:
    import uvicorn

    from .service import ServiceSettings, create_app

    out = _out_dir(cfg)
    scene_path = _require(_scene_file(cfg), "run the scene command first")
    ckpt = _require(out / "checkpoint.nckpt", "run the train command first")

    # precedence: flags > NERG_* environment > config file
    port = cfg.service_port
    max_res = cfg.service_max_resolution
    depth = cfg.service_queue_depth
    if os.environ.get("NERG_PORT"):
        port = int(os.environ["NERG_PORT"])
    if os.environ.get("NERG_MAX_RESOLUTION"):
        w, h = (int(v) for v in os.environ["NERG_MAX_RESOLUTION"].lower().split("x"))
        max_res = (w, h)
    if os.environ.get("NERG_QUEUE_DEPTH"):
        depth = int(os.environ["NERG_QUEUE_DEPTH"])
    if args.port is not None:
        port = args.port
    if args.max_resolution is not None:
        w, h = (int(v) for v in args.max_resolution.lower().split("x"))
        max_res = (w, h)
    if args.queue_depth is not None:
        depth = args.queue_depth

    settings = ServiceSettings(max_resolution=max_res, queue_depth=depth,
                               integrator=cfg.integrator, occlusion=cfg.occlusion,
                               colormap=cfg.colormap, alpha=cfg.alpha, g_max=cfg.g_max)
    app = create_app(scene_path, ckpt, settings)
    write_manifest(out, "serve", cfg, [scene_path, ckpt], [])
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="info")


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant", choices=sorted(_VARIANT_FLAG),
                        help="model variant override")
    common.add_argument("--resolution", help="render resolution WxH")
    common.add_argument("--observer", help="observer 'x,y,z' or 'coupled'")
    common.add_argument("--camera", help="camera pose px,py,pz:tx,ty,tz[:fov_deg]")
    common.add_argument("--falloff", type=float, help="occlusion fall-off d_f")
    common.add_argument("--no-occlusion", action="store_true",
                        help="disable the observer depth test")

    parser = argparse.ArgumentParser(
        prog="nerg",
        description="Volumetric scene + gaze-field pipeline: generate data, "
                    "train, evaluate, render, benchmark, serve.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("scene", run_scene), ("gaze", run_gaze), ("probes", run_probes),
                     ("train", run_train), ("eval", run_eval), ("render", run_render),
                     ("bench", run_bench), ("pipeline", run_pipeline)):
        p = sub.add_parser(name, parents=[common],
                           help=f"run the {name} stage")
        p.set_defaults(runner=fn)
        if name == "scene":
            p.add_argument("--preset", choices=sorted(PRESET_NAMES),
                           help="bundled scene to generate")

    serve = sub.add_parser("serve", parents=[common], help="start the frame service")
    serve.add_argument("--port", type=int, help="listen port")
    serve.add_argument("--max-resolution", help="request resolution cap WxH")
    serve.add_argument("--queue-depth", type=int, help="bounded render queue size")
    serve.set_defaults(runner=None)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_args(args)
        if getattr(args, "preset", None) is not None:
            cfg = replace(cfg, scene_preset=args.preset)
        if args.command == "serve":
            run_serve(cfg, args)
        else:
            args.runner(cfg)
        return 0
    except (ConfigurationError, DataFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (NergError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
