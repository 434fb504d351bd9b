"""HTTP frame service: load one scene + checkpoint, answer render requests.

Everything loaded at startup is immutable afterwards, so identical requests
produce identical bytes and concurrent requests behave like serial ones.  A
bounded admission semaphore protects the process: when `queue_depth` renders
are already in flight, new frame requests are refused with 429 instead of
piling up.

Endpoints: GET /info (session metadata, 503 until the session is loaded),
POST /frame (PNG of the gaze overlay plus timing/range headers), GET
/buffers (raw float planes for client-side colormapping) and GET /schema.
Validation failures return 400 with field-level messages; resolutions over
the configured cap return 413; a decoupled observer outside the scene
bounds returns 422.
"""

from __future__ import annotations

import hashlib
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .core import Camera, Vec3
from .field import IntegratorConfig, load_scene, load_voxel_grid
from .nerg import NergModel, load_checkpoint
from .render import (GazeFrame, ObserverState, OcclusionConfig, colorize,
                     frame_to_bytes, png_bytes, render_frame)

DEFAULT_MAX_RESOLUTION = (1024, 1024)
DEFAULT_QUEUE_DEPTH = 4


@dataclass(frozen=True)
class ServiceSettings:
    max_resolution: tuple = DEFAULT_MAX_RESOLUTION
    queue_depth: int = DEFAULT_QUEUE_DEPTH
    integrator: IntegratorConfig = IntegratorConfig()
    occlusion: OcclusionConfig = OcclusionConfig()
    colormap: str = "viridis"
    alpha: float = 0.6
    g_max: float | None = None


class CameraPose(BaseModel):
    model_config = ConfigDict(extra="forbid")

    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    fov_deg: float = Field(default=60.0, gt=0.0, lt=180.0)

    @model_validator(mode="after")
    def _distinct(self):
        if self.position == self.look_at:
            raise ValueError("camera position and look_at coincide")
        return self


class FrameRequest(BaseModel):
    """One render request; the serialized form of camera + observer state."""

    model_config = ConfigDict(extra="forbid")

    camera: CameraPose
    observer: Literal["coupled"] | tuple[float, float, float] = "coupled"
    resolution: tuple[int, int] = (512, 512)
    d_f: float = Field(default=0.05, gt=0.0)
    occlusion: bool = True
    alpha: float = Field(default=0.6, ge=0.0, le=1.0)
    colormap: Literal["viridis", "gray"] = "viridis"
    normalization: Literal["fixed", "minmax"] = "minmax"
    g_max: float | None = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def _checked(self):
        w, h = self.resolution
        if w < 1 or h < 1:
            raise ValueError("resolution components must be >= 1")
        if self.normalization == "fixed" and self.g_max is None:
            raise ValueError("normalization 'fixed' needs g_max")
        return self


@dataclass(frozen=True)
class _Session:
    field: object
    model: NergModel
    scene_id: str
    checkpoint_id: str


def _file_id(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _load_session(scene_path, checkpoint_path) -> _Session:
    scene_path, checkpoint_path = Path(scene_path), Path(checkpoint_path)
    loader = load_voxel_grid if scene_path.suffix == ".nvox" else load_scene
    return _Session(field=loader(scene_path),
                    model=load_checkpoint(checkpoint_path),
                    scene_id=_file_id(scene_path),
                    checkpoint_id=_file_id(checkpoint_path))


def _field_errors(errors) -> list:
    out = []
    for e in errors:
        loc = [str(x) for x in e.get("loc", ()) if x not in ("body", "query")]
        out.append({"field": ".".join(loc) or "(request)", "message": e.get("msg", "")})
    return out


_QUERY_KEYS = {
    "camera_position", "camera_look_at", "camera_up", "fov_deg", "observer",
    "resolution", "d_f", "occlusion", "alpha", "colormap", "normalization", "g_max",
}


def _csv_floats(value: str, field: str) -> list:
    try:
        return [float(v) for v in value.split(",")]
    except ValueError:
        raise HTTPException(400, detail={"errors": [
            {"field": field, "message": f"expected comma-separated numbers, got {value!r}"}]})


def request_from_query(params: dict) -> FrameRequest:
    """Rebuild a FrameRequest from the flattened /buffers query string.

    Vectors are comma-separated (`camera_position=0,-1.7,1.5`), the
    resolution is `WxH`, the observer is `coupled` or `x,y,z`; remaining
    fields are scalars under their request names.
    """
    unknown = sorted(set(params) - _QUERY_KEYS)
    if unknown:
        raise HTTPException(400, detail={"errors": [
            {"field": k, "message": "unknown query parameter"} for k in unknown]})
    if "camera_position" not in params or "camera_look_at" not in params:
        raise HTTPException(400, detail={"errors": [
            {"field": "camera_position", "message":
             "camera_position and camera_look_at are required"}]})

    camera: dict = {
        "position": _csv_floats(params["camera_position"], "camera_position"),
        "look_at": _csv_floats(params["camera_look_at"], "camera_look_at"),
    }
    if "camera_up" in params:
        camera["up"] = _csv_floats(params["camera_up"], "camera_up")
    if "fov_deg" in params:
        camera["fov_deg"] = params["fov_deg"]

    body: dict = {"camera": camera}
    if "observer" in params:
        obs = params["observer"]
        body["observer"] = obs if obs == "coupled" else _csv_floats(obs, "observer")
    if "resolution" in params:
        bits = params["resolution"].lower().split("x")
        if len(bits) != 2:
            raise HTTPException(400, detail={"errors": [
                {"field": "resolution", "message": "expected WxH"}]})
        body["resolution"] = bits
    for key in ("d_f", "occlusion", "alpha", "colormap", "normalization", "g_max"):
        if key in params:
            body[key] = params[key]
    try:
        return FrameRequest.model_validate(body)
    except ValidationError as e:
        raise HTTPException(400, detail={"errors": _field_errors(e.errors())})


def create_app(scene_path=None, checkpoint_path=None,
               settings: ServiceSettings | None = None) -> FastAPI:
    """Build the service; the session loads during application startup, so
    endpoints answer 503 until then."""
    settings = settings or ServiceSettings()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if scene_path is not None and checkpoint_path is not None:
            app.state.session = _load_session(scene_path, checkpoint_path)
        yield

    app = FastAPI(title="nerg frame service", lifespan=lifespan)
    app.state.session = None
    app.state.settings = settings
    # admission control: at most queue_depth renders in flight at once
    app.state.gate = threading.BoundedSemaphore(settings.queue_depth)

    @app.exception_handler(RequestValidationError)
    async def _on_invalid(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={
            "detail": "invalid request", "errors": _field_errors(exc.errors())})

    def _session() -> _Session:
        session = app.state.session
        if session is None:
            raise HTTPException(503, detail="session not loaded yet")
        return session

    def _render(req: FrameRequest) -> tuple:
        session = _session()
        w, h = req.resolution
        max_w, max_h = settings.max_resolution
        if w > max_w or h > max_h:
            raise HTTPException(413, detail=f"resolution {w}x{h} exceeds the "
                                f"{max_w}x{max_h} cap")
        try:
            cam = Camera.look_at(Vec3(*req.camera.position), Vec3(*req.camera.look_at),
                                 up_hint=req.camera.up,
                                 fov_y=float(np.deg2rad(req.camera.fov_deg)),
                                 width=w, height=h)
        except ValueError as e:
            raise HTTPException(400, detail={"errors": [
                {"field": "camera", "message": str(e)}]})
        if req.observer == "coupled":
            obs = ObserverState.coupled_to_camera()
        else:
            obs = ObserverState.at(req.observer)
            position = np.asarray(req.observer, dtype=np.float64)
            # an observer placed exactly at the camera renders as coupled,
            # which is legal even outside the scene bounds
            if (not np.array_equal(position, cam.position.as_array())
                    and not session.field.aabb.contains(position)):
                raise HTTPException(422, detail="observer lies outside the scene aabb")
        occ = OcclusionConfig(enabled=req.occlusion, d_f=req.d_f,
                              eps=settings.occlusion.eps)
        if not app.state.gate.acquire(blocking=False):
            raise HTTPException(429, detail="render queue is full, retry later")
        try:
            start = time.perf_counter()
            frame = render_frame(session.field, session.model, cam, obs,
                                 settings.integrator, occ)
            elapsed_ms = (time.perf_counter() - start) * 1000.0
        finally:
            app.state.gate.release()
        return frame, elapsed_ms

    def _headers(frame: GazeFrame, elapsed_ms: float) -> dict:
        return {"X-Render-Ms": f"{elapsed_ms:.3f}",
                "X-Gaze-Min": f"{float(frame.gaze.min()):.9g}",
                "X-Gaze-Max": f"{float(frame.gaze.max()):.9g}"}

    @app.get("/info")
    def info() -> JSONResponse:
        session = _session()
        aabb = session.field.aabb
        return JSONResponse({
            "scene_id": session.scene_id,
            "checkpoint_id": session.checkpoint_id,
            "variant": session.model.variant,
            "aabb": {"min": list(aabb.lo), "max": list(aabb.hi)},
            "defaults": {
                "resolution": [512, 512],
                "max_resolution": list(settings.max_resolution),
                "queue_depth": settings.queue_depth,
                "d_f": settings.occlusion.d_f,
                "occlusion": settings.occlusion.enabled,
                "alpha": settings.alpha,
                "colormap": settings.colormap,
                "normalization": "fixed" if settings.g_max is not None else "minmax",
                "g_max": settings.g_max,
                "integrator": {"near": settings.integrator.near,
                               "far": settings.integrator.far,
                               "steps": settings.integrator.steps},
            },
        })

    @app.post("/frame")
    def frame(req: FrameRequest) -> Response:
        result, elapsed_ms = _render(req)
        g_max = req.g_max if req.normalization == "fixed" else None
        image = colorize(result, req.colormap, req.alpha, g_max)
        return Response(content=png_bytes(image), media_type="image/png",
                        headers=_headers(result, elapsed_ms))

    @app.get("/buffers")
    def buffers(request: Request) -> Response:
        req = request_from_query(dict(request.query_params))
        result, elapsed_ms = _render(req)
        return Response(content=frame_to_bytes(result),
                        media_type="application/octet-stream",
                        headers=_headers(result, elapsed_ms))

    @app.get("/schema")
    def schema() -> JSONResponse:
        return JSONResponse({
            "frame_request": FrameRequest.model_json_schema(),
            "buffers_query": sorted(_QUERY_KEYS),
            "endpoints": {
                "GET /info": "session metadata and defaults",
                "POST /frame": "FrameRequest JSON -> PNG + X-Render-Ms, "
                               "X-Gaze-Min, X-Gaze-Max headers",
                "GET /buffers": "FrameRequest as flat query -> raw float planes",
                "GET /schema": "this document",
            },
        })

    return app
