"""Trainable view-dependent gaze field and its supervision losses.

The model is a shared MLP trunk with two scalar heads over frequency
encoded (position, direction) inputs.  The gaze prediction for an observer
at p_o attending toward p_od is

    g = softplus(F_e(p_od, -r_o)) * sigmoid(F_c(p_o, r_o)),
    r_o = normalize(p_od - p_o)

where F_e models how strongly a point emits attention along a direction
and F_c how readily an observer at a position captures it.  Ablation
variants keep only one factor.  Training minimizes KLD + MAE + (1 - CC)
against probe KDE densities, with exact hand-written gradients so the
whole loop stays deterministic and verifiable against finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ConfigurationError, DataFormatError, DivergenceError
from .core import Vec3
from .field import Aabb
from .probes import ProbeSet, make_training_arrays, probe_density_many, sample_sphere_uniform

CHECKPOINT_MAGIC = b"NERGCKPT"
KLD_EPS = 1e-8          # floor for predicted densities inside the log
CC_DEGENERATE_STD = 1e-12
EVAL_OFFSET = 1.0       # attended point sits one scene unit along the sample ray

VARIANTS = ("emit", "capture", "emitcapture")


# ---------------------------------------------------------------------------
# encodings


@dataclass(frozen=True)
class EncodingConfig:
    """Frequency (sin/cos) feature expansion for positions and directions."""

    l_pos: int = 10
    l_dir: int = 4
    include_raw: bool = True

    def __post_init__(self) -> None:
        if self.l_pos < 0 or self.l_dir < 0:
            raise ValueError("band counts must be >= 0")
        if self.feature_length() == 0:
            raise ValueError("encoding produces no features")

    def feature_length(self) -> int:
        raw = 3 if self.include_raw else 0
        return (raw + 6 * self.l_pos) + (raw + 6 * self.l_dir)


def _encode_vec(v: np.ndarray, bands: int, include_raw: bool) -> list:
    parts = [v] if include_raw else []
    for k in range(bands):
        arg = (2.0 ** k) * np.pi * v
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return parts


def encode_batch(pos: np.ndarray, dirs: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Feature rows for (N, 3) positions (already aabb-normalized) and dirs."""
    pos = np.asarray(pos, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    parts = _encode_vec(pos, cfg.l_pos, cfg.include_raw)
    parts += _encode_vec(dirs, cfg.l_dir, cfg.include_raw)
    return np.concatenate(parts, axis=-1)


def encode(p, direction, cfg: EncodingConfig) -> np.ndarray:
    """Single-input feature vector; ``p`` must already be in [-1, 1]^3."""
    p = p.as_array() if isinstance(p, Vec3) else np.asarray(p, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return encode_batch(p[None, :], d[None, :], cfg)[0]


# ---------------------------------------------------------------------------
# model


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> list:
    bound = np.sqrt(6.0 / fan_in)
    return [rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


class NergModel:
    """Shared-trunk MLP with emit and capture heads.

    Both heads always exist structurally so ablation variants are
    parameter-count comparable; ``variant`` gates which are evaluated.
    Parameters are float64 arrays mutated in place by the optimizer.
    """

    def __init__(self, variant: str, encoding: EncodingConfig, aabb: Aabb,
                 depth: int = 4, width: int = 128, seed: int = 0) -> None:
        if variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if depth < 0 or (depth > 0 and width < 1):
            raise ConfigurationError("trunk needs depth >= 0 and width >= 1")
        self.variant = variant
        self.encoding = encoding
        self.aabb = aabb
        self.depth = depth
        self.width = width
        self.seed = seed
        self.metadata: dict = {}

        rng = np.random.default_rng(seed)
        dims = [encoding.feature_length()] + [width] * depth
        self.trunk = [_he_uniform(rng, dims[i], dims[i + 1]) for i in range(depth)]
        feat = dims[-1]
        self.head_e = _he_uniform(rng, feat, 1)
        self.head_c = _he_uniform(rng, feat, 1)

    def parameters(self) -> list:
        out = []
        for w, b in self.trunk:
            out += [w, b]
        out += [*self.head_e, *self.head_c]
        return out

    def normalize_pos(self, p: np.ndarray) -> np.ndarray:
        """Affine map of the scene aabb onto [-1, 1]^3 (points outside the
        box map affinely outside it, which the encoding tolerates)."""
        return (np.asarray(p, dtype=np.float64) - self.aabb.lo) / self.aabb.size * 2.0 - 1.0


def _trunk_forward(trunk: list, x: np.ndarray):
    cache = []
    h = x
    for w, b in trunk:
        z = h @ w + b
        cache.append((h, z))
        h = np.maximum(z, 0.0)
    return h, cache


def _trunk_backward(trunk: list, cache: list, dh: np.ndarray, grads: list) -> None:
    """Accumulate trunk gradients into grads[0 : 2*len(trunk)]."""
    for i in range(len(trunk) - 1, -1, -1):
        h_in, z = cache[i]
        delta = dh * (z > 0)
        grads[2 * i] += h_in.T @ delta
        grads[2 * i + 1] += delta.sum(axis=0)
        dh = delta @ trunk[i][0].T


def _head_forward(head: list, h: np.ndarray) -> np.ndarray:
    return (h @ head[0] + head[1])[:, 0]


def _emit_batch(model: NergModel, p_od: np.ndarray, dirs: np.ndarray):
    x = encode_batch(model.normalize_pos(p_od), dirs, model.encoding)
    h, cache = _trunk_forward(model.trunk, x)
    z = _head_forward(model.head_e, h)
    return _softplus(z), z, h, cache


def _capture_batch(model: NergModel, p_o: np.ndarray, dirs: np.ndarray):
    x = encode_batch(model.normalize_pos(p_o), dirs, model.encoding)
    h, cache = _trunk_forward(model.trunk, x)
    z = _head_forward(model.head_c, h)
    return _sigmoid(z), z, h, cache


def forward_emit(model: NergModel, p_od, direction) -> float:
    """Nonnegative emit signal at a point along a direction."""
    if model.variant == "capture":
        raise ConfigurationError("capture-only model has no emit head in use")
    p = p_od.as_array() if isinstance(p_od, Vec3) else np.asarray(p_od, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("direction must be unit norm")
    e, _, _, _ = _emit_batch(model, p[None, :], d[None, :])
    return float(e[0])


def forward_capture(model: NergModel, p_o, direction) -> float:
    """Capture probability in (0, 1) for an observer facing a direction."""
    if model.variant == "emit":
        raise ConfigurationError("emit-only model has no capture head in use")
    p = p_o.as_array() if isinstance(p_o, Vec3) else np.asarray(p_o, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("direction must be unit norm")
    c, _, _, _ = _capture_batch(model, p[None, :], d[None, :])
    return float(c[0])


def predict_gaze_batch(model: NergModel, p_od: np.ndarray, p_o: np.ndarray) -> np.ndarray:
    """Gaze density for rows of attended points and observer positions."""
    p_od = np.asarray(p_od, dtype=np.float64)
    p_o = np.asarray(p_o, dtype=np.float64)
    r = p_od - p_o
    dist = np.linalg.norm(r, axis=-1)
    if np.any(dist < 1e-12):
        raise ValueError("attended point coincides with the observer position")
    r_o = r / dist[:, None]
    if model.variant == "emit":
        e, _, _, _ = _emit_batch(model, p_od, -r_o)
        return e
    if model.variant == "capture":
        c, _, _, _ = _capture_batch(model, p_o, r_o)
        return c
    e, _, _, _ = _emit_batch(model, p_od, -r_o)
    c, _, _, _ = _capture_batch(model, p_o, r_o)
    return e * c


def predict_gaze(model: NergModel, p_od, p_o) -> float:
    a = p_od.as_array() if isinstance(p_od, Vec3) else np.asarray(p_od, dtype=np.float64)
    b = p_o.as_array() if isinstance(p_o, Vec3) else np.asarray(p_o, dtype=np.float64)
    return float(predict_gaze_batch(model, a[None, :], b[None, :])[0])


# ---------------------------------------------------------------------------
# losses


def _check_pair(y, yhat, min_len: int):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size < min_len:
        raise ValueError(f"need at least {min_len} elements, got {y.size}")
    return y, yhat


def loss_kld(y, yhat) -> float:
    """sum_i y_i * log(y_i / yhat_i), with yhat floored at 1e-8 and terms
    whose y_i is at or below the floor contributing zero."""
    y, yhat = _check_pair(y, yhat, 1)
    q = np.maximum(yhat, KLD_EPS)
    mask = y > KLD_EPS
    return float(np.sum(y[mask] * np.log(y[mask] / q[mask])))


def loss_cc(y, yhat) -> float:
    """Pearson correlation; 0 when either side is (numerically) constant."""
    y, yhat = _check_pair(y, yhat, 2)
    a = y - y.mean()
    b = yhat - yhat.mean()
    sa = np.sqrt(np.mean(a * a))
    sb = np.sqrt(np.mean(b * b))
    if sa < CC_DEGENERATE_STD or sb < CC_DEGENERATE_STD:
        return 0.0
    return float(np.mean(a * b) / (sa * sb))


def loss_mae(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat, 1)
    return float(np.mean(np.abs(y - yhat)))


def total_loss(y, yhat) -> float:
    """KLD + MAE + (1 - CC): zero when the inputs agree elementwise."""
    return loss_kld(y, yhat) + loss_mae(y, yhat) + (1.0 - loss_cc(y, yhat))


# ---------------------------------------------------------------------------
# training objective with exact gradients

# The KLD term of the objective is evaluated on sample-normalized densities
# (each batch's y and clamped yhat rescaled to sum 1), which makes it a
# proper divergence with a zero gradient at yhat = y.  MAE anchors absolute
# scale and CC shape, so the combined objective still has its minimum,
# value 0, exactly at yhat = y.


def _objective_terms(y: np.ndarray, yhat: np.ndarray):
    """Values (kld, cc, mae, total) and d(total)/d(yhat) for one batch."""
    n = y.size
    q = np.maximum(yhat, KLD_EPS)
    sy = y.sum()
    sq = q.sum()
    p = y / sy
    qn = q / sq
    mask_y = p > KLD_EPS
    kld = float(np.sum(p[mask_y] * np.log(p[mask_y] / np.maximum(qn[mask_y], KLD_EPS))))
    # gradient flows only through terms where neither clamp is engaged
    active = mask_y & (qn > KLD_EPS)
    d_kld = (np.sum(p[active]) / sq - np.where(active, p / q, 0.0)) * (yhat > KLD_EPS)

    mae = float(np.mean(np.abs(y - yhat)))
    d_mae = np.sign(yhat - y) / n

    a = y - y.mean()
    b = yhat - yhat.mean()
    sa = np.sqrt(np.mean(a * a))
    sb = np.sqrt(np.mean(b * b))
    if sa < CC_DEGENERATE_STD or sb < CC_DEGENERATE_STD:
        cc = 0.0
        d_cc = np.zeros_like(yhat)
    else:
        na = np.linalg.norm(a)
        nb = np.linalg.norm(b)
        cc = float(a @ b / (na * nb))
        d_cc = a / (na * nb) - cc * b / (nb * nb)

    total = kld + mae + (1.0 - cc)
    return (kld, cc, mae, total), d_kld + d_mae - d_cc


def _forward_batch(model: NergModel, p_od: np.ndarray, p_o: np.ndarray):
    r = p_od - p_o
    dist = np.linalg.norm(r, axis=-1)
    if np.any(dist < 1e-12):
        raise ValueError("attended point coincides with the observer position")
    r_o = r / dist[:, None]
    state = {"yhat": None, "emit": None, "capture": None}
    if model.variant != "capture":
        e, z_e, h_e, cache_e = _emit_batch(model, p_od, -r_o)
        state["emit"] = (e, z_e, h_e, cache_e)
    if model.variant != "emit":
        c, z_c, h_c, cache_c = _capture_batch(model, p_o, r_o)
        state["capture"] = (c, z_c, h_c, cache_c)
    if model.variant == "emit":
        state["yhat"] = state["emit"][0]
    elif model.variant == "capture":
        state["yhat"] = state["capture"][0]
    else:
        state["yhat"] = state["emit"][0] * state["capture"][0]
    return state


def _batch_loss_and_grads(model: NergModel, p_od: np.ndarray, p_o: np.ndarray,
                          y: np.ndarray):
    """Objective values and flat parameter gradients for one batch."""
    state = _forward_batch(model, p_od, p_o)
    values, d_yhat = _objective_terms(y, state["yhat"])

    params = model.parameters()
    grads = [np.zeros_like(p) for p in params]
    n_trunk = 2 * len(model.trunk)

    if state["emit"] is not None:
        e, z_e, h_e, cache_e = state["emit"]
        factor = state["capture"][0] if model.variant == "emitcapture" else 1.0
        dz = (d_yhat * factor * _sigmoid(z_e))[:, None]  # softplus' = sigmoid
        grads[n_trunk] += h_e.T @ dz
        grads[n_trunk + 1] += dz.sum(axis=0)
        _trunk_backward(model.trunk, cache_e, dz @ model.head_e[0].T, grads)

    if state["capture"] is not None:
        c, z_c, h_c, cache_c = state["capture"]
        factor = state["emit"][0] if model.variant == "emitcapture" else 1.0
        dz = (d_yhat * factor * c * (1.0 - c))[:, None]
        grads[n_trunk + 2] += h_c.T @ dz
        grads[n_trunk + 3] += dz.sum(axis=0)
        _trunk_backward(model.trunk, cache_c, dz @ model.head_c[0].T, grads)

    return values, grads


def _batch_loss(model: NergModel, p_od: np.ndarray, p_o: np.ndarray, y: np.ndarray):
    state = _forward_batch(model, p_od, p_o)
    values, _ = _objective_terms(y, state["yhat"])
    return values


def grad_check(model: NergModel, batch, h: float = 1e-4) -> float:
    """Max relative error of analytic vs central finite-difference gradients.

    ``batch`` is a (p_od, p_o, y) triple of arrays.  Relative error uses a
    1e-6 denominator floor so finite-difference noise on near-zero entries
    does not register as disagreement.
    """
    p_od, p_o, y = (np.asarray(a, dtype=np.float64) for a in batch)
    _, grads = _batch_loss_and_grads(model, p_od, p_o, y)
    worst = 0.0
    for param, grad in zip(model.parameters(), grads):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = _batch_loss(model, p_od, p_o, y)[3]
            flat[i] = keep - h
            down = _batch_loss(model, p_od, p_o, y)[3]
            flat[i] = keep
            fd = (up - down) / (2.0 * h)
            denom = max(abs(fd), abs(gflat[i]), 1e-6)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 4096
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    seed: int = 0
    train_probes: int = 4096
    test_probes: int = 512
    samples_per_probe: int = 1024

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class LossReport:
    kld: float
    cc: float
    mae: float
    total: float
    count: int


class _Adam:
    def __init__(self, params: list, cfg: TrainConfig) -> None:
        self.lr = cfg.lr
        self.b1 = cfg.beta1
        self.b2 = cfg.beta2
        self.eps = cfg.adam_eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list, grads: list) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _run_epochs(model: NergModel, cfg: TrainConfig, provide) -> list:
    """Shared loop: ``provide(epoch)`` yields (p_o, dirs, y) arrays.

    Attended points sit one scene unit along each sample direction.  On a
    non-finite batch loss the parameters are rolled back to the end of the
    last completed epoch and DivergenceError (carrying the history) is
    raised.
    """
    params = model.parameters()
    adam = _Adam(params, cfg)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    snapshot = [p.copy() for p in params]
    history: list = []

    for epoch in range(cfg.epochs):
        p_o, dirs, y = provide(epoch)
        p_od = p_o + EVAL_OFFSET * dirs
        order = shuffle_rng.permutation(y.size)
        sums = np.zeros(4)
        seen = 0
        for start in range(0, y.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            values, grads = _batch_loss_and_grads(model, p_od[idx], p_o[idx], y[idx])
            if not np.isfinite(values[3]):
                for p, s in zip(params, snapshot):
                    p[...] = s
                err = DivergenceError(
                    f"non-finite loss in epoch {epoch + 1}; parameters rolled back")
                err.history = history
                raise err
            adam.step(params, grads)
            sums += np.array(values) * idx.size
            seen += idx.size
        kld, cc, mae, total = (sums / seen).tolist()
        history.append(LossReport(kld, cc, mae, total, seen))
        snapshot = [p.copy() for p in params]
    return history


def train(model: NergModel, samples: list, cfg: TrainConfig):
    """Fit on a fixed sample list; returns (model, per-epoch history)."""
    if not samples:
        raise ValueError("no training samples")
    p_o = np.array([s.position.as_array() for s in samples])
    dirs = np.array([s.direction for s in samples])
    y = np.array([s.g for s in samples])
    history = _run_epochs(model, cfg, lambda epoch: (p_o, dirs, y))
    return model, history


def train_on_probes(model: NergModel, probes: ProbeSet, cfg: TrainConfig):
    """Fit with fresh uniform directions drawn from the probes each epoch."""
    if len(probes) == 0:
        raise ValueError("probe set is empty")

    def provide(epoch: int):
        return make_training_arrays(probes, cfg.samples_per_probe,
                                    seed=[cfg.seed, 2, epoch])

    history = _run_epochs(model, cfg, provide)
    return model, history


def evaluate(model: NergModel, probes: ProbeSet, n_dirs: int = 1024,
             seed: int = 0) -> LossReport:
    """Held-out metrics: per probe, compare the KDE against predictions at
    p_o = probe center, p_od = p_o + one scene unit along each direction;
    metrics are computed per probe, then averaged."""
    if len(probes) == 0:
        raise ValueError("probe set is empty")
    rng = np.random.default_rng(seed)
    sums = np.zeros(4)
    for probe in probes.probes:
        dirs = sample_sphere_uniform(n_dirs, rng)
        y = probe_density_many(probe, dirs)
        center = probe.center.as_array()
        p_o = np.broadcast_to(center, (n_dirs, 3))
        p_od = center + EVAL_OFFSET * dirs
        yhat = predict_gaze_batch(model, p_od, p_o)
        q = np.maximum(yhat, KLD_EPS)
        kld = loss_kld(y / y.sum(), q / q.sum())
        cc = loss_cc(y, yhat)
        mae = loss_mae(y, yhat)
        sums += np.array([kld, cc, mae, kld + mae + (1.0 - cc)])
    kld, cc, mae, total = (sums / len(probes)).tolist()
    return LossReport(kld, cc, mae, total, len(probes) * n_dirs)


# ---------------------------------------------------------------------------
# serialization


def save_loss_history(history: list, path) -> None:
    lines = ["epoch,kld,cc,mae,total"]
    for i, rep in enumerate(history, start=1):
        lines.append(f"{i},{rep.kld:.9g},{rep.cc:.9g},{rep.mae:.9g},{rep.total:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")


def _tensor_entries(model: NergModel) -> list:
    entries = []
    for i, (w, b) in enumerate(model.trunk):
        entries.append((f"trunk.{i}.weight", w))
        entries.append((f"trunk.{i}.bias", b))
    entries.append(("head_e.weight", model.head_e[0]))
    entries.append(("head_e.bias", model.head_e[1]))
    entries.append(("head_c.weight", model.head_c[0]))
    entries.append(("head_c.bias", model.head_c[1]))
    return entries


def save_checkpoint(model: NergModel, path, metadata: dict | None = None) -> None:
    """One-line JSON envelope, then a binary section of float32 tensors
    addressed by byte offsets recorded in the envelope."""
    entries = _tensor_entries(model)
    tensors = []
    offset = 0
    blobs = []
    for name, arr in entries:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    envelope = {
        "format_version": 1,
        "variant": model.variant,
        "encoding": {"l_pos": model.encoding.l_pos, "l_dir": model.encoding.l_dir,
                     "include_raw": model.encoding.include_raw},
        "aabb": model.aabb.to_json(),
        "depth": model.depth,
        "width": model.width,
        "seed": model.seed,
        "metadata": metadata if metadata is not None else model.metadata,
        "tensors": tensors,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(envelope).encode("utf-8"))
        f.write(b"\n")
        f.write(CHECKPOINT_MAGIC)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> NergModel:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataFormatError(f"{path}: missing checkpoint envelope")
    try:
        envelope = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: bad envelope: {e}") from e
    if raw[nl + 1:nl + 9] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic in binary section")
    base = nl + 9
    if envelope.get("format_version") != 1:
        raise DataFormatError(f"{path}: unsupported format version")

    enc = EncodingConfig(**envelope["encoding"])
    model = NergModel(envelope["variant"], enc, Aabb.from_json(envelope["aabb"]),
                      depth=int(envelope["depth"]), width=int(envelope["width"]),
                      seed=int(envelope["seed"]))
    model.metadata = envelope.get("metadata", {})
    by_name = {t["name"]: t for t in envelope["tensors"]}
    for name, arr in _tensor_entries(model):
        entry = by_name.get(name)
        if entry is None or tuple(entry["shape"]) != arr.shape:
            raise DataFormatError(f"{path}: tensor {name} missing or misshapen")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + int(entry["offset"])
        if len(raw) - start < count * 4:
            raise DataFormatError(f"{path}: truncated tensor {name}")
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        arr[...] = data.reshape(arr.shape).astype(np.float64)
    return model
