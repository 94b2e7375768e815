"""Synthetic shape dataset generation and all on-disk formats.

Shapes are sampled uniformly by surface area from eight parametric families.
Every cloud is a pure function of (category, parameters, seed), and the whole
dataset is a pure function of (config, seed): per-instance seeds are derived
by hashing, never by consuming a shared random stream.

File formats (stable external contracts):
  * PC3D: magic ``PC3D``, little-endian uint32 count, count * 3 LE float32.
  * PCT1: ``PCT1`` header line, count line, one ``x y z`` line per point.
  * Checkpoints: a one-line JSON manifest (kind, shapes, byte offsets)
    followed by a raw little-endian float64 blob.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import normalize_unit_ball

__all__ = [
    "CATEGORIES",
    "ShapeSpec",
    "Dataset",
    "FormatError",
    "BadMagicError",
    "CountMismatchError",
    "TruncatedFileError",
    "CheckpointError",
    "derive_seed",
    "generate_shape",
    "build_dataset",
    "write_cloud",
    "read_cloud",
    "write_dataset",
    "read_dataset",
    "save_model",
    "load_model",
]

CATEGORIES = (
    "sphere",
    "box",
    "cylinder",
    "cone",
    "torus",
    "capsule",
    "pyramid",
    "ellipsoid",
)


class FormatError(ValueError):
    """Malformed point-cloud or checkpoint file."""


class BadMagicError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CheckpointError(FormatError):
    pass


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary labels; independent of PYTHONHASHSEED."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


# ----------------------------------------------------------------------
# shape generation
# ----------------------------------------------------------------------

# parameter ranges per category; all lengths in object units before the
# dataset-level unit-ball normalization
_PARAM_RANGES = {
    "sphere": {"radius": (0.5, 1.2)},
    "box": {"ax": (0.3, 1.0), "ay": (0.3, 1.0), "az": (0.3, 1.0)},
    "cylinder": {"radius": (0.3, 0.8), "height": (0.8, 2.0)},
    "cone": {"radius": (0.4, 1.0), "height": (0.8, 2.0)},
    "torus": {"major": (0.6, 1.0), "minor_frac": (0.15, 0.4)},
    "capsule": {"radius": (0.25, 0.6), "height": (0.6, 1.6)},
    "pyramid": {"half_base": (0.4, 1.0), "height": (0.6, 1.8)},
    "ellipsoid": {"ax": (0.35, 1.0), "ay": (0.35, 1.0), "az": (0.35, 1.0)},
}


@dataclass(frozen=True)
class ShapeSpec:
    """Concrete shape instance: a category, its parameters, and a sampling seed."""

    category: str
    params: dict
    seed: int

    @classmethod
    def random(cls, category: str, seed: int) -> "ShapeSpec":
        if category not in _PARAM_RANGES:
            raise ValueError(f"unknown category {category!r}")
        rng = np.random.default_rng(derive_seed("shape-params", category, seed))
        params = {
            name: float(rng.uniform(lo, hi))
            for name, (lo, hi) in _PARAM_RANGES[category].items()
        }
        return cls(category, params, seed)


def _unit_sphere(rng, n):
    g = rng.standard_normal((n, 3))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _sample_sphere(rng, n, p):
    return p["radius"] * _unit_sphere(rng, n)


def _sample_ellipsoid(rng, n, p):
    a, b, c = p["ax"], p["ay"], p["az"]
    w_max = max(b * c, a * c, a * b)
    out = np.empty((n, 3))
    got = 0
    while got < n:
        u = _unit_sphere(rng, max(2 * (n - got), 16))
        w = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        accept = rng.random(u.shape[0]) * w_max < w
        pts = u[accept] * (a, b, c)
        take = min(n - got, pts.shape[0])
        out[got : got + take] = pts[:take]
        got += take
    return out


def _sample_box(rng, n, p):
    ext = np.array([p["ax"], p["ay"], p["az"]])
    areas = np.repeat([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]], 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts = np.empty((n, 3))
    for ax in range(3):
        mask = face // 2 == ax
        o1, o2 = [j for j in range(3) if j != ax]
        pts[mask, ax] = sign[mask] * ext[ax]
        pts[mask, o1] = uv[mask, 0] * ext[o1]
        pts[mask, o2] = uv[mask, 1] * ext[o2]
    return pts


def _sample_cylinder(rng, n, p):
    r, h = p["radius"], p["height"]
    side = 2 * math.pi * r * h
    cap = math.pi * r * r
    comp = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    z_side = rng.uniform(-h / 2, h / 2, size=n)
    rad_cap = r * np.sqrt(rng.random(n))
    on_side = comp == 0
    rr = np.where(on_side, r, rad_cap)
    z = np.where(on_side, z_side, np.where(comp == 1, h / 2, -h / 2))
    return np.column_stack([rr * np.cos(theta), rr * np.sin(theta), z])


def _sample_cone(rng, n, p):
    r, h = p["radius"], p["height"]
    lateral = math.pi * r * math.hypot(r, h)
    base = math.pi * r * r
    on_base = rng.random(n) < base / (lateral + base)
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    t = np.sqrt(rng.random(n))  # area-uniform radial fraction (from the apex)
    z = np.where(on_base, -h / 2, h / 2 - t * h)
    return np.column_stack([t * r * np.cos(theta), t * r * np.sin(theta), z])


def _sample_torus(rng, n, p):
    big = p["major"]
    small = p["minor_frac"] * big
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    phi = np.empty(n)
    got = 0
    while got < n:
        cand = rng.uniform(0.0, 2 * math.pi, size=2 * (n - got))
        accept = rng.random(cand.size) * (big + small) < big + small * np.cos(cand)
        take = cand[accept][: n - got]
        phi[got : got + take.size] = take
        got += take.size
    ring = big + small * np.cos(phi)
    return np.column_stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)])


def _sample_capsule(rng, n, p):
    r, h = p["radius"], p["height"]
    side = 2 * math.pi * r * h
    sphere = 4 * math.pi * r * r
    on_side = rng.random(n) < side / (side + sphere)
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    z_side = rng.uniform(-h / 2, h / 2, size=n)
    caps = r * _unit_sphere(rng, n)
    side_pts = np.column_stack([r * np.cos(theta), r * np.sin(theta), z_side])
    cap_pts = caps + np.column_stack(
        [np.zeros(n), np.zeros(n), np.where(caps[:, 2] >= 0, h / 2, -h / 2)]
    )
    return np.where(on_side[:, None], side_pts, cap_pts)


def _sample_pyramid(rng, n, p):
    b, h = p["half_base"], p["height"]
    apex = np.array([0.0, 0.0, h / 2])
    corners = np.array(
        [[b, b, -h / 2], [-b, b, -h / 2], [-b, -b, -h / 2], [b, -b, -h / 2]]
    )
    side_area = b * math.hypot(h, b)  # per triangular face
    base_area = 4 * b * b
    areas = np.array([side_area] * 4 + [base_area])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    su = np.sqrt(rng.random(n))  # uniform triangle sampling
    v = rng.random(n)
    base_xy = rng.uniform(-b, b, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(4):
        mask = face == f
        v0, v1 = corners[f], corners[(f + 1) % 4]
        s, w = su[mask, None], v[mask, None]
        pts[mask] = (1 - s) * apex + s * (1 - w) * v0 + s * w * v1
    base = face == 4
    pts[base, 0] = base_xy[base, 0]
    pts[base, 1] = base_xy[base, 1]
    pts[base, 2] = -h / 2
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "capsule": _sample_capsule,
    "pyramid": _sample_pyramid,
    "ellipsoid": _sample_ellipsoid,
}


def generate_shape(spec: ShapeSpec, n: int) -> np.ndarray:
    """Sample n surface points, uniform by area. Deterministic per spec."""
    if n < 1:
        raise ValueError("n must be positive")
    sampler = _SAMPLERS.get(spec.category)
    if sampler is None:
        raise ValueError(f"unknown category {spec.category!r}")
    for name, value in spec.params.items():
        if not (np.isfinite(value) and value > 0):
            raise ValueError(f"invalid parameter {name}={value} for {spec.category}")
    rng = np.random.default_rng(derive_seed("shape-points", spec.category, spec.seed))
    return sampler(rng, n, spec.params)


# ----------------------------------------------------------------------
# dataset
# ----------------------------------------------------------------------


@dataclass
class Dataset:
    """Train/test splits of unit-ball-normalized clouds with integer labels."""

    train: list = field(default_factory=list)  # list of (cloud, label)
    test: list = field(default_factory=list)
    class_names: tuple = CATEGORIES
    n_points: int = 256
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def build_dataset(
    categories=CATEGORIES,
    train_per_class: int = 200,
    test_per_class: int = 50,
    n_points: int = 256,
    seed: int = 0,
) -> Dataset:
    """Generate, normalize, and split the synthetic dataset deterministically.

    Instance identity is (category, running index); train indices precede
    test indices, so the splits are disjoint by construction.
    """
    if train_per_class < 1 or test_per_class < 1:
        raise ValueError("per-class counts must be positive")
    ds = Dataset(class_names=tuple(categories), n_points=n_points, seed=seed)
    for label, category in enumerate(categories):
        for idx in range(train_per_class + test_per_class):
            spec = ShapeSpec.random(category, derive_seed("instance", seed, category, idx))
            cloud = normalize_unit_ball(generate_shape(spec, n_points))
            target = ds.train if idx < train_per_class else ds.test
            target.append((cloud, label))
    return ds


# ----------------------------------------------------------------------
# point-cloud files
# ----------------------------------------------------------------------

_MAGIC_BIN = b"PC3D"
_MAGIC_TXT = "PCT1"


def write_cloud(path, pc, fmt: str = "pc3d") -> None:
    """Write a cloud in PC3D (binary) or PCT1 (text); 32-bit precision."""
    pts = np.asarray(pc, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"expected an (N, 3) cloud, got {pts.shape}")
    if fmt == "pc3d":
        with open(path, "wb") as fh:
            fh.write(_MAGIC_BIN)
            fh.write(np.array([pts.shape[0]], dtype="<u4").tobytes())
            fh.write(pts.astype("<f4").tobytes())
    elif fmt == "pct1":
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"{_MAGIC_TXT}\n{pts.shape[0]}\n")
            for x, y, z in pts:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def read_cloud(path) -> np.ndarray:
    """Read either cloud format (sniffed from the magic); returns float64."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _MAGIC_BIN:
            raw_count = fh.read(4)
            if len(raw_count) < 4:
                raise TruncatedFileError(f"{path}: truncated header")
            count = int(np.frombuffer(raw_count, dtype="<u4")[0])
            body = fh.read()
            expected = count * 12
            if len(body) != expected:
                raise CountMismatchError(
                    f"{path}: header says {count} points ({expected} bytes), found {len(body)} bytes"
                )
            return np.frombuffer(body, dtype="<f4").reshape(count, 3).astype(np.float64)
        rest = head + fh.read()
    try:
        text = rest.decode("ascii")
    except UnicodeDecodeError as exc:
        raise BadMagicError(f"{path}: unrecognized magic {head!r}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != _MAGIC_TXT:
        raise BadMagicError(f"{path}: unrecognized magic {head!r}")
    if len(lines) < 2:
        raise TruncatedFileError(f"{path}: missing count line")
    try:
        count = int(lines[1])
    except ValueError as exc:
        raise FormatError(f"{path}: bad count line {lines[1]!r}") from exc
    rows = [ln for ln in lines[2:] if ln.strip()]
    if len(rows) != count:
        raise CountMismatchError(f"{path}: header says {count} points, found {len(rows)} lines")
    try:
        pts = np.array([[float(v) for v in ln.split()] for ln in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed coordinate line") from exc
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise FormatError(f"{path}: expected 3 coordinates per line")
    return pts


# ----------------------------------------------------------------------
# dataset directory
# ----------------------------------------------------------------------


def write_dataset(ds: Dataset, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    index = {
        "class_names": list(ds.class_names),
        "n_points": ds.n_points,
        "seed": ds.seed,
        "splits": {},
    }
    for split in ("train", "test"):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        entries = []
        for i, (cloud, label) in enumerate(getattr(ds, split)):
            rel = f"{split}/{i:05d}_{ds.class_names[label]}.pc3d"
            write_cloud(os.path.join(out_dir, rel), cloud)
            entries.append([rel, label])
        index["splits"][split] = entries
    with open(os.path.join(out_dir, "index.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)


def read_dataset(in_dir) -> Dataset:
    index_path = os.path.join(in_dir, "index.json")
    try:
        with open(index_path, "r", encoding="utf-8") as fh:
            index = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{index_path}: unreadable dataset index: {exc}") from exc
    ds = Dataset(
        class_names=tuple(index["class_names"]),
        n_points=int(index["n_points"]),
        seed=int(index["seed"]),
    )
    for split in ("train", "test"):
        bucket = getattr(ds, split)
        for rel, label in index["splits"][split]:
            bucket.append((read_cloud(os.path.join(in_dir, rel)), int(label)))
    return ds


# ----------------------------------------------------------------------
# model checkpoints
# ----------------------------------------------------------------------

_CKPT_FORMAT = "shapeadv-ckpt-1"


def save_model(path, model) -> None:
    """Write a checkpoint: JSON manifest line + little-endian float64 blob."""
    kind, meta, weights = model.to_manifest()
    buf = io.BytesIO()
    entries = []
    for name, arr in weights.items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append([name, list(arr.shape), buf.tell(), len(blob)])
        buf.write(blob)
    manifest = {"format": _CKPT_FORMAT, "kind": kind, "meta": meta, "weights": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(buf.getvalue())


def load_model(path, expect_kind: str | None = None):
    """Load a checkpoint; weights come back bitwise identical to what was saved."""
    from . import models  # deferred: models imports nothing from here

    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(raw[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format") != _CKPT_FORMAT:
        raise CheckpointError(f"{path}: not a {_CKPT_FORMAT} checkpoint")
    kind = manifest.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path}: checkpoint kind is {kind!r}, expected {expect_kind!r}")
    blob = raw[sep + 1 :]
    total = sum(entry[3] for entry in manifest["weights"])
    if len(blob) != total:
        raise CheckpointError(
            f"{path}: weight blob is {len(blob)} bytes, manifest expects {total}"
        )
    weights = {}
    for name, shape, offset, nbytes in manifest["weights"]:
        want = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if nbytes != want:
            raise CheckpointError(
                f"{path}: weight {name!r} has {nbytes} bytes, shape {shape} expects {want}"
            )
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").reshape(shape)
        weights[name] = arr.copy()
    registry = {
        "classifier": models.ClassifierModel,
        "autoencoder": models.AutoencoderModel,
    }
    cls = registry.get(kind)
    if cls is None:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    return cls.from_manifest(manifest["meta"], weights)
