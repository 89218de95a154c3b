"""Synthetic pair generation, cloud serialization and dataset manifests.

Scenes are built from labeled surface primitives (room shell plus clutter in
3D, polylines plus arcs in 2D).  A pair is two overlapping crops of one
surface sample set; the second crop is moved by a random rigid transform,
both crops get independent Gaussian coordinate noise plus uniform outliers,
and every real point carries feature channels that are piecewise-constant
per primitive with small per-cloud noise.  The exact generating transform is
recorded so evaluation has ground truth, while the training loader strips it.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyDataset,
    FormatError,
    GenerationFailed,
    IoError,
    MissingGroundTruth,
    SplitOverlap,
)
from .geometry import PointCloud, RigidTransform, apply, random_rotation
from .spatial import voxel_downsample

_CRISP_NOISE = 0.04
_JUNK_NOISE = 2.0
_SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic pair generator."""

    dim: int = 3
    points_per_cloud: int = 500
    overlap_range: tuple[float, float] = (0.3, 0.8)
    noise_sigma: float = 0.075
    outlier_fraction: float = 0.05
    feature_channels: int = 14
    scene_oversample: float = 3.0
    translation_range: float = 2.0

    def __post_init__(self) -> None:
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.points_per_cloud < 10:
            raise ValueError("points_per_cloud must be at least 10")
        lo, hi = self.overlap_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("overlap_range must satisfy 0 < lo <= hi <= 1")
        if self.noise_sigma < 0.0 or self.outlier_fraction < 0.0:
            raise ValueError("noise_sigma and outlier_fraction must be non-negative")
        if self.feature_channels < 0:
            raise ValueError("feature_channels must be non-negative")
        if self.scene_oversample < 1.5:
            raise ValueError("scene_oversample must be at least 1.5")


@dataclass(frozen=True)
class GeneratedPair:
    a: PointCloud
    b: PointCloud
    transform: RigidTransform
    overlap: float


@dataclass(frozen=True)
class ScenePairRecord:
    """One manifest entry; ``gt`` is None on the training side."""

    pair_id: str
    path_a: str
    path_b: str
    split: str
    gt: RigidTransform | None = None


@dataclass(frozen=True)
class Manifest:
    dim: int
    records: tuple[ScenePairRecord, ...]
    gt_stripped: bool = False


@dataclass(frozen=True)
class PairDataset:
    """Voxelized clouds grouped for training; carries no ground truth."""

    train_pairs: tuple[tuple[PointCloud, PointCloud], ...]
    val_pairs: tuple[tuple[PointCloud, PointCloud], ...]


# ---------------------------------------------------------------------------
# scene construction
# ---------------------------------------------------------------------------


class _Scene:
    def __init__(self, coords: np.ndarray, prim_ids: np.ndarray):
        self.coords = coords
        self.prim_ids = prim_ids


def _sample_rect3(rng, origin, edge_u, edge_v, count):
    s = rng.uniform(0.0, 1.0, size=(count, 1))
    t = rng.uniform(0.0, 1.0, size=(count, 1))
    return origin + s * edge_u + t * edge_v


# Share of scene samples placed on clutter objects rather than the room
# shell / outer walls.  Clutter carries most of the per-point identity
# signal (small primitives with distinct feature values), so it gets a
# fixed share instead of its tiny area-proportional one.
_CLUTTER_SHARE = 0.72


def _allocate(rng, n_points, shell, clutter):
    """Split points between shell and clutter groups, area-weighted within."""
    n_clutter = int(round(n_points * _CLUTTER_SHARE)) if clutter else 0
    groups = (
        (shell, n_points - n_clutter),
        (clutter, n_clutter),
    )
    chunks = []
    ids = []
    offset = 0
    for surfaces, total in groups:
        if not surfaces or total == 0:
            offset += len(surfaces)
            continue
        weights = np.array([s[0] for s in surfaces])
        counts = rng.multinomial(total, weights / weights.sum())
        for prim, ((_, sampler), count) in enumerate(zip(surfaces, counts)):
            if count == 0:
                continue
            chunks.append(sampler(rng, int(count)))
            ids.append(np.full(int(count), offset + prim, dtype=np.int64))
        offset += len(surfaces)
    return _Scene(np.concatenate(chunks, axis=0), np.concatenate(ids))


def _scene_box_room(rng: np.random.Generator, n_points: int) -> _Scene:
    lx = rng.uniform(5.0, 7.0)
    ly = rng.uniform(4.0, 6.0)
    lz = rng.uniform(2.6, 3.4)
    shell: list[tuple[float, object]] = []

    def rect(origin, eu, ev):
        area = np.linalg.norm(np.cross(eu, ev))
        shell.append(
            (area, lambda rng, c, o=np.array(origin), u=np.array(eu), v=np.array(ev): _sample_rect3(rng, o, u, v, c))
        )

    rect([0, 0, 0], [lx, 0, 0], [0, ly, 0])  # floor
    rect([0, 0, lz], [lx, 0, 0], [0, ly, 0])  # ceiling
    rect([0, 0, 0], [lx, 0, 0], [0, 0, lz])  # walls
    rect([0, ly, 0], [lx, 0, 0], [0, 0, lz])
    rect([0, 0, 0], [0, ly, 0], [0, 0, lz])
    rect([lx, 0, 0], [0, ly, 0], [0, 0, lz])

    clutter: list[tuple[float, object]] = []
    n_objects = int(rng.integers(24, 37))
    for _ in range(n_objects):
        kind = rng.integers(0, 3)
        center = np.array(
            [
                rng.uniform(0.6, lx - 0.6),
                rng.uniform(0.6, ly - 0.6),
                rng.uniform(0.3, lz - 0.5),
            ]
        )
        if kind == 0:  # sphere
            radius = rng.uniform(0.08, 0.18)

            def sample_sphere(rng, c, ctr=center, r=radius):
                direction = rng.normal(size=(c, 3))
                direction /= np.linalg.norm(direction, axis=1, keepdims=True)
                return ctr + r * direction

            clutter.append((4.0 * math.pi * radius**2, sample_sphere))
        elif kind == 1:  # open vertical cylinder
            radius = rng.uniform(0.06, 0.14)
            height = rng.uniform(0.2, 0.4)

            def sample_cyl(rng, c, ctr=center, r=radius, h=height):
                theta = rng.uniform(0.0, 2.0 * math.pi, size=c)
                zz = rng.uniform(-h / 2.0, h / 2.0, size=c)
                return ctr + np.stack(
                    [r * np.cos(theta), r * np.sin(theta), zz], axis=1
                )

            clutter.append((2.0 * math.pi * radius * height, sample_cyl))
        else:  # axis-aligned box shell
            half = rng.uniform(0.05, 0.12, size=3)

            def sample_box(rng, c, ctr=center, h=half):
                areas = np.array(
                    [h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]]
                )
                faces = rng.choice(6, size=c, p=areas / areas.sum())
                uv = rng.uniform(-1.0, 1.0, size=(c, 2))
                pts = np.empty((c, 3))
                for face in range(6):
                    rows = faces == face
                    axis = face // 2
                    sign = 1.0 if face % 2 == 0 else -1.0
                    others = [i for i in range(3) if i != axis]
                    pts[rows, axis] = sign * h[axis]
                    pts[rows, others[0]] = uv[rows, 0] * h[others[0]]
                    pts[rows, others[1]] = uv[rows, 1] * h[others[1]]
                return ctr + pts

            area = 8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2])
            clutter.append((area, sample_box))

    return _allocate(rng, n_points, shell, clutter)


def _scene_walls_arcs(rng: np.random.Generator, n_points: int) -> _Scene:
    lx = rng.uniform(8.0, 12.0)
    ly = rng.uniform(6.0, 10.0)
    boundary: list[tuple[float, object]] = []
    interior: list[tuple[float, object]] = []

    def segment(target, p0, p1):
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        length = float(np.linalg.norm(p1 - p0))

        def sample(rng, c, a=p0, b=p1):
            t = rng.uniform(0.0, 1.0, size=(c, 1))
            return a + t * (b - a)

        target.append((length, sample))

    segment(boundary, [0, 0], [lx, 0])
    segment(boundary, [lx, 0], [lx, ly])
    segment(boundary, [lx, ly], [0, ly])
    segment(boundary, [0, ly], [0, 0])
    for _ in range(int(rng.integers(4, 8))):
        start = np.array([rng.uniform(1, lx - 1), rng.uniform(1, ly - 1)])
        angle = rng.uniform(0.0, math.pi)
        length = rng.uniform(0.8, 2.5)
        segment(
            interior, start, start + length * np.array([math.cos(angle), math.sin(angle)])
        )
    for _ in range(int(rng.integers(4, 8))):
        center = np.array([rng.uniform(1, lx - 1), rng.uniform(1, ly - 1)])
        radius = rng.uniform(0.3, 0.9)
        start = rng.uniform(0.0, 2.0 * math.pi)
        span = rng.uniform(math.pi / 2.0, 2.0 * math.pi)

        def sample_arc(rng, c, ctr=center, r=radius, s=start, w=span):
            theta = s + rng.uniform(0.0, 1.0, size=c) * w
            return ctr + r * np.stack([np.cos(theta), np.sin(theta)], axis=1)

        interior.append((radius * span, sample_arc))

    return _allocate(rng, n_points, boundary, interior)


def _crisp_channels(channels: int) -> int:
    """How many leading feature channels carry low-noise palette values."""
    return min((channels + 1) // 2, 3)


def _feature_noise(rng, shape: tuple[int, int]) -> np.ndarray:
    """Per-channel measurement noise of the simulated multi-band sensor.

    The leading (crisp) bands are well calibrated and carry tight Gaussian
    noise.  The trailing bands suffer polarity-flip interference — each
    reading lands near +-_JUNK_NOISE with a random sign plus jitter — which
    drowns their per-primitive values; they are the kind of channel a
    matcher has to learn to discount.
    """
    channels = shape[1]
    n_crisp = _crisp_channels(channels)
    n_junk = channels - n_crisp
    noise = np.empty(shape)
    noise[:, :n_crisp] = rng.normal(0.0, _CRISP_NOISE, size=(shape[0], n_crisp))
    signs = rng.integers(0, 2, size=(shape[0], n_junk)) * 2 - 1
    jitter = rng.uniform(-0.3, 0.3, size=(shape[0], n_junk))
    noise[:, n_crisp:] = _JUNK_NOISE * signs + jitter
    return noise


def _palette_values(rng, count: int, channels: int) -> np.ndarray:
    """Per-primitive channel values for a simulated multi-band sensor.

    The crisp (leading) channels draw from a fixed global palette — a
    quantization grid over [0, 1]^n whose resolution depends only on the
    channel count, not on the scene, mimicking a shared material catalogue
    (paint colors, radar cross-section classes).  Scenes draw distinct
    palette cells per primitive, so the cell centers — and hence the
    structure a matcher can latch onto — are identical across the whole
    corpus.  The noisy trailing channels draw unquantized values; their
    heavy measurement noise makes them near-useless anyway.
    """
    if channels == 0:
        return np.zeros((count, 0))
    n_crisp = _crisp_channels(channels)
    levels = 5 if n_crisp >= 3 else (7 if n_crisp == 2 else 128)
    n_cells = levels**n_crisp
    if n_cells < count:
        raise GenerationFailed(
            f"feature palette too small for {count} primitives"
        )
    cells = rng.choice(n_cells, size=count, replace=False)
    values = np.empty((count, channels))
    for channel in range(n_crisp):
        values[:, channel] = (cells % levels + 0.5) / levels
        cells //= levels
    if channels > n_crisp:
        values[:, n_crisp:] = rng.uniform(0.0, 1.0, size=(count, channels - n_crisp))
    return values


def _knn_crop(
    coords: np.ndarray,
    center: np.ndarray,
    count: int,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Indices of a viewpoint crop: ``count`` points drawn near ``center``.

    With an rng, the crop is a random subset of the 1.25x nearest pool, so
    two crops of the same region see partly different surface samples — the
    per-view resampling a real sensor would produce.  Without an rng the
    crop is exactly the k nearest (used where bit-stable crops are needed).
    """
    dists = np.linalg.norm(coords - center, axis=1)
    order = np.lexsort((np.arange(coords.shape[0]), dists))
    if rng is None:
        return np.sort(order[:count])
    pool = order[: min(int(round(count * 1.25)), coords.shape[0])]
    return np.sort(rng.choice(pool, size=count, replace=False))


def generate_pair(
    config: SynthConfig, rng: np.random.Generator
) -> GeneratedPair:
    """Draw one scene and carve an overlapping, rigidly-moved pair from it.

    Overlap is point-wise: the fraction of cloud a's real points whose
    generating surface sample also appears in cloud b.  The crop separation
    is bisected until the measured overlap lands inside
    ``config.overlap_range``; persistent failure raises
    :class:`GenerationFailed`.  With zero noise, zero outliers and full
    overlap, cloud b is exactly ``apply(transform, a)``.
    """
    n = config.points_per_cloud
    lo, hi = config.overlap_range
    for _ in range(8):  # fresh scenes until the overlap target is met
        scene_points = int(round(n * config.scene_oversample))
        scene = (
            _scene_box_room(rng, scene_points)
            if config.dim == 3
            else _scene_walls_arcs(rng, scene_points)
        )
        coords = scene.coords
        span = coords.max(axis=0) - coords.min(axis=0)
        diameter = float(np.linalg.norm(span))
        n_prims = int(scene.prim_ids.max()) + 1
        prim_values = _palette_values(rng, n_prims, config.feature_channels)
        base_features = prim_values[scene.prim_ids]

        for _ in range(24):  # center/direction attempts within this scene
            center_a = coords.min(axis=0) + rng.uniform(0.15, 0.85, size=config.dim) * span
            direction = rng.normal(size=config.dim)
            direction /= np.linalg.norm(direction)
            target = rng.uniform(lo, hi)
            if target >= 1.0 - 1e-12:
                crop_a = _knn_crop(coords, center_a, n)
                crop_b = crop_a
            else:
                crop_a = _knn_crop(coords, center_a, n, rng)
                d_lo, d_hi = 0.0, diameter
                crop_b = None
                for _ in range(20):
                    mid = (d_lo + d_hi) / 2.0
                    candidate = _knn_crop(coords, center_a + mid * direction, n, rng)
                    overlap = np.intersect1d(crop_a, candidate).size / n
                    if overlap > target:
                        d_lo = mid
                    else:
                        d_hi = mid
                    crop_b = candidate
            overlap = np.intersect1d(crop_a, crop_b).size / n
            if not lo <= overlap <= hi:
                continue

            transform = random_rotation(config.dim, rng)
            transform = RigidTransform(
                transform.rotation,
                rng.uniform(-config.translation_range, config.translation_range, config.dim),
            )

            def finish(crop: np.ndarray, moved: bool) -> PointCloud:
                pts = coords[crop]
                if moved:
                    pts = pts @ transform.rotation.T + transform.translation
                pts = pts + rng.normal(0.0, config.noise_sigma, size=pts.shape) if config.noise_sigma > 0 else pts
                feats = base_features[crop]
                if config.feature_channels:
                    feats = feats + _feature_noise(rng, feats.shape)
                n_out = int(round(config.outlier_fraction * n))
                if n_out:
                    bb_lo = pts.min(axis=0)
                    bb_hi = pts.max(axis=0)
                    pad = 0.05 * (bb_hi - bb_lo)
                    extra = rng.uniform(bb_lo - pad, bb_hi + pad, size=(n_out, config.dim))
                    pts = np.concatenate([pts, extra], axis=0)
                    feats = np.concatenate(
                        [feats, rng.uniform(0.0, 1.0, size=(n_out, config.feature_channels))],
                        axis=0,
                    )
                return PointCloud(pts, feats)

            cloud_a = finish(crop_a, moved=False)
            cloud_b = finish(crop_b, moved=True)
            return GeneratedPair(cloud_a, cloud_b, transform, float(overlap))
    raise GenerationFailed(
        f"could not hit overlap range {config.overlap_range} after retries"
    )


# ---------------------------------------------------------------------------
# cloud serialization (ASCII PLY subset)
# ---------------------------------------------------------------------------


def save_cloud(cloud: PointCloud, path) -> None:
    """Write a cloud as ASCII PLY with double-precision properties.

    Coordinates are stored as x, y, z (2D clouds store z = 0 plus a header
    comment ``dim=2``); feature channels follow as f0..f{k-1}.  Floats use
    the shortest round-trip decimal representation, so save/load is
    bit-exact.
    """
    k = cloud.n_feature_channels
    lines = ["ply", "format ascii 1.0"]
    if cloud.dim == 2:
        lines.append("comment dim=2")
    lines.append(f"element vertex {cloud.n_points}")
    for name in ("x", "y", "z"):
        lines.append(f"property double {name}")
    for i in range(k):
        lines.append(f"property double f{i}")
    lines.append("end_header")
    coords = cloud.coords
    if cloud.dim == 2:
        coords = np.concatenate([coords, np.zeros((cloud.n_points, 1))], axis=1)
    for row in range(cloud.n_points):
        vals = [repr(float(v)) for v in coords[row]]
        vals.extend(repr(float(v)) for v in cloud.features[row])
        lines.append(" ".join(vals))
    try:
        with open(path, "w", encoding="ascii") as handle:
            handle.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write cloud {path}: {exc}") from exc


def load_cloud(path) -> PointCloud:
    """Read a cloud written by :func:`save_cloud`.

    Raises :class:`FormatError` (naming the offending row where applicable)
    on structural problems or non-finite values.
    """
    try:
        with open(path, "r", encoding="ascii") as handle:
            lines = handle.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read cloud {path}: {exc}") from exc
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: missing 'ply' magic line")
    dim = 3
    n_vertices = None
    properties: list[str] = []
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        token = line.strip()
        if token == "end_header":
            body_start = i + 1
            break
        if token.startswith("comment"):
            if "dim=2" in token:
                dim = 2
            continue
        if token.startswith("format"):
            if token != "format ascii 1.0":
                raise FormatError(f"{path}: unsupported format line {token!r}")
            continue
        if token.startswith("element vertex"):
            try:
                n_vertices = int(token.split()[-1])
            except ValueError as exc:
                raise FormatError(f"{path}: bad vertex count") from exc
            continue
        if token.startswith("property"):
            parts = token.split()
            if len(parts) != 3:
                raise FormatError(f"{path}: malformed property line {token!r}")
            properties.append(parts[2])
            continue
        raise FormatError(f"{path}: unexpected header line {token!r}")
    if body_start is None or n_vertices is None:
        raise FormatError(f"{path}: incomplete header")
    if properties[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: expected x, y, z as the first properties")
    feature_names = properties[3:]
    if feature_names != [f"f{i}" for i in range(len(feature_names))]:
        raise FormatError(f"{path}: feature properties must be f0..f{{k-1}}")
    rows = lines[body_start:]
    if len(rows) < n_vertices:
        raise FormatError(
            f"{path}: header promises {n_vertices} vertices, found {len(rows)}"
        )
    data = np.empty((n_vertices, len(properties)))
    for r in range(n_vertices):
        tokens = rows[r].split()
        if len(tokens) != len(properties):
            raise FormatError(
                f"{path}: row {r} has {len(tokens)} values, expected {len(properties)}"
            )
        try:
            values = [float(t) for t in tokens]
        except ValueError as exc:
            raise FormatError(f"{path}: row {r} holds a non-numeric value") from exc
        if not all(math.isfinite(v) for v in values):
            raise FormatError(f"{path}: row {r} holds a non-finite value")
        data[r] = values
    coords = data[:, :3]
    if dim == 2:
        if np.any(coords[:, 2] != 0.0):
            raise FormatError(f"{path}: dim=2 cloud has non-zero z values")
        coords = coords[:, :2]
    return PointCloud(coords, data[:, 3:])


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def build_manifest(records, dim: int) -> dict:
    """Assemble the manifest payload, checking split consistency."""
    seen: dict[str, str] = {}
    pairs = []
    for rec in records:
        if rec.split not in _SPLITS:
            raise ValueError(f"unknown split {rec.split!r}")
        if rec.pair_id in seen:
            raise SplitOverlap(
                f"pair id {rec.pair_id!r} appears in both "
                f"{seen[rec.pair_id]!r} and {rec.split!r}"
            )
        seen[rec.pair_id] = rec.split
        entry = {"id": rec.pair_id, "a": rec.path_a, "b": rec.path_b, "split": rec.split}
        if rec.gt is not None:
            entry["gt"] = json.loads(rec.gt.to_json())
        pairs.append(entry)
    return {"dim": dim, "pairs": pairs}


def save_manifest(records, dim: int, path) -> None:
    payload = build_manifest(records, dim)
    try:
        with open(path, "w", encoding="ascii") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc


def load_manifest(path, training: bool = False) -> Manifest:
    """Read a manifest; with ``training`` set, ground truth never crosses.

    The training loader drops every gt field and marks the manifest as
    stripped, so downstream training code cannot observe the generating
    transforms even accidentally.
    """
    try:
        with open(path, "r", encoding="ascii") as handle:
            payload = json.load(handle)
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if "dim" not in payload or "pairs" not in payload:
        raise FormatError(f"{path}: manifest needs 'dim' and 'pairs' fields")
    entries = payload["pairs"]
    if not entries:
        raise EmptyDataset(f"{path}: manifest holds no pairs")
    seen: dict[str, str] = {}
    records = []
    stripped = False
    for entry in entries:
        for key in ("id", "a", "b", "split"):
            if key not in entry:
                raise FormatError(f"{path}: pair entry is missing field {key!r}")
        if entry["split"] not in _SPLITS:
            raise FormatError(f"{path}: unknown split {entry['split']!r}")
        if entry["id"] in seen:
            raise SplitOverlap(
                f"pair id {entry['id']!r} appears in both "
                f"{seen[entry['id']]!r} and {entry['split']!r}"
            )
        seen[entry["id"]] = entry["split"]
        gt = None
        if "gt" in entry and entry["gt"] is not None:
            if training:
                stripped = True
            else:
                gt = RigidTransform.from_json(json.dumps(entry["gt"]))
        records.append(
            ScenePairRecord(
                pair_id=entry["id"],
                path_a=entry["a"],
                path_b=entry["b"],
                split=entry["split"],
                gt=gt,
            )
        )
    return Manifest(
        dim=int(payload["dim"]), records=tuple(records), gt_stripped=stripped
    )


def load_record_clouds(
    record: ScenePairRecord, base_dir
) -> tuple[PointCloud, PointCloud]:
    return (
        load_cloud(os.path.join(base_dir, record.path_a)),
        load_cloud(os.path.join(base_dir, record.path_b)),
    )


def require_ground_truth(record: ScenePairRecord) -> RigidTransform:
    if record.gt is None:
        raise MissingGroundTruth(f"pair {record.pair_id!r} carries no ground truth")
    return record.gt


# ---------------------------------------------------------------------------
# dataset-level helpers
# ---------------------------------------------------------------------------


def generate_dataset(
    config: SynthConfig,
    out_dir,
    n_train: int,
    n_val: int,
    n_test: int,
    seed: int = 0,
) -> str:
    """Generate a full corpus on disk; returns the manifest path.

    Each pair draws from an independent generator seeded by (seed, index),
    so corpora are reproducible and pairs are independent.
    """
    total = n_train + n_val + n_test
    if total < 1:
        raise EmptyDataset("refusing to generate an empty dataset")
    clouds_dir = os.path.join(out_dir, "clouds")
    os.makedirs(clouds_dir, exist_ok=True)
    records = []
    for index in range(total):
        if index < n_train:
            split = "train"
        elif index < n_train + n_val:
            split = "val"
        else:
            split = "test"
        rng = np.random.default_rng([seed, index])
        pair = generate_pair(config, rng)
        pair_id = f"pair_{index:04d}"
        rel_a = os.path.join("clouds", f"{pair_id}_a.ply")
        rel_b = os.path.join("clouds", f"{pair_id}_b.ply")
        save_cloud(pair.a, os.path.join(out_dir, rel_a))
        save_cloud(pair.b, os.path.join(out_dir, rel_b))
        records.append(
            ScenePairRecord(
                pair_id=pair_id,
                path_a=rel_a,
                path_b=rel_b,
                split=split,
                gt=pair.transform,
            )
        )
    manifest_path = os.path.join(out_dir, "manifest.json")
    save_manifest(records, config.dim, manifest_path)
    return manifest_path


def load_training_dataset(manifest_path, voxel_size: float) -> PairDataset:
    """Load and voxelize the train/val splits without exposing ground truth."""
    manifest = load_manifest(manifest_path, training=True)
    base = os.path.dirname(os.path.abspath(manifest_path))
    buckets: dict[str, list[tuple[PointCloud, PointCloud]]] = {"train": [], "val": []}
    for record in manifest.records:
        if record.split not in buckets:
            continue
        a, b = load_record_clouds(record, base)
        buckets[record.split].append(
            (voxel_downsample(a, voxel_size), voxel_downsample(b, voxel_size))
        )
    return PairDataset(
        train_pairs=tuple(buckets["train"]), val_pairs=tuple(buckets["val"])
    )
