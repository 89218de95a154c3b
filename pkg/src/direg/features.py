"""Point descriptors: handcrafted FPFH and a learned per-point MLP.

The learned descriptor runs on a rotation-invariant local encoding, so the
network itself never has to learn invariance: rotating a cloud changes the
encoding only at floating-point noise level.  Forward and backward passes are
written out explicitly over plain numpy arrays; gradients are validated
against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, IoError, ShapeMismatch, Unsupported2D
from .geometry import PointCloud, _as_float_array
from .spatial import build_index, radius_neighbor_lists

_FPFH_BINS_PER_ANGLE = 11
FPFH_WIDTH = 3 * _FPFH_BINS_PER_ANGLE

# Encoding layout: 3 eigenvalue ratios, 3 normal-alignment statistics,
# neighbor density, centroid-offset norm, then the raw feature channels.
ENCODING_GEOMETRIC_WIDTH = 8
_DENSITY_SATURATION = 64.0


@dataclass(frozen=True)
class FeatureMatrix:
    """An (N, l) block of per-point descriptors.

    ``normalized`` marks rows as unit L2 length (zero rows are tolerated and
    mark invalid points).  ``row_valid`` optionally flags rows whose
    descriptor could actually be computed.
    """

    values: np.ndarray
    normalized: bool = False
    row_valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        vals = _as_float_array(self.values, "feature values")
        if vals.ndim != 2:
            raise ValueError("feature values must be a 2D array")
        if self.normalized and vals.shape[0]:
            norms = np.linalg.norm(vals, axis=1)
            bad = np.abs(norms - 1.0) > 1e-6
            if np.any(bad & (norms > 1e-12)):
                raise ValueError("normalized feature rows must have unit norm")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if self.row_valid is not None:
            valid = np.asarray(self.row_valid, dtype=bool).copy()
            if valid.shape != (vals.shape[0],):
                raise ValueError("row_valid must have one flag per row")
            valid.setflags(write=False)
            object.__setattr__(self, "row_valid", valid)

    @property
    def n_points(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# normals and the rotation-invariant local encoding
# ---------------------------------------------------------------------------


def _batched_covariances(coords: np.ndarray, groups: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Covariance matrix per neighborhood plus a validity flag (>= 3 members)."""
    n, dim = coords.shape
    covs = np.tile(np.eye(dim), (n, 1, 1))
    valid = np.zeros(n, dtype=bool)
    for i, members in enumerate(groups):
        if members.size < 3:
            continue
        pts = coords[members]
        centered = pts - pts.mean(axis=0)
        covs[i] = centered.T @ centered / members.size
        valid[i] = True
    return covs, valid


def _normals_from_covariances(
    coords: np.ndarray, covs: np.ndarray, valid: np.ndarray
) -> np.ndarray:
    """Smallest-eigenvector normals, signed to face the viewpoint origin."""
    _, vecs = np.linalg.eigh(covs)
    normals = vecs[:, :, 0]
    # Flip so each normal points from the surface toward the origin, the
    # conventional stand-in for the sensor position.
    flip = np.sum(normals * coords, axis=1) > 0.0
    normals[flip] *= -1.0
    normals[~valid] = 0.0
    return normals


def compute_normals(cloud: PointCloud, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-point PCA normals over ``radius`` neighborhoods.

    Returns (normals, valid); points whose neighborhood (including the point
    itself) holds fewer than three members get a zero normal and valid=False.
    """
    index = build_index(cloud.coords)
    groups = radius_neighbor_lists(index, cloud.coords, radius)
    covs, valid = _batched_covariances(cloud.coords, groups)
    return _normals_from_covariances(cloud.coords, covs, valid), valid


def _minmax_normalize(features: np.ndarray) -> np.ndarray:
    if features.shape[1] == 0:
        return features.copy()
    lo = features.min(axis=0)
    hi = features.max(axis=0)
    span = hi - lo
    out = np.zeros_like(features)
    live = span > 0.0
    out[:, live] = (features[:, live] - lo[live]) / span[live]
    return out


def local_encoding(cloud: PointCloud, radius: float) -> np.ndarray:
    """Rotation-invariant per-point encoding of shape (N, 8 + k).

    Geometric part per point, all invariant to rigid motions of the cloud:

    * three sorted-eigenvalue ratios of the neighborhood covariance
      (``l2/l1``, ``l3/l1``, ``l3/l2``; the last two are zero in 2D),
    * mean and standard deviation of ``|n_i . n_j|`` over neighbors, plus the
      mean of ``|n_i . u_ij|`` for unit offsets ``u_ij`` to each neighbor,
    * neighbor count within ``radius``, saturated and scaled to [0, 1],
    * norm of the offset from the point to its neighborhood centroid,
      in units of ``radius``.

    Points with fewer than three neighbors (excluding themselves) get all
    geometric components zeroed.  The raw feature channels are appended after
    per-cloud min-max normalization.
    """
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    coords = cloud.coords
    n = cloud.n_points
    index = build_index(coords)
    members = radius_neighbor_lists(index, coords, radius)
    others = [m[m != i] for i, m in enumerate(members)]
    counts = np.array([o.size for o in others], dtype=np.int64)
    live = counts >= 3

    covs, cov_valid = _batched_covariances(coords, members)
    normals = _normals_from_covariances(coords, covs, cov_valid)
    eigvals = np.linalg.eigvalsh(covs)  # ascending per row

    enc = np.zeros((n, ENCODING_GEOMETRIC_WIDTH + cloud.n_feature_channels))
    lam_hi = eigvals[:, -1]
    ok = live & cov_valid & (lam_hi > 0.0)
    if cloud.dim == 3:
        lam_mid = eigvals[:, 1]
        lam_lo = eigvals[:, 0]
        enc[ok, 0] = lam_mid[ok] / lam_hi[ok]
        enc[ok, 1] = lam_lo[ok] / lam_hi[ok]
        mid_ok = ok & (lam_mid > 0.0)
        enc[mid_ok, 2] = lam_lo[mid_ok] / lam_mid[mid_ok]
    else:
        enc[ok, 0] = eigvals[ok, 0] / lam_hi[ok]

    # Pairwise statistics, flattened over (center, neighbor) pairs.
    if np.any(live):
        centers = np.concatenate(
            [np.full(o.size, i, dtype=np.int64) for i, o in enumerate(others) if live[i]]
        )
        neighbors = np.concatenate([o for i, o in enumerate(others) if live[i]])
        offsets = coords[neighbors] - coords[centers]
        dists = np.linalg.norm(offsets, axis=1)
        units = offsets / np.maximum(dists, 1e-300)[:, None]
        nn_align = np.abs(np.sum(normals[centers] * normals[neighbors], axis=1))
        nu_align = np.abs(np.sum(normals[centers] * units, axis=1))

        pair_counts = np.bincount(centers, minlength=n).astype(np.float64)
        denom = np.maximum(pair_counts, 1.0)
        nn_mean = np.bincount(centers, weights=nn_align, minlength=n) / denom
        nn_sq = np.bincount(centers, weights=nn_align * nn_align, minlength=n) / denom
        nn_std = np.sqrt(np.maximum(nn_sq - nn_mean * nn_mean, 0.0))
        nu_mean = np.bincount(centers, weights=nu_align, minlength=n) / denom

        cent = np.zeros((n, cloud.dim))
        np.add.at(cent, centers, coords[neighbors])
        cent /= denom[:, None]
        cent_off = np.linalg.norm(cent - coords, axis=1) / radius

        enc[live, 3] = nn_mean[live]
        enc[live, 4] = nn_std[live]
        enc[live, 5] = nu_mean[live]
        enc[live, 6] = np.minimum(counts[live], _DENSITY_SATURATION) / _DENSITY_SATURATION
        enc[live, 7] = cent_off[live]

    if cloud.n_feature_channels:
        enc[:, ENCODING_GEOMETRIC_WIDTH:] = _minmax_normalize(cloud.features)
    return enc


# ---------------------------------------------------------------------------
# FPFH
# ---------------------------------------------------------------------------


def _pair_angle_histograms(
    coords: np.ndarray,
    normals: np.ndarray,
    centers: np.ndarray,
    neighbors: np.ndarray,
) -> np.ndarray:
    """Accumulate the three 11-bin Darboux-angle histograms per center point."""
    n = coords.shape[0]
    offsets = coords[neighbors] - coords[centers]
    dists = np.linalg.norm(offsets, axis=1)
    good = dists > 1e-12
    centers, neighbors, offsets, dists = (
        centers[good],
        neighbors[good],
        offsets[good],
        dists[good],
    )
    d = offsets / dists[:, None]
    u = normals[centers]
    v = np.cross(d, u)
    v_norm = np.linalg.norm(v, axis=1)
    good = v_norm > 1e-12
    centers, neighbors, d, u, v, v_norm = (
        centers[good],
        neighbors[good],
        d[good],
        u[good],
        v[good],
        v_norm[good],
    )
    v = v / v_norm[:, None]
    w = np.cross(u, v)
    nt = normals[neighbors]
    alpha = np.sum(v * nt, axis=1)
    phi = np.sum(u * d, axis=1)
    theta = np.arctan2(np.sum(w * nt, axis=1), np.sum(u * nt, axis=1))

    nb = _FPFH_BINS_PER_ANGLE
    bins_a = np.clip(((alpha + 1.0) / 2.0 * nb).astype(np.int64), 0, nb - 1)
    bins_p = np.clip(((phi + 1.0) / 2.0 * nb).astype(np.int64), 0, nb - 1)
    # theta lives on a circle: +pi and -pi describe the same configuration
    # (anti-parallel normals, where the atan2 inputs are pure rounding
    # noise), so a sliver at the seam snaps onto the -pi side before binning
    # rather than scattering across the two end bins.
    theta = np.where(theta > math.pi - 1e-9, theta - 2.0 * math.pi, theta)
    bins_t = np.clip(((theta + math.pi) / (2.0 * math.pi) * nb).astype(np.int64), 0, nb - 1)

    hist = np.zeros((n, FPFH_WIDTH))
    np.add.at(hist, (centers, bins_a), 1.0)
    np.add.at(hist, (centers, nb + bins_p), 1.0)
    np.add.at(hist, (centers, 2 * nb + bins_t), 1.0)
    return hist


def _normalize_blocks(hist: np.ndarray) -> np.ndarray:
    out = hist.copy()
    nb = _FPFH_BINS_PER_ANGLE
    for block in range(3):
        chunk = out[:, block * nb : (block + 1) * nb]
        sums = chunk.sum(axis=1, keepdims=True)
        np.divide(chunk, sums, out=chunk, where=sums > 0.0)
    return out


def fpfh_compute(
    cloud: PointCloud, normal_radius: float, feature_radius: float
) -> FeatureMatrix:
    """33-bin FPFH descriptors (11 bins per Darboux angle), two-pass scheme.

    Pass one computes a simplified histogram per point over its
    ``feature_radius`` neighborhood; pass two forms the final descriptor as
    the point's own histogram plus the distance-weighted mean of its
    neighbors' histograms.  Each 11-bin block is normalized to unit sum.
    Points with fewer than five usable neighbors get a zero row and a
    ``row_valid`` flag of False rather than raising.  Only defined for 3D
    clouds; 2D input raises :class:`Unsupported2D`.
    """
    if cloud.dim != 3:
        raise Unsupported2D("FPFH is only defined for 3D clouds")
    if normal_radius <= 0.0 or feature_radius <= 0.0:
        raise ValueError("radii must be positive")
    coords = cloud.coords
    n = cloud.n_points
    normals, normal_valid = compute_normals(cloud, normal_radius)

    index = build_index(coords)
    groups = radius_neighbor_lists(index, coords, feature_radius)
    neigh: list[np.ndarray] = []
    for i, members in enumerate(groups):
        sel = members[(members != i) & normal_valid[members]]
        neigh.append(sel if normal_valid[i] else sel[:0])
    counts = np.array([s.size for s in neigh], dtype=np.int64)
    valid = (counts >= 5) & normal_valid

    if np.any(valid):
        centers = np.concatenate(
            [np.full(s.size, i, dtype=np.int64) for i, s in enumerate(neigh) if valid[i]]
        )
        neighbors = np.concatenate([s for i, s in enumerate(neigh) if valid[i]])
        spfh = _normalize_blocks(
            _pair_angle_histograms(coords, normals, centers, neighbors)
        )
    else:
        spfh = np.zeros((n, FPFH_WIDTH))

    fpfh = np.zeros((n, FPFH_WIDTH))
    for i in range(n):
        if not valid[i]:
            continue
        sel = neigh[i]
        contributing = sel[valid[sel]]
        acc = spfh[i].copy()
        if contributing.size:
            weights = 1.0 / np.maximum(
                np.linalg.norm(coords[contributing] - coords[i], axis=1), 1e-12
            )
            acc += (weights[:, None] * spfh[contributing]).sum(axis=0) / contributing.size
        fpfh[i] = acc
    fpfh = _normalize_blocks(fpfh)
    fpfh[~valid] = 0.0
    return FeatureMatrix(fpfh, normalized=False, row_valid=valid)


# ---------------------------------------------------------------------------
# learned descriptor network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetParams:
    """Weights and biases of a fully connected per-point network.

    ``weights[i]`` has shape (fan_in, fan_out); the activation applies to all
    layers except the last, which stays linear.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and aligned")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        ws = []
        bs = []
        prev_out = None
        for w, b in zip(self.weights, self.biases):
            w = _as_float_array(w, "weight")
            b = _as_float_array(b, "bias").reshape(-1)
            if w.ndim != 2 or b.shape[0] != w.shape[1]:
                raise ShapeMismatch("bias length must match weight fan-out")
            if prev_out is not None and w.shape[0] != prev_out:
                raise ShapeMismatch("layer fan-in must match previous fan-out")
            prev_out = w.shape[1]
            w = w.copy()
            b = b.copy()
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def param_init(
    layer_dims: tuple[int, ...] | list[int],
    rng: np.random.Generator,
    activation: str = "tanh",
) -> NetParams:
    """Symmetric uniform init with variance 1/fan_in per weight; zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError("layer_dims needs at least an input and an output width")
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetParams(tuple(weights), tuple(biases), activation)


def _forward_cached(params: NetParams, inputs: np.ndarray):
    """Run the network, returning the pre-normalization output and layer cache."""
    h = inputs
    hiddens = [h]
    for layer in range(params.n_layers):
        z = h @ params.weights[layer] + params.biases[layer]
        if layer < params.n_layers - 1:
            h = np.tanh(z)
            hiddens.append(h)
        else:
            h = z
    return h, hiddens


def net_forward(
    params: NetParams, encoding: np.ndarray, normalize: bool = True
) -> FeatureMatrix:
    """Batch forward pass over an (N, d_in) encoding matrix.

    With ``normalize`` the output rows are scaled to unit L2 norm; rows whose
    raw output is exactly zero are left at zero.
    """
    enc = _as_float_array(encoding, "encoding")
    if enc.ndim != 2 or enc.shape[1] != params.layer_dims[0]:
        raise ShapeMismatch(
            f"encoding width {enc.shape[1] if enc.ndim == 2 else '?'} does not match "
            f"network input width {params.layer_dims[0]}"
        )
    raw, _ = _forward_cached(params, enc)
    if not normalize:
        return FeatureMatrix(raw, normalized=False)
    norms = np.linalg.norm(raw, axis=1)
    safe = np.maximum(norms, 1e-300)
    out = raw / safe[:, None]
    out[norms == 0.0] = 0.0
    return FeatureMatrix(out, normalized=True)


def net_backward(
    params: NetParams,
    encoding: np.ndarray,
    output_grad: np.ndarray,
    normalize: bool = True,
) -> NetParams:
    """Gradient of ``sum(output * output_grad)`` with respect to all parameters.

    ``output_grad`` is the loss gradient at the (optionally normalized)
    network output.  Returns a NetParams-shaped container of gradients.
    """
    enc = _as_float_array(encoding, "encoding")
    grad_out = _as_float_array(output_grad, "output_grad")
    raw, hiddens = _forward_cached(params, enc)
    if grad_out.shape != raw.shape:
        raise ShapeMismatch("output_grad shape must match the network output")

    if normalize:
        norms = np.linalg.norm(raw, axis=1)
        safe = np.maximum(norms, 1e-300)
        y = raw / safe[:, None]
        inner = np.sum(grad_out * y, axis=1, keepdims=True)
        g = (grad_out - inner * y) / safe[:, None]
        g[norms == 0.0] = 0.0
    else:
        g = grad_out

    grad_w: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    grad_b: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    for layer in range(params.n_layers - 1, -1, -1):
        grad_w[layer] = hiddens[layer].T @ g
        grad_b[layer] = g.sum(axis=0)
        if layer > 0:
            g = (g @ params.weights[layer].T) * (1.0 - hiddens[layer] ** 2)
    return NetParams(tuple(grad_w), tuple(grad_b), params.activation)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_CHECKPOINT_FORMAT = "direg-net/1"


def params_to_json(params: NetParams) -> str:
    payload = {
        "format": _CHECKPOINT_FORMAT,
        "activation": params.activation,
        "layer_dims": list(params.layer_dims),
        "layers": [
            {
                "weight": [[float(v) for v in row] for row in w],
                "bias": [float(v) for v in b],
            }
            for w, b in zip(params.weights, params.biases)
        ],
    }
    return json.dumps(payload)


def params_from_json(text: str) -> NetParams:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid checkpoint JSON: {exc}") from exc
    if payload.get("format") != _CHECKPOINT_FORMAT:
        raise FormatError(
            f"unknown checkpoint format {payload.get('format')!r}, "
            f"expected {_CHECKPOINT_FORMAT!r}"
        )
    try:
        layers = payload["layers"]
        params = NetParams(
            tuple(np.asarray(layer["weight"], dtype=np.float64) for layer in layers),
            tuple(np.asarray(layer["bias"], dtype=np.float64) for layer in layers),
            payload["activation"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint payload: {exc}") from exc
    if list(params.layer_dims) != list(payload.get("layer_dims", [])):
        raise FormatError("checkpoint layer_dims header disagrees with matrices")
    return params


def save_params(params: NetParams, path) -> None:
    try:
        with open(path, "w", encoding="ascii") as handle:
            handle.write(params_to_json(params))
            handle.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_params(path) -> NetParams:
    try:
        with open(path, "r", encoding="ascii") as handle:
            text = handle.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return params_from_json(text)
