"""Pairwise relational embedding of instances.

Each ordered instance pair (i, j) gets an edge feature built from category,
appearance (box-local mask patch), and relative geometry, fused through a
single affine map and a sigmoid into a potential matrix. The antisymmetric
rectified part of that matrix is the overlap relation matrix: entry (i, j)
positive means instance i is covered by instance j, and at most one direction
per pair can be positive.

Pair rows are enumerated in index order: the feature row for pair (i, j)
lives at flat index ``i * n + j``.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable

import numpy as np

from . import bilinear
from .errors import ConfigError, DataFormatError
from .tensorcore import ParamStore, as_tensor, sigmoid, tensor_from_bytes, tensor_to_bytes

PATCH_SIZE = 28
PATCH_LEN = PATCH_SIZE * PATCH_SIZE

#: Parameter names in the store, in canonical order.
PARAM_NAMES = (
    "app_subj",
    "app_obj",
    "app_proj",
    "cat_subj",
    "cat_obj",
    "cat_proj",
    "geom_proj",
    "fc_w",
    "fc_b",
)


@dataclass(frozen=True)
class EmbedDims:
    """Embedding widths. ``total_dim`` is the concatenated edge width."""

    n_thing_classes: int
    cat_rank: int = 16
    cat_dim: int = 16
    app_rank: int = 16
    app_dim: int = 16
    geom_dim: int = 16

    def __post_init__(self) -> None:
        for name, v in asdict(self).items():
            if v < 1:
                raise ConfigError(f"EmbedDims.{name} must be positive, got {v}")

    @property
    def total_dim(self) -> int:
        return self.app_dim + self.cat_dim + self.geom_dim


#: Relative scale of the subject/object difference at init. Near-symmetric
#: initialization keeps the relation potentials almost symmetric, so the
#: early antisymmetry (who covers whom) is seeded by the panoptic gradient
#: rather than by the random draw, and the relation loss then amplifies that
#: seeded direction instead of locking in an arbitrary one.
INIT_ASYMMETRY = 0.01


def _uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_embed_store(
    dims: EmbedDims, rng: np.random.Generator, asymmetry: float = INIT_ASYMMETRY
) -> ParamStore:
    """Fresh parameter store: uniform(-a, a) with a = sqrt(6/(fan_in+fan_out)),
    zero bias. Subject/object twins share a base draw and differ only by an
    ``asymmetry``-scaled perturbation; the purely antisymmetric geometry map
    starts at the same reduced scale."""
    store = ParamStore()

    def twin(fan_in: int, rank: int) -> tuple[np.ndarray, np.ndarray]:
        base = _uniform_init(rng, fan_in, rank, (fan_in, rank))
        d1 = _uniform_init(rng, fan_in, rank, (fan_in, rank))
        d2 = _uniform_init(rng, fan_in, rank, (fan_in, rank))
        return base + asymmetry * d1, base + asymmetry * d2

    # The 784-long mask input makes the appearance block both hotter and
    # faster-learning than the other blocks (updates to its input weights
    # move activations in proportion to the input's squared norm); damp the
    # whole block at init so it cannot ignite a runaway that saturates the
    # potentials before the overlap directions have settled.
    app_subj, app_obj = twin(PATCH_LEN, dims.app_rank)
    store.add("app_subj", 0.3 * app_subj)
    store.add("app_obj", 0.3 * app_obj)
    store.add(
        "app_proj",
        0.1 * _uniform_init(rng, dims.app_rank, dims.app_dim, (dims.app_rank, dims.app_dim)),
    )
    c = dims.n_thing_classes
    cat_subj, cat_obj = twin(c, dims.cat_rank)
    store.add("cat_subj", cat_subj)
    store.add("cat_obj", cat_obj)
    store.add("cat_proj", _uniform_init(rng, dims.cat_rank, dims.cat_dim, (dims.cat_rank, dims.cat_dim)))
    store.add("geom_proj", asymmetry * _uniform_init(rng, 4, dims.geom_dim, (4, dims.geom_dim)))
    d = dims.total_dim
    store.add("fc_w", _uniform_init(rng, d, 1, (d,)))
    store.add("fc_b", np.zeros(1))
    return store


# ---------------------------------------------------------------------------
# Edge features


def _pair_relation(feats: np.ndarray, subj_w: np.ndarray, obj_w: np.ndarray, proj_w: np.ndarray):
    """Low-rank outer-product fusion for all ordered pairs.

    Row (i, j) of the output is proj_w^T (relu(subj_w^T f_i) o relu(obj_w^T f_j)).
    Returns (n^2 x d features, vjp); the vjp yields cotangents for
    (feats, subj_w, obj_w, proj_w). ReLU subgradient at 0 is 0.
    """
    feats = as_tensor(feats)
    if feats.ndim != 2 or feats.shape[1] != subj_w.shape[0]:
        raise ConfigError(
            f"feature width {feats.shape} incompatible with embedding {subj_w.shape}"
        )
    if subj_w.shape != obj_w.shape or subj_w.shape[1] != proj_w.shape[0]:
        raise ConfigError("inconsistent embedding parameter shapes")
    n = feats.shape[0]
    zs = feats @ subj_w
    zo = feats @ obj_w
    s = np.maximum(zs, 0.0)
    o = np.maximum(zo, 0.0)
    had = s[:, None, :] * o[None, :, :]
    had_flat = had.reshape(n * n, -1)
    out = had_flat @ proj_w

    def vjp(g: np.ndarray):
        g = np.asarray(g, dtype=np.float64).reshape(n * n, proj_w.shape[1])
        d_proj = had_flat.T @ g
        d_had = (g @ proj_w.T).reshape(n, n, -1)
        d_s = np.einsum("ijr,jr->ir", d_had, o)
        d_o = np.einsum("ijr,ir->jr", d_had, s)
        d_zs = d_s * (zs > 0.0)
        d_zo = d_o * (zo > 0.0)
        d_subj = feats.T @ d_zs
        d_obj = feats.T @ d_zo
        d_feats = d_zs @ subj_w.T + d_zo @ obj_w.T
        return d_feats, d_subj, d_obj, d_proj

    return out, vjp


def category_relation(cats: np.ndarray, subj_w: np.ndarray, obj_w: np.ndarray, proj_w: np.ndarray):
    """Category edge features from one-hot (or relaxed) class rows.

    Returns (n^2 x cat_dim, vjp(g) -> (d_cats, d_subj, d_obj, d_proj)).
    """
    return _pair_relation(cats, subj_w, obj_w, proj_w)


def appearance_relation(masks: np.ndarray, subj_w: np.ndarray, obj_w: np.ndarray, proj_w: np.ndarray):
    """Appearance edge features from flattened 28x28 mask patches."""
    masks = as_tensor(masks)
    if masks.ndim != 2 or masks.shape[1] != PATCH_LEN:
        raise ConfigError(f"appearance input must be n x {PATCH_LEN}, got {masks.shape}")
    return _pair_relation(masks, subj_w, obj_w, proj_w)


def resize_mask_patch(mask: np.ndarray, box) -> np.ndarray:
    """Bilinear resample of ``mask`` restricted to ``box`` onto a 28x28 grid
    (corner samples on the box corners), flattened row-major to 784."""
    mask = np.asarray(mask, dtype=np.float64)
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise ConfigError(f"degenerate box (w={w}, h={h})")
    cols = bilinear.box_grid(x, w, PATCH_SIZE)
    rows = bilinear.box_grid(y, h, PATCH_SIZE)
    patch = bilinear.sample(mask, rows[:, None], cols[None, :])
    return patch.reshape(PATCH_LEN)


def relative_geometry(boxes: np.ndarray) -> np.ndarray:
    """Raw 4-vector relative geometry for all ordered pairs (n x n x 4):
    ((x_i-x_j)/w_j, (y_i-y_j)/h_j, log(w_i/w_j), log(h_i/h_j))."""
    boxes = as_tensor(boxes)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ConfigError(f"boxes must be n x 4, got {boxes.shape}")
    x, y, w, h = boxes.T
    if np.any(w <= 0) or np.any(h <= 0):
        raise ConfigError("boxes must have positive width and height")
    n = boxes.shape[0]
    raw = np.empty((n, n, 4), dtype=np.float64)
    raw[:, :, 0] = (x[:, None] - x[None, :]) / w[None, :]
    raw[:, :, 1] = (y[:, None] - y[None, :]) / h[None, :]
    logw = np.log(w)
    logh = np.log(h)
    raw[:, :, 2] = logw[:, None] - logw[None, :]
    raw[:, :, 3] = logh[:, None] - logh[None, :]
    return raw


def geometry_relation(boxes: np.ndarray, proj_w: np.ndarray):
    """Scale- and translation-invariant geometry edge features.

    Boxes are treated as constants; the vjp covers the projection only.
    """
    proj_w = as_tensor(proj_w)
    if proj_w.ndim != 2 or proj_w.shape[0] != 4:
        raise ConfigError(f"geometry projection must be 4 x d, got {proj_w.shape}")
    n = np.asarray(boxes).shape[0]
    raw_flat = relative_geometry(boxes).reshape(n * n, 4)
    out = raw_flat @ proj_w

    def vjp(g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64).reshape(n * n, proj_w.shape[1])
        return raw_flat.T @ g

    return out, vjp


def concat_relations(app: np.ndarray, cat: np.ndarray, geom: np.ndarray):
    """Column-concatenate edge features in (appearance, category, geometry)
    order. Returns (features, vjp(g) -> (g_app, g_cat, g_geom))."""
    app, cat, geom = as_tensor(app), as_tensor(cat), as_tensor(geom)
    if not (app.shape[0] == cat.shape[0] == geom.shape[0]):
        raise ConfigError(
            f"row-count mismatch: {app.shape[0]}, {cat.shape[0]}, {geom.shape[0]}"
        )
    out = np.concatenate([app, cat, geom], axis=1)
    w0, w1 = app.shape[1], app.shape[1] + cat.shape[1]

    def vjp(g: np.ndarray):
        g = np.asarray(g, dtype=np.float64)
        return g[:, :w0], g[:, w0:w1], g[:, w1:]

    return out, vjp


# ---------------------------------------------------------------------------
# Potentials and the overlap relation matrix


def potential_matrix(feats: np.ndarray, fc_w: np.ndarray, fc_b) -> tuple[np.ndarray, Callable]:
    """Sigmoid of the fused edge features, reshaped to n x n.

    Entry (i, j) is the potential that instance i is covered by j.
    Returns (matrix, vjp(g) -> (d_feats, d_w, d_b)).
    """
    feats = as_tensor(feats)
    fc_w = as_tensor(fc_w)
    if feats.ndim != 2 or feats.shape[1] != fc_w.shape[0]:
        raise ConfigError(f"feature width {feats.shape} does not match fc weight {fc_w.shape}")
    n2 = feats.shape[0]
    n = int(round(np.sqrt(n2)))
    if n * n != n2:
        raise ConfigError(f"feature row count {n2} is not a perfect square")
    logits = feats @ fc_w + np.asarray(fc_b, dtype=np.float64).reshape(-1)[0]
    m = sigmoid(logits).reshape(n, n)

    def vjp(g: np.ndarray):
        g = np.asarray(g, dtype=np.float64).reshape(n2)
        dz = g * (m.reshape(n2) * (1.0 - m.reshape(n2)))
        d_feats = np.outer(dz, fc_w)
        d_w = feats.T @ dz
        d_b = np.array([dz.sum()])
        return d_feats, d_w, d_b

    return m, vjp


def overlap_matrix(potentials: np.ndarray) -> tuple[np.ndarray, Callable]:
    """Rectified antisymmetric part of the potential matrix.

    O = relu(M - M^T): at most one of (i, j)/(j, i) positive, zero diagonal.
    The subgradient at exact ties is 0.
    """
    m = as_tensor(potentials)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"potential matrix must be square, got {m.shape}")
    diff = m - m.T
    out = np.maximum(diff, 0.0)
    mask = diff > 0.0

    def vjp(g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        masked = g * mask
        return masked - masked.T

    return out, vjp


# ---------------------------------------------------------------------------
# Full chain and model persistence


@dataclass
class EmbedModel:
    """Embedding dimensions plus the parameter store holding all tensors."""

    dims: EmbedDims
    store: ParamStore

    @classmethod
    def init(cls, dims: EmbedDims, rng: np.random.Generator) -> "EmbedModel":
        return cls(dims, init_embed_store(dims, rng))


def overlap_from_features(
    store: ParamStore,
    cats: np.ndarray,
    boxes: np.ndarray,
    masks: np.ndarray,
):
    """Run the full edge-embedding chain to the overlap relation matrix.

    Returns (O, vjp) where vjp(dO) yields a dict of parameter-name ->
    gradient for every learnable tensor in the chain.
    """
    e_app, vjp_app = appearance_relation(
        masks, store.value("app_subj"), store.value("app_obj"), store.value("app_proj")
    )
    e_cat, vjp_cat = category_relation(
        cats, store.value("cat_subj"), store.value("cat_obj"), store.value("cat_proj")
    )
    e_geom, vjp_geom = geometry_relation(boxes, store.value("geom_proj"))
    feats, vjp_concat = concat_relations(e_app, e_cat, e_geom)
    potentials, vjp_pot = potential_matrix(feats, store.value("fc_w"), store.value("fc_b"))
    overlaps, vjp_ov = overlap_matrix(potentials)

    def vjp(d_overlaps: np.ndarray) -> dict[str, np.ndarray]:
        d_m = vjp_ov(d_overlaps)
        d_feats, d_w, d_b = vjp_pot(d_m)
        g_app, g_cat, g_geom = vjp_concat(d_feats)
        _, d_as, d_ao, d_ap = vjp_app(g_app)
        _, d_cs, d_co, d_cp = vjp_cat(g_cat)
        d_k = vjp_geom(g_geom)
        return {
            "app_subj": d_as,
            "app_obj": d_ao,
            "app_proj": d_ap,
            "cat_subj": d_cs,
            "cat_obj": d_co,
            "cat_proj": d_cp,
            "geom_proj": d_k,
            "fc_w": d_w,
            "fc_b": d_b,
        }

    return overlaps, vjp


MODEL_FORMAT = "sogseg-model-v1"


def save_model(path, model: EmbedModel) -> None:
    """Model file: JSON with a dims block and base64 SOGT payloads per
    parameter (bit-exact round trip)."""
    params = {
        name: base64.b64encode(tensor_to_bytes(model.store.value(name))).decode("ascii")
        for name in PARAM_NAMES
    }
    doc = {"format": MODEL_FORMAT, "dims": asdict(model.dims), "params": params}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path) -> EmbedModel:
    source = str(path)
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{source}: unreadable model file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise DataFormatError(f"{source}: not a {MODEL_FORMAT} file")
    try:
        dims = EmbedDims(**doc["dims"])
        store = ParamStore()
        for name in PARAM_NAMES:
            blob = base64.b64decode(doc["params"][name])
            store.add(name, tensor_from_bytes(blob, source=f"{source}:{name}"))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{source}: malformed model file ({exc})") from exc
    model = EmbedModel(dims, store)
    _check_model_shapes(model, source)
    return model


def _check_model_shapes(model: EmbedModel, source: str) -> None:
    d = model.dims
    expected = {
        "app_subj": (PATCH_LEN, d.app_rank),
        "app_obj": (PATCH_LEN, d.app_rank),
        "app_proj": (d.app_rank, d.app_dim),
        "cat_subj": (d.n_thing_classes, d.cat_rank),
        "cat_obj": (d.n_thing_classes, d.cat_rank),
        "cat_proj": (d.cat_rank, d.cat_dim),
        "geom_proj": (4, d.geom_dim),
        "fc_w": (d.total_dim,),
        "fc_b": (1,),
    }
    for name, shape in expected.items():
        got = model.store.value(name).shape
        if got != shape:
            raise DataFormatError(f"{source}: parameter {name} has shape {got}, expected {shape}")
