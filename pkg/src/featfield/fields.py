"""Image-conditioned field network.

An image is encoded once into a feature grid at 1/4 resolution. A 3D query
point is projected into each conditioning view, the grid is sampled
bilinearly at that location, views are averaged, and the result is fed
with the positionally encoded point through a 4-layer trunk. The trunk
output (the internal feature) drives four single-layer heads: density,
color, distilled feature and regressed coordinate.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

import featfield.diffengine as de
from featfield.diffengine import Tensor
from featfield.errors import EmptyViewList, ShapeMismatch
from featfield.geometry import Camera, project_points


@dataclass
class FieldConfig:
    d_teacher: int = 6
    d_int: int = 128
    c_enc: int = 64
    enc_channels: tuple = (32, 32, 64, 64)
    enc_strides: tuple = (1, 2, 1, 2)
    trunk_depth: int = 4
    pe_x: int = 6
    pe_d: int = 4
    seed: int = 0

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        self.enc_strides = tuple(self.enc_strides)
        if len(self.enc_channels) != len(self.enc_strides):
            raise ValueError("enc_channels and enc_strides must have equal length")
        if self.enc_channels[-1] != self.c_enc:
            raise ValueError("last encoder channel count must equal c_enc")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.enc_strides))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        d["enc_strides"] = list(self.enc_strides)
        return d


def positional_encode(x, num_freqs: int, dtype=np.float64) -> np.ndarray:
    """``x`` followed by sin/cos(2^j pi x) for j < num_freqs, all components per block."""
    x = np.asarray(x, dtype=dtype)
    if num_freqs < 0:
        raise ValueError("num_freqs must be >= 0")
    parts = [x]
    for j in range(num_freqs):
        arg = (2.0**j) * np.pi * x
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def encoded_size(k: int, num_freqs: int) -> int:
    return k + 2 * num_freqs * k


@dataclass
class FeatureGrid:
    """Encoder output for one image; ``values`` is an (h, w, C) tensor."""

    values: Tensor
    image_width: int
    image_height: int

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def bilinear_matrix(pixels: np.ndarray, image_size: tuple[int, int], grid_hw: tuple[int, int],
                    row_offset: int = 0, n_cols: int | None = None,
                    scale: float = 1.0) -> sparse.csr_matrix:
    """Sparse (N, n_cols) interpolation weights for flattened (h*w) grid rows.

    Out-of-range coordinates clamp to the border cells. ``row_offset`` shifts
    column indices so several grids can be stacked into one flat array.
    """
    W, H = image_size
    h, w = grid_hw
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = pixels.shape[0]
    gx = np.clip(pixels[:, 0] * (w / W) - 0.5, 0, w - 1)
    gy = np.clip(pixels[:, 1] * (h / H) - 0.5, 0, h - 1)
    x0 = np.clip(np.floor(gx), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(gy), 0, max(h - 2, 0)).astype(np.int64)
    fx, fy = gx - x0, gy - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    cols = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], 1) + row_offset
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], 1) * scale
    rows = np.repeat(np.arange(n), 4)
    n_cols = row_offset + h * w if n_cols is None else n_cols
    return sparse.csr_matrix((wts.reshape(-1), (rows, cols.reshape(-1))), shape=(n, n_cols))


def sample_pixel_feature(grid: FeatureGrid, pixel, image_size=None) -> Tensor:
    """Bilinear lookup of a (C,) feature at a continuous pixel coordinate."""
    size = image_size or (grid.image_width, grid.image_height)
    m = bilinear_matrix(np.asarray(pixel).reshape(1, 2), size, (grid.height, grid.width))
    flat = de.reshape(grid.values, (grid.height * grid.width, grid.channels))
    return de.reshape(de.sparse_matmul(m, flat), (grid.channels,))


def aggregate_views(per_view: Sequence) -> Tensor:
    """Elementwise mean over views."""
    if len(per_view) == 0:
        raise EmptyViewList("need at least one view to aggregate")
    views = [de.as_tensor(v) for v in per_view]
    for v in views[1:]:
        if v.shape != views[0].shape:
            raise ShapeMismatch(f"view features differ in shape: {views[0].shape} vs {v.shape}")
    total = views[0]
    for v in views[1:]:
        total = total + v
    return total * (1.0 / len(views)) if len(views) > 1 else total


def conditioning_matrix(points: np.ndarray, obj_index: np.ndarray,
                        cameras: Sequence[Sequence[Camera]], grid_hw: tuple[int, int]
                        ) -> sparse.csr_matrix:
    """Pixel-aligned conditioning as one sparse operator.

    ``cameras[b]`` lists the conditioning views of object b; grids are stacked
    view-major per object, i.e. flat grid index = (offset_b + k) * h * w. The
    multi-view average is folded into the weights.
    """
    h, w = grid_hw
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    obj_index = np.asarray(obj_index).reshape(-1)
    n_grids = sum(len(c) for c in cameras)
    total = n_grids * h * w
    mats = []
    order = []
    offset = 0
    for b, cams in enumerate(cameras):
        sel = np.nonzero(obj_index == b)[0]
        m = None
        for k, cam in enumerate(cams):
            uv, _ = project_points(cam, points[sel])
            mk = bilinear_matrix(uv, (cam.width, cam.height), grid_hw,
                                 row_offset=(offset + k) * h * w, n_cols=total,
                                 scale=1.0 / len(cams))
            m = mk if m is None else m + mk
        offset += len(cams)
        mats.append(m)
        order.append(sel)
    stacked = sparse.vstack(mats, format="csr")
    perm = np.empty(points.shape[0], dtype=np.int64)
    perm[np.concatenate(order)] = np.arange(points.shape[0])
    return stacked[perm]


@dataclass
class FieldOutput:
    sigma: Tensor
    color: Tensor
    feature: Tensor
    internal: Tensor
    coord_pred: Tensor


def _init_linear(rng, fan_in: int, fan_out: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
    b = rng.uniform(-bound, bound, (fan_out,)).astype(dtype)
    return w, b


class FieldNetwork:
    def __init__(self, config: FieldConfig | None = None, dtype=np.float32):
        self.config = cfg = config or FieldConfig()
        rng = np.random.default_rng(cfg.seed)
        p: "OrderedDict[str, Tensor]" = OrderedDict()
        cin = 3
        for i, cout in enumerate(cfg.enc_channels):
            fan_in = 9 * cin
            bound = 1.0 / np.sqrt(fan_in)
            p[f"enc.{i}.w"] = rng.uniform(-bound, bound, (3, 3, cin, cout))
            p[f"enc.{i}.b"] = rng.uniform(-bound, bound, (cout,))
            cin = cout
        fan = encoded_size(3, cfg.pe_x) + cfg.c_enc
        for i in range(cfg.trunk_depth):
            p[f"trunk.{i}.w"], p[f"trunk.{i}.b"] = _init_linear(rng, fan, cfg.d_int, np.float64)
            fan = cfg.d_int
        pe_d = encoded_size(3, cfg.pe_d)
        for name, fan_in, out in (
            ("sigma", cfg.d_int, 1),
            ("color", cfg.d_int + pe_d, 3),
            ("feature", cfg.d_int + pe_d, cfg.d_teacher),
            ("coord", cfg.d_int, 3),
        ):
            p[f"head.{name}.w"], p[f"head.{name}.b"] = _init_linear(rng, fan_in, out, np.float64)
        self.params = OrderedDict(
            (k, Tensor(np.asarray(v, dtype=dtype), requires_grad=True)) for k, v in p.items()
        )

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "FieldNetwork":
        net = FieldNetwork.__new__(FieldNetwork)
        net.config = self.config
        net.params = OrderedDict(
            (k, Tensor(v.data.astype(dtype), requires_grad=True)) for k, v in self.params.items()
        )
        return net

    def copy(self) -> "FieldNetwork":
        return self.astype(self.dtype)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # ------------------------------------------------------------- encoder

    def encode(self, images) -> Tensor:
        """(B, H, W, 3) images in [0, 1] -> (B, H/4, W/4, C_enc) features."""
        x = de.as_tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim == 3:
            x = de.reshape(x, (1,) + x.shape)
        for i, stride in enumerate(self.config.enc_strides):
            x = de.conv2d(x, self.params[f"enc.{i}.w"], stride=stride, padding=1)
            x = de.relu(x + self.params[f"enc.{i}.b"])
        return x

    # ------------------------------------------------------------- field

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return de.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def trunk(self, condition: Tensor, x: np.ndarray) -> Tensor:
        pe = positional_encode(x, self.config.pe_x, self.dtype)
        h = de.concat([de.as_tensor(pe), condition], axis=-1)
        for i in range(self.config.trunk_depth):
            h = de.relu(self._linear(f"trunk.{i}", h))
        return h

    def forward(self, condition, x, d) -> FieldOutput:
        """Batched field evaluation: condition (N, C_enc), x (N, 3), d (N, 3) unit."""
        condition = de.as_tensor(condition, dtype=self.dtype)
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
        if condition.shape != (x.shape[0], self.config.c_enc):
            raise ShapeMismatch(
                f"condition shape {condition.shape} does not match ({x.shape[0]}, {self.config.c_enc})"
            )
        if d.shape != x.shape:
            raise ShapeMismatch(f"direction shape {d.shape} differs from point shape {x.shape}")
        if d.size and np.max(np.abs(np.linalg.norm(d, axis=-1) - 1.0)) > 1e-5:
            raise ValueError("view directions must be unit length")
        internal = self.trunk(condition, x)
        pe_d = de.as_tensor(positional_encode(d, self.config.pe_d, self.dtype))
        hd = de.concat([pe_d, internal], axis=-1)
        n = x.shape[0]
        sigma = de.reshape(de.softplus(self._linear("head.sigma", internal)), (n,))
        color = de.sigmoid(self._linear("head.color", hd))
        feature = self._linear("head.feature", hd)
        coord = self._linear("head.coord", internal)
        return FieldOutput(sigma, color, feature, internal, coord)

    def internal_features(self, condition, x) -> Tensor:
        condition = de.as_tensor(condition, dtype=self.dtype)
        return self.trunk(condition, np.asarray(x, dtype=np.float64).reshape(-1, 3))


def encode_image(net: FieldNetwork, image) -> FeatureGrid:
    image = np.asarray(image)
    values = net.encode(image[None])
    values = de.reshape(values, values.shape[1:])
    return FeatureGrid(values, image.shape[1], image.shape[0])


def eval_field(net: FieldNetwork, condition, x, d) -> FieldOutput:
    """Evaluate the field; 1-D inputs give unbatched outputs."""
    single = np.ndim(x) == 1
    if not single:
        return net.forward(condition, x, d)
    cond = de.reshape(de.as_tensor(condition, dtype=net.dtype), (1, -1))
    out = net.forward(cond, np.reshape(x, (1, 3)), np.reshape(d, (1, 3)))
    return FieldOutput(*(de.reshape(t, t.shape[1:]) for t in (
        out.sigma, out.color, out.feature, out.internal, out.coord_pred)))
