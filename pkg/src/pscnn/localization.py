"""Fully convolutional part localizer.

The network maps an image to M+1 score maps on its output grid (channel 0 is
background). Training targets come from ``build_label_map``; inference
smooths the per-position softmax with a Gaussian and takes a thresholded
argmax per part channel.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .errors import AnnotationError, ConfigurationError, DimensionError
from .geometry import NetworkGeometry, receptive_field
from .layers import ConvStack, Module, he_normal
from .tensor import Tensor, _result, _tensor, conv2d, log_softmax, relu


class _Missing:
    """Sentinel for a part that was not detected."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "MISSING"

    def __bool__(self):
        return False


MISSING = _Missing()


class PartLocations:
    """Grid coordinates (h, w) per part id 1..M, or MISSING.

    ``scores`` keeps the peak smoothed response per part and ``argmax`` its
    position before thresholding, so ranking metrics can use parts that fell
    below the threshold.
    """

    def __init__(self, coords, scores=None, argmax=None):
        self.coords = dict(sorted(coords.items()))
        self.scores = dict(sorted((scores or {}).items()))
        self.argmax = dict(sorted((argmax or {}).items()))

    @property
    def num_parts(self):
        return len(self.coords)

    def __getitem__(self, part):
        return self.coords[part]

    def __iter__(self):
        return iter(self.coords.items())

    def __eq__(self, other):
        return isinstance(other, PartLocations) and self.coords == other.coords

    def __repr__(self):
        return f"PartLocations({self.coords})"

    def present(self):
        return [c for c, loc in self.coords.items() if loc is not MISSING]

    def with_missing(self, parts):
        coords = {c: (MISSING if c in parts else loc) for c, loc in self.coords.items()}
        return PartLocations(coords, self.scores, self.argmax)

    def as_array(self):
        """(M, 2) int array of (h, w); missing parts are (-1, -1)."""
        out = np.full((len(self.coords), 2), -1, dtype=np.int64)
        for i, (c, loc) in enumerate(self.coords.items()):
            if loc is not MISSING:
                out[i] = loc
        return out

    @classmethod
    def from_array(cls, arr, scores=None):
        coords = {}
        for i, (h, w) in enumerate(np.asarray(arr, dtype=np.int64)):
            coords[i + 1] = MISSING if h < 0 or w < 0 else (int(h), int(w))
        return cls(coords, scores)

    def to_json(self):
        parts = []
        for c, loc in self.coords.items():
            if loc is MISSING:
                parts.append({"id": c, "missing": True})
            else:
                parts.append({"id": c, "h": loc[0], "w": loc[1]})
        return json.dumps({"parts": parts}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        coords = {}
        for p in json.loads(text)["parts"]:
            coords[int(p["id"])] = MISSING if p.get("missing") else (int(p["h"]), int(p["w"]))
        return cls(coords)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FCNConfig:
    geometry: NetworkGeometry
    num_parts: int
    hidden: int = 64  # conv6 width; 0 drops the hidden 1×1 layer
    in_channels: int = 3

    def to_dict(self):
        return {
            "geometry": self.geometry.to_dict(),
            "num_parts": self.num_parts,
            "hidden": self.hidden,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(NetworkGeometry.from_dict(d["geometry"]), int(d["num_parts"]), int(d["hidden"]), int(d.get("in_channels", 3)))


class FCN(Module):
    """Conv trunk, optional hidden 1×1 conv (conv6), and the (M+1)-way 1×1 classifier (conv7)."""

    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        self.trunk = ConvStack(config.geometry, config.in_channels, rng)
        self.params.update(self.trunk.params)
        width = self.trunk.out_channels
        self.conv6 = None
        if config.hidden:
            self.conv6 = (
                self.add_param("conv6.weight", he_normal(rng, (config.hidden, width, 1, 1), width)),
                self.add_param("conv6.bias", np.zeros(config.hidden, np.float32)),
            )
            width = config.hidden
        k = config.num_parts + 1
        self.conv7 = (
            self.add_param("conv7.weight", he_normal(rng, (k, width, 1, 1), width) * 0.5),
            self.add_param("conv7.bias", np.zeros(k, np.float32)),
        )

    @property
    def geometry(self):
        return self.config.geometry

    @property
    def grid_side(self):
        return self.config.geometry.output_side

    def forward(self, images):
        x = self.trunk.forward(_tensor(images))
        if self.conv6 is not None:
            x = relu(conv2d(x, *self.conv6))
        return conv2d(x, *self.conv7)

    def heatmaps(self, images):
        """Per-position channel softmax, [N, M+1, H, W]."""
        logits = self.forward(np.asarray(images, dtype=self.params["conv7.weight"].dtype)).data
        return spatial_softmax(logits)


def build_fcn(config, seed=0):
    if not isinstance(config, FCNConfig):
        raise ConfigurationError("build_fcn expects an FCNConfig")
    if config.num_parts < 1:
        raise ConfigurationError(f"num_parts must be ≥ 1, got {config.num_parts}")
    if config.hidden < 0:
        raise ConfigurationError(f"hidden width must be ≥ 0, got {config.hidden}")
    if config.geometry.channels is None:
        raise ConfigurationError("geometry carries no channel widths")
    return FCN(config, seed)


# ---------------------------------------------------------------------------
# labels and loss
# ---------------------------------------------------------------------------


def overlap_fraction(dx, dy, side):
    """Overlap of two axis-aligned squares of ``side`` whose centers differ by (dx, dy)."""
    return max(0.0, 1 - abs(dx) / side) * max(0.0, 1 - abs(dy) / side)


def build_label_map(keypoints, geom, num_parts, overlap_threshold=0.5):
    """Dense part labels on the output grid of ``geom``.

    Args:
        keypoints: iterable of (part_id, x, y, visible) in input pixels.
        geom: network geometry; its last layer defines the grid.
        num_parts: M; part ids must lie in 1..M.
        overlap_threshold: minimum overlap between the unit's receptive
            field and the equally sized square centred on the keypoint.

    Returns:
        int array [H, W]; 0 is background.
    """
    if not 0 < overlap_threshold <= 1:
        raise ValueError(f"overlap_threshold must lie in (0, 1], got {overlap_threshold}")
    rf, stride, offset = receptive_field(geom)
    side = geom.output_side
    pts = []
    for part, x, y, vis in keypoints:
        if not 1 <= int(part) <= num_parts:
            raise AnnotationError(f"part id {part} outside 1..{num_parts}")
        if vis:
            pts.append((int(part), float(x), float(y)))
    labels = np.zeros((side, side), dtype=np.int64)
    if not pts:
        return labels
    pts.sort()
    ids = np.array([p[0] for p in pts])
    xs = np.array([p[1] for p in pts])
    ys = np.array([p[2] for p in pts])
    centers = offset + stride * np.arange(side)
    # dy[h, k], dx[w, k]
    dy = centers[:, None] - ys[None, :]
    dx = centers[:, None] - xs[None, :]
    d2 = dy[:, None, :] ** 2 + dx[None, :, :] ** 2
    nearest = d2.argmin(axis=2)  # first minimum = smallest part id on ties
    rows = np.arange(side)
    ndy = dy[rows[:, None], nearest]
    ndx = dx[rows[None, :], nearest]
    ov = np.clip(1 - np.abs(ndx) / rf, 0, None) * np.clip(1 - np.abs(ndy) / rf, 0, None)
    labels[ov >= overlap_threshold] = ids[nearest][ov >= overlap_threshold]
    return labels


def spatial_softmax(logits):
    """Softmax over the channel axis of [C, H, W] or [N, C, H, W] scores."""
    logits = np.asarray(logits)
    axis = logits.ndim - 3
    return np.exp(log_softmax(logits, axis=axis))


def spatial_softmax_loss(logits, labels):
    """Sum over grid positions (and batch) of −log softmax(logits)[label].

    Args:
        logits: Tensor[M+1, H, W] or Tensor[N, M+1, H, W].
        labels: int array [H, W] or [N, H, W] with values in 0..M.
    """
    logits = _tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    batched = logits.ndim == 4
    z = logits.data if batched else logits.data[None]
    lab = labels if batched else labels[None]
    if lab.shape != (z.shape[0],) + z.shape[2:]:
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = z.shape[1]
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= k:
        raise AnnotationError(f"label values must lie in 0..{k - 1}")
    logp = log_softmax(z, axis=1)
    picked = np.take_along_axis(logp, lab[:, None], axis=1)
    out = np.asarray(-picked.sum(), dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        np.put_along_axis(d, lab[:, None], np.take_along_axis(d, lab[:, None], axis=1) - 1, axis=1)
        d = (d * g).astype(logits.dtype)
        return [(logits, d if batched else d[0])]

    return _result(out, (logits,), backward, "spatial_softmax_loss")


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def gaussian_kernel(sigma, radius):
    """Normalized truncated 1-D Gaussian of length 2·radius + 1."""
    if sigma <= 0 or radius < 0:
        raise ValueError(f"need sigma > 0 and radius ≥ 0, got {sigma}, {radius}")
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def smooth(heat, sigma=1.0, radius=2):
    """Per-channel Gaussian smoothing with zero padding; output has the input size.

    Works on [C, H, W] or [N, C, H, W] arrays. The 2-D kernel is the outer
    product of the 1-D kernel with itself, so it also sums to one.
    """
    heat = np.asarray(heat, dtype=np.float64)
    if radius == 0:
        gaussian_kernel(sigma, radius)
        return heat.copy()
    k = gaussian_kernel(sigma, radius)
    out = convolve1d(heat, k, axis=-1, mode="constant", cval=0.0)
    return convolve1d(out, k, axis=-2, mode="constant", cval=0.0)


def infer_parts(heat, sigma=1.0, radius=2, mu=0.3):
    """Part locations from one softmax-normalized [M+1, H, W] stack.

    For each part channel c ≥ 1 the smoothed map is scanned for its maximum
    (row-major first on ties); the part is MISSING when that maximum is
    below ``mu``. Background does not compete.
    """
    heat = np.asarray(heat)
    if heat.ndim != 3:
        raise DimensionError(f"infer_parts expects [M+1, H, W], got {heat.shape}")
    g = smooth(heat, sigma, radius)
    coords, scores, argmax = {}, {}, {}
    w = g.shape[2]
    for c in range(1, g.shape[0]):
        flat = int(np.argmax(g[c]))
        peak = float(g[c].reshape(-1)[flat])
        scores[c] = peak
        argmax[c] = (flat // w, flat % w)
        coords[c] = MISSING if peak < mu else argmax[c]
    return PartLocations(coords, scores, argmax)


def localize(model, images, sigma=1.0, radius=2, mu=0.3, batch_size=64):
    """Run the FCN and ``infer_parts`` over a batch of images."""
    images = np.asarray(images)
    out = []
    for start in range(0, len(images), batch_size):
        heat = model.heatmaps(images[start : start + batch_size])
        out.extend(infer_parts(h, sigma, radius, mu) for h in heat)
    return out
