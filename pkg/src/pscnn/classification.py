"""Two-stream part-stacked classifier.

The part stream runs one shared conv pass over the full-resolution image,
projects the features with a 1×1 conv (conv5_1) and cuts a fixed window
around each detected part. The object stream sees the image at half
resolution. fc6 sums one linear block per present part plus the object
block, i.e. fc6 = relu(Σ_c X^c·W^c + X^o·W^o + b), followed by fc7 and fc8.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .geometry import NetworkGeometry
from .layers import ConvStack, Module, he_normal
from .localization import MISSING, PartLocations
from .tensor import Tensor, _result, _tensor, adaptive_avgpool2d, affine, avgpool2d, conv2d, relu, reshape


@dataclass(frozen=True)
class PartCropSpec:
    crop_side: int
    grid_side: int

    def __post_init__(self):
        if not 1 <= self.crop_side <= self.grid_side:
            raise ConfigurationError(
                f"crop side {self.crop_side} must lie in 1..grid side {self.grid_side}"
            )


def crop_origin(h, w, spec):
    """Top-left corner of the window centred at (h, w), clamped inside the grid.

    For even crop sides the centre sits just below/right of the middle.
    """
    hi = spec.grid_side - spec.crop_side
    half = spec.crop_side // 2
    return min(max(h - half, 0), hi), min(max(w - half, 0), hi)


def _check_grid(features, spec):
    if features.shape[-1] != spec.grid_side or features.shape[-2] != spec.grid_side:
        raise DimensionError(f"features {features.shape} do not match grid side {spec.grid_side}")


def part_crop(features, locations, spec):
    """Windows of a [D, H, W] feature map around each present part.

    Returns a dict part → [D, crop, crop]; MISSING parts get no entry.
    """
    features = np.asarray(features)
    _check_grid(features, spec)
    k = spec.crop_side
    out = {}
    for part, loc in locations:
        if loc is MISSING:
            continue
        r, c = crop_origin(loc[0], loc[1], spec)
        out[part] = features[:, r : r + k, c : c + k].copy()
    return out


def part_crop_backward(grad_crops, locations, spec, depth):
    """Scatter crop gradients back onto a zero [D, H, W] grid, adding overlaps."""
    present = [p for p, loc in locations if loc is not MISSING]
    if sorted(grad_crops) != sorted(present):
        raise RuntimeError(f"gradients for parts {sorted(grad_crops)} but forward cropped {present}")
    k = spec.crop_side
    grad = np.zeros((depth, spec.grid_side, spec.grid_side), dtype=np.result_type(*[np.float32] + [g.dtype for g in grad_crops.values()]))
    for part in present:
        g = np.asarray(grad_crops[part])
        if g.shape != (depth, k, k):
            raise DimensionError(f"gradient for part {part} has shape {g.shape}, expected {(depth, k, k)}")
        r, c = crop_origin(*locations[part], spec)
        grad[:, r : r + k, c : c + k] += g
    return grad


def locations_array(locations, num_parts):
    """Stack PartLocations (or [M, 2] arrays) into an int array [N, M, 2], -1 for missing."""
    out = np.full((len(locations), num_parts, 2), -1, dtype=np.int64)
    for i, loc in enumerate(locations):
        if isinstance(loc, PartLocations):
            for part, hw in loc:
                if hw is not MISSING and part <= num_parts:
                    out[i, part - 1] = hw
        else:
            out[i] = np.asarray(loc, dtype=np.int64)
    return out


def crop_parts(features, locs, spec, parts):
    """Differentiable batched part crop.

    Args:
        features: Tensor[N, D, H, W].
        locs: int array [N, M, 2] of (h, w), negative for missing.
        spec: PartCropSpec.
        parts: 1-based part ids to crop, in output order.

    Returns:
        (Tensor[N, P, D, k, k], mask[N, P]); missing parts yield zeros and
        receive no gradient.
    """
    features = _tensor(features)
    _check_grid(features.data, spec)
    n, d = features.shape[:2]
    k = spec.crop_side
    out = np.zeros((n, len(parts), d, k, k), dtype=features.dtype)
    mask = np.zeros((n, len(parts)), dtype=bool)
    origins = np.zeros((n, len(parts), 2), dtype=np.int64)
    for j, part in enumerate(parts):
        for i in range(n):
            h, w = locs[i, part - 1]
            if h < 0 or w < 0:
                continue
            r, c = crop_origin(int(h), int(w), spec)
            origins[i, j] = (r, c)
            mask[i, j] = True
            out[i, j] = features.data[i, :, r : r + k, c : c + k]

    def backward(g):
        dx = np.zeros_like(features.data)
        for j in range(len(parts)):
            for i in np.flatnonzero(mask[:, j]):
                r, c = origins[i, j]
                dx[i, :, r : r + k, c : c + k] += g[i, j]
        return [(features, dx)]

    return _result(out, (features,), backward, "part_crop"), mask


def part_concat(part_feats, mask, part_weights, obj_feats, obj_weight, bias):
    """fc6 pre-activation: Σ_c mask_c·X^c·W^c + X^o·W^o + b.

    Args:
        part_feats: Tensor[N, P, F] flattened part crops (may be None when P = 0).
        mask: bool [N, P]; False rows contribute nothing.
        part_weights: list of P Tensors [F, E].
        obj_feats: Tensor[N, Fo] or None to drop the object term;
            obj_weight: Tensor[Fo, E]; bias: Tensor[E].
    """
    use_obj = obj_feats is not None
    bias = _tensor(bias)
    n_parts = len(part_weights)
    if use_obj:
        obj_feats, obj_weight = _tensor(obj_feats), _tensor(obj_weight)
        if obj_feats.shape[1] != obj_weight.shape[0]:
            raise DimensionError(f"object features {obj_feats.shape} do not match block {obj_weight.shape}")
        out = obj_feats.data @ obj_weight.data
    elif n_parts:
        out = np.zeros((len(mask), bias.shape[0]), dtype=np.result_type(bias.data, _tensor(part_feats).data))
    else:
        raise DimensionError("fc6 needs the object stream or at least one part")
    used = []
    if n_parts:
        part_feats = _tensor(part_feats)
        if part_feats.shape[1] != n_parts:
            raise DimensionError(f"{part_feats.shape[1]} part features for {n_parts} weight blocks")
        for j, w in enumerate(part_weights):
            w = _tensor(w)
            if part_feats.shape[2] != w.shape[0] or w.shape[1] != out.shape[1]:
                raise DimensionError(f"part block {j} has shape {w.shape}, features {part_feats.shape}")
            rows = np.flatnonzero(mask[:, j])
            if rows.size == 0:
                continue
            used.append((j, rows))
            term = np.zeros_like(out)
            term[rows] = part_feats.data[rows, j] @ w.data
            out = out + term
    out = out + bias.data

    def backward(g):
        grads = [(bias, g.sum(axis=0))]
        if use_obj:
            grads += [(obj_feats, g @ obj_weight.data.T), (obj_weight, obj_feats.data.T @ g)]
        if n_parts:
            dpart = np.zeros_like(part_feats.data)
            dws = [np.zeros_like(_tensor(w).data) for w in part_weights]
            for j, rows in used:
                w = part_weights[j].data
                dpart[rows, j] = g[rows] @ w.T
                dws[j] = part_feats.data[rows, j].T @ g[rows]
            grads.append((part_feats, dpart))
            grads.extend(zip(part_weights, dws))
        return grads

    parents = [bias] + ([obj_feats, obj_weight] if use_obj else [])
    if n_parts:
        parents = parents + [part_feats] + list(part_weights)
    return _result(out, parents, backward, "part_concat")


@dataclass(frozen=True)
class ClassifierConfig:
    geometry: NetworkGeometry  # part-stream trunk; must match the localizer's grid
    num_parts: int
    num_classes: int
    reduce_dim: int = 8
    crop_side: int = 3
    fc6: int = 128
    fc7: int = 64
    in_channels: int = 3
    input_mean: float = 0.5  # subtracted from pixels before both streams

    @property
    def object_geometry(self):
        return self.geometry.with_input(self.geometry.input_side // 2)

    @property
    def crop_spec(self):
        return PartCropSpec(self.crop_side, self.geometry.output_side)

    def to_dict(self):
        return {
            "geometry": self.geometry.to_dict(),
            "num_parts": self.num_parts,
            "num_classes": self.num_classes,
            "reduce_dim": self.reduce_dim,
            "crop_side": self.crop_side,
            "fc6": self.fc6,
            "fc7": self.fc7,
            "in_channels": self.in_channels,
            "input_mean": self.input_mean,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["geometry"] = NetworkGeometry.from_dict(d["geometry"])
        return cls(**d)


class PartStackedClassifier(Module):
    """Part stream + object stream + fc6/fc7/fc8 head.

    Every part owns an fc6 block; only blocks listed in ``active_parts`` take
    part in the forward pass. ``use_object=False`` drops the object stream.
    """

    def __init__(self, config, active_parts=(), seed=0, use_object=True):
        super().__init__()
        self.config = config
        self.use_object = bool(use_object)
        spec = config.crop_spec  # validates crop vs grid
        try:
            obj_geom = config.object_geometry
        except ConfigurationError as exc:
            raise ConfigurationError(f"object stream geometry is invalid: {exc}") from None
        self.crop_spec = spec
        self.active_parts = self._check_parts(active_parts)
        if not self.use_object and not self.active_parts:
            raise ConfigurationError("a model without the object stream needs at least one part")
        rng = np.random.default_rng(seed)
        self.part_stream = ConvStack(config.geometry, config.in_channels, rng, prefix="part.")
        self.object_stream = ConvStack(obj_geom, config.in_channels, rng, prefix="object.")
        self.params.update(self.part_stream.params)
        width = self.part_stream.out_channels
        self.reduce = (
            self.add_param("conv5_1.weight", he_normal(rng, (config.reduce_dim, width, 1, 1), width)),
            self.add_param("conv5_1.bias", np.zeros(config.reduce_dim, np.float32)),
        )
        self.params.update(self.object_stream.params)
        k2 = config.crop_side**2
        self.part_feat_dim = config.reduce_dim * k2
        self.object_feat_dim = self.object_stream.out_channels * k2
        fan_in = self.object_feat_dim + self.part_feat_dim * max(1, len(self.active_parts))
        self.part_blocks = {}
        for c in range(1, config.num_parts + 1):
            self.part_blocks[c] = self.add_param(
                f"fc6.part{c}.weight", he_normal(rng, (self.part_feat_dim, config.fc6), fan_in)
            )
        self.object_block = self.add_param("fc6.object.weight", he_normal(rng, (self.object_feat_dim, config.fc6), fan_in))
        self.fc6_bias = self.add_param("fc6.bias", np.zeros(config.fc6, np.float32))
        self.fc7 = (
            self.add_param("fc7.weight", he_normal(rng, (config.fc6, config.fc7), config.fc6)),
            self.add_param("fc7.bias", np.zeros(config.fc7, np.float32)),
        )
        self.fc8 = (
            self.add_param("fc8.weight", he_normal(rng, (config.fc7, config.num_classes), config.fc7) * 0.5),
            self.add_param("fc8.bias", np.zeros(config.num_classes, np.float32)),
        )

    def _check_parts(self, parts):
        parts = tuple(int(p) for p in parts)
        if any(not 1 <= p <= self.config.num_parts for p in parts) or len(set(parts)) != len(parts):
            raise ConfigurationError(f"active parts {parts} must be distinct ids in 1..{self.config.num_parts}")
        return parts

    def set_active_parts(self, parts):
        parts = self._check_parts(parts)
        if not self.use_object and not parts:
            raise ConfigurationError("a model without the object stream needs at least one part")
        self.active_parts = parts

    def trainable_params(self):
        """Parameters that receive gradients under the current part set."""
        names = {k for k in self.params if k.startswith(("fc6.bias", "fc7.", "fc8."))}
        if self.use_object:
            names |= {k for k in self.params if k.startswith(("object.", "fc6.object"))}
        if self.active_parts:
            names |= {k for k in self.params if k.startswith(("part.", "conv5_1."))}
            names |= {f"fc6.part{c}.weight" for c in self.active_parts}
        return {k: v for k, v in self.params.items() if k in names}

    def _dtype(self):
        return self.fc6_bias.dtype

    def _input(self, images):
        dt = self._dtype()
        return _tensor(np.asarray(images, dtype=dt) - dt.type(self.config.input_mean))

    # -- streams ----------------------------------------------------------

    def part_features(self, images):
        """Shared part-stream pass followed by conv5_1: [N, D_r, H, W]."""
        x = self.part_stream.forward(self._input(images))
        return conv2d(x, *self.reduce)

    def object_features(self, images):
        x = avgpool2d(self._input(images), 2)
        x = self.object_stream.forward(x)
        return adaptive_avgpool2d(x, self.config.crop_side)

    def head(self, part_crops, mask, obj, parts, n):
        obj_flat = reshape(obj, (n, -1)) if obj is not None else None
        if parts:
            flat = reshape(part_crops, (n, len(parts), -1))
            weights = [self.part_blocks[c] for c in parts]
        else:
            flat, weights, mask = None, [], np.zeros((n, 0), bool)
        h = relu(part_concat(flat, mask, weights, obj_flat, self.object_block, self.fc6_bias))
        h = relu(affine(h, *self.fc7))
        return affine(h, *self.fc8)

    def forward(self, images, locations, parts=None):
        """Class scores [N, num_classes].

        Args:
            images: [N, C, S, S] array.
            locations: list of PartLocations or an int array [N, M, 2].
            parts: override of the active part set.
        """
        images = np.asarray(images)
        parts = self.active_parts if parts is None else self._check_parts(parts)
        if not parts and not self.use_object:
            raise ConfigurationError("a model without the object stream needs at least one part")
        n = len(images)
        obj = self.object_features(images) if self.use_object else None
        if not parts:
            return self.head(None, None, obj, (), n)
        locs = locations if isinstance(locations, np.ndarray) else locations_array(locations, self.config.num_parts)
        feats = self.part_features(images)
        crops, mask = crop_parts(feats, locs, self.crop_spec, parts)
        return self.head(crops, mask, obj, parts, n)

    def scores(self, images, locations, parts=None, batch_size=64):
        images = np.asarray(images)
        locs = locations if isinstance(locations, np.ndarray) else locations_array(locations, self.config.num_parts)
        out = [
            self.forward(images[s : s + batch_size], locs[s : s + batch_size], parts).data
            for s in range(0, len(images), batch_size)
        ]
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes), self._dtype())

    def predict(self, images, locations, parts=None):
        return self.scores(images, locations, parts).argmax(axis=1)


def build_classifier(config, active_parts=(), seed=0, use_object=True):
    return PartStackedClassifier(config, active_parts, seed, use_object)


def forward_full(image, locations, model):
    """Class scores for a single [C, S, S] image with its part locations."""
    return model.forward(np.asarray(image)[None], [locations]).data[0]


def init_dim_reduce_pca(model, images):
    """Initialise conv5_1 with the leading principal directions of the part-stream features."""
    feats = model.part_stream.forward(model._input(images)).data
    x = feats.transpose(0, 2, 3, 1).reshape(-1, feats.shape[1]).astype(np.float64)
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    k = model.config.reduce_dim
    comps = vt[:k]
    if comps.shape[0] < k:
        comps = np.vstack([comps, np.zeros((k - comps.shape[0], x.shape[1]))])
    w, b = model.reduce
    w.data = comps.reshape(w.shape).astype(w.dtype)
    b.data = (-(comps @ mean)).astype(b.dtype)


def init_from_localizer(model, fcn, streams=("part",)):
    """Copy the localizer's trunk into the given streams as a starting point.

    The first conv bias absorbs the classifier's input mean, so on the same
    image the copied part stream reproduces the localizer's trunk activations.
    """
    trunk = fcn.trunk.params
    if model.config.geometry.layers != fcn.geometry.layers or model.config.geometry.channels != fcn.geometry.channels:
        raise ConfigurationError("localizer trunk and classifier streams have different layer stacks")
    first = fcn.geometry.layer_names()[0]
    for stream in streams:
        if stream not in ("part", "object"):
            raise ConfigurationError(f"unknown stream {stream!r}")
        for name, t in trunk.items():
            dst = model.params[f"{stream}.{name}"]
            dst.data = t.data.astype(dst.dtype, copy=True)
        w = model.params[f"{stream}.{first}.weight"]
        b = model.params[f"{stream}.{first}.bias"]
        b.data = b.data + (model.config.input_mean * w.data.sum(axis=(1, 2, 3))).astype(b.dtype)
