"""Procedural "creatures" whose classes differ only in local part texture.

Every creature is an ellipse body carrying M part patches. A patch is tinted
with a fixed per-part colour (so parts can be located without knowing the
class) and modulated by a class-specific period-2 texture. Any period-2
texture averages to the same grey under 2×2 average pooling, so a
half-resolution view of the whole object cannot tell classes apart once
body colour is shared, while full-resolution part crops can.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, SplitError
from .io import load_tensor, save_tensor, write_ppm

TEXTURES = ("hstripes", "vstripes", "checker", "flat")

PART_COLORS = (
    (0.95, 0.15, 0.15),
    (0.15, 0.90, 0.20),
    (0.20, 0.35, 1.00),
    (0.95, 0.90, 0.10),
    (0.90, 0.20, 0.90),
    (0.10, 0.90, 0.90),
    (1.00, 0.55, 0.05),
    (0.55, 0.25, 0.95),
    (0.60, 1.00, 0.55),
    (1.00, 0.60, 0.70),
    (0.40, 0.70, 1.00),
    (0.75, 0.75, 0.20),
    (1.00, 1.00, 1.00),
    (0.55, 0.95, 0.80),
    (0.95, 0.75, 0.45),
)


def texture(motif, side):
    i, j = np.mgrid[0:side, 0:side]
    if motif == 0:
        return ((i + 1) % 2).astype(np.float32)
    if motif == 1:
        return ((j + 1) % 2).astype(np.float32)
    if motif == 2:
        return ((i + j + 1) % 2).astype(np.float32)
    if motif == 3:
        return np.full((side, side), 0.5, np.float32)
    raise ConfigurationError(f"unknown motif id {motif}")


@dataclass(frozen=True)
class CreatureSpec:
    num_classes: int
    num_parts: int
    motifs: tuple  # [class][part] -> texture id
    body_colors: tuple  # [class] -> rgb
    image_side: int = 64
    body_axes: tuple = (21.0, 16.0)
    rotation: float = 15.0  # degrees, uniform in ±rotation
    scale: tuple = (0.92, 1.05)
    jitter: float = 3.0  # body centre, pixels
    anchor_jitter: float = 1.0
    occlusion: float = 0.1
    noise: float = 0.03
    patch_radius: int = 3
    background: tuple = (0.08, 0.08, 0.08)

    def __post_init__(self):
        object.__setattr__(self, "motifs", tuple(tuple(int(m) for m in row) for row in self.motifs))
        object.__setattr__(self, "body_colors", tuple(tuple(float(v) for v in c) for c in self.body_colors))
        object.__setattr__(self, "body_axes", tuple(self.body_axes))
        object.__setattr__(self, "scale", tuple(self.scale))
        object.__setattr__(self, "background", tuple(self.background))
        self.validate()

    def validate(self):
        if self.num_classes < 1 or self.num_parts < 1:
            raise ConfigurationError("need at least one class and one part")
        if self.num_parts > len(PART_COLORS):
            raise ConfigurationError(f"at most {len(PART_COLORS)} parts are supported")
        if len(self.motifs) != self.num_classes or any(len(r) != self.num_parts for r in self.motifs):
            raise ConfigurationError("motifs must be a num_classes × num_parts table")
        if any(not 0 <= m < len(TEXTURES) for r in self.motifs for m in r):
            raise ConfigurationError(f"motif ids must lie in 0..{len(TEXTURES) - 1}")
        if len(self.body_colors) != self.num_classes:
            raise ConfigurationError("one body colour per class is required")
        if not 0 <= self.occlusion < 1:
            raise ConfigurationError(f"occlusion must lie in [0, 1), got {self.occlusion}")
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                if self.motifs[a] == self.motifs[b]:
                    raise ConfigurationError(f"classes {a} and {b} have identical part motifs")

    def to_dict(self):
        d = asdict(self)
        d["motifs"] = [list(r) for r in self.motifs]
        d["body_colors"] = [list(c) for c in self.body_colors]
        for k in ("body_axes", "scale", "background"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown creature spec keys: {sorted(unknown)}")
        return cls(**d)


BODY_COLORS = (
    (0.55, 0.42, 0.30),
    (0.30, 0.42, 0.55),
    (0.42, 0.52, 0.30),
    (0.52, 0.32, 0.48),
)

# per colour group: base texture row and the parts flipped for the second class
_GROUP_BASE = ((0, 1, 2, 3, 0), (1, 2, 3, 0, 1), (2, 3, 0, 1, 2), (3, 0, 1, 2, 3))
_GROUP_FLIPS = ((1, 2), (1, 3), (2, 4), (4, 5))


def default_spec(**overrides):
    """8 classes in 4 body-colour pairs, M = 5 parts, 64×64 images.

    The two classes of a pair differ only in the textures of two parts, so a
    bbox-level view resolves at most the colour pair.
    """
    motifs, colors = [], []
    for g, (base, flips) in enumerate(zip(_GROUP_BASE, _GROUP_FLIPS)):
        for second in (False, True):
            row = list(base)
            if second:
                for p in flips:
                    row[p - 1] = (row[p - 1] + 2) % 4
            motifs.append(tuple(row))
            colors.append(BODY_COLORS[g])
    kw = dict(num_classes=8, num_parts=5, motifs=tuple(motifs), body_colors=tuple(colors))
    kw.update(overrides)
    return CreatureSpec(**kw)


def single_part_spec(num_classes=4, num_parts=5, part=1, **overrides):
    """Classes identical except for the texture of ``part``; one body colour."""
    if num_classes > len(TEXTURES):
        raise ConfigurationError(f"at most {len(TEXTURES)} classes can differ at a single part")
    motifs = []
    for k in range(num_classes):
        row = [3] * num_parts
        row[part - 1] = k
        motifs.append(tuple(row))
    kw = dict(
        num_classes=num_classes,
        num_parts=num_parts,
        motifs=tuple(motifs),
        body_colors=(BODY_COLORS[0],) * num_classes,
    )
    kw.update(overrides)
    return CreatureSpec(**kw)


@dataclass
class Dataset:
    """Images [N, 3, S, S], labels [N], keypoints [N, M, 3] (x, y, visible), bboxes [N, 4] (x, y, w, h)."""

    images: np.ndarray
    labels: np.ndarray
    keypoints: np.ndarray
    bboxes: np.ndarray
    ids: list
    spec: CreatureSpec = field(repr=False)

    def __len__(self):
        return len(self.labels)

    @property
    def num_parts(self):
        return self.keypoints.shape[1]

    @property
    def num_classes(self):
        return self.spec.num_classes

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx],
            self.labels[idx],
            self.keypoints[idx],
            self.bboxes[idx],
            [self.ids[i] for i in idx],
            self.spec,
        )

    def keypoint_list(self, i):
        """[(part_id, x, y, visible)] for sample ``i``."""
        return [(p + 1, float(x), float(y), bool(v)) for p, (x, y, v) in enumerate(self.keypoints[i])]

    def save(self, directory):
        directory = Path(directory)
        (directory / "images").mkdir(parents=True, exist_ok=True)
        (directory / "spec.json").write_text(json.dumps(self.spec.to_dict(), indent=2, sort_keys=True) + "\n")
        lines = []
        for i, sid in enumerate(self.ids):
            fname = f"images/{sid}.psten"
            save_tensor(directory / fname, self.images[i])
            rec = {
                "id": sid,
                "file": fname,
                "bbox": [float(v) for v in self.bboxes[i]],
                "keypoints": [[float(x), float(y), int(v)] for x, y, v in self.keypoints[i]],
                "label": int(self.labels[i]),
            }
            lines.append(json.dumps(rec, sort_keys=True))
        (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        spec = CreatureSpec.from_dict(json.loads((directory / "spec.json").read_text()))
        recs = [json.loads(l) for l in (directory / "manifest.jsonl").read_text().splitlines() if l.strip()]
        images = np.stack([load_tensor(directory / r["file"]) for r in recs]) if recs else np.zeros((0, 3, spec.image_side, spec.image_side), np.float32)
        return cls(
            images.astype(np.float32),
            np.array([r["label"] for r in recs], dtype=np.int64),
            np.array([r["keypoints"] for r in recs], dtype=np.float64).reshape(len(recs), spec.num_parts, 3),
            np.array([r["bbox"] for r in recs], dtype=np.float64).reshape(len(recs), 4),
            [r["id"] for r in recs],
            spec,
        )

    def dump_ppm(self, directory, limit=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, sid in enumerate(self.ids[:limit]):
            write_ppm(directory / f"{sid}.ppm", self.images[i])


def _render(spec, label, rng):
    s = spec.image_side
    r = spec.patch_radius
    img = np.empty((3, s, s), np.float32)
    img[:] = np.asarray(spec.background, np.float32)[:, None, None]

    scale = rng.uniform(*spec.scale)
    theta = np.deg2rad(rng.uniform(-spec.rotation, spec.rotation))
    cx = s / 2 - 0.5 + rng.uniform(-spec.jitter, spec.jitter)
    cy = s / 2 - 0.5 + rng.uniform(-spec.jitter, spec.jitter)
    ax, ay = spec.body_axes[0] * scale, spec.body_axes[1] * scale
    cos, sin = np.cos(theta), np.sin(theta)

    yy, xx = np.mgrid[0:s, 0:s]
    u = (xx - cx) * cos + (yy - cy) * sin
    v = -(xx - cx) * sin + (yy - cy) * cos
    body = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    img[:, body] = np.asarray(spec.body_colors[label], np.float32)[:, None]
    occupied = body.copy()

    m = spec.num_parts
    kps = np.zeros((m, 3))
    lo, hi = r + 1, s - r - 2
    for p in range(m):
        phi = -np.pi / 2 + 2 * np.pi * p / m
        bu, bv = 0.8 * ax * np.cos(phi), 0.8 * ay * np.sin(phi)
        px = cx + bu * cos - bv * sin + rng.uniform(-spec.anchor_jitter, spec.anchor_jitter)
        py = cy + bu * sin + bv * cos + rng.uniform(-spec.anchor_jitter, spec.anchor_jitter)
        x, y = int(np.clip(np.rint(px), lo, hi)), int(np.clip(np.rint(py), lo, hi))
        visible = rng.random() >= spec.occlusion
        kps[p] = (x, y, 1.0 if visible else 0.0)
        if visible:
            tex = texture(spec.motifs[label][p], 2 * r + 1)
            color = np.asarray(PART_COLORS[p], np.float32)
            img[:, y - r : y + r + 1, x - r : x + r + 1] = color[:, None, None] * (0.35 + 0.65 * tex)
            occupied[y - r : y + r + 1, x - r : x + r + 1] = True

    if spec.noise:
        img += rng.normal(0.0, spec.noise, img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)

    rows, cols = np.nonzero(occupied)
    bbox = (cols.min(), rows.min(), cols.max() - cols.min() + 1, rows.max() - rows.min() + 1)
    return img, kps, np.asarray(bbox, dtype=np.float64)


def generate(spec, n, seed=0):
    """Deterministic balanced dataset of ``n`` samples; sample i has class i mod C.

    Each sample draws from its own generator seeded by (seed, i), so the
    output never depends on generation order.
    """
    spec.validate()
    if n < spec.num_classes:
        raise ConfigurationError(f"need n ≥ num_classes ({spec.num_classes}), got {n}")
    s, m = spec.image_side, spec.num_parts
    images = np.empty((n, 3, s, s), np.float32)
    kps = np.empty((n, m, 3))
    bboxes = np.empty((n, 4))
    labels = np.arange(n, dtype=np.int64) % spec.num_classes
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        images[i], kps[i], bboxes[i] = _render(spec, int(labels[i]), rng)
    ids = [f"s{i:05d}" for i in range(n)]
    return Dataset(images, labels, kps, bboxes, ids, spec)


def split(dataset, fractions=(0.5, 0.5), seed=0):
    """Stratified deterministic (train, test) split."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 2 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be two non-negative numbers summing to 1, got {fractions}")
    train, test = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < 2:
            raise SplitError(f"class {c} has {len(idx)} samples; at least 2 are needed")
        perm = idx[np.random.default_rng([seed, c]).permutation(len(idx))]
        n_train = int(np.floor(fractions[0] * len(idx) + 0.5))
        train.extend(perm[:n_train])
        test.extend(perm[n_train:])
    return dataset.subset(sorted(train)), dataset.subset(sorted(test))


def default_dataset(seed=7, per_class=60):
    """The default desk dataset: 40 train and 20 test samples per class."""
    spec = default_spec()
    data = generate(spec, spec.num_classes * per_class, seed)
    return split(data, (2 / 3, 1 / 3), seed)
