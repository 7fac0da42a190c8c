"""Nearest-neighbour retrieval, per-part gain tables and the visual manual.

A manual explains one prediction: the closest training exemplars of the
predicted class, then for each of the K classes most often confused with it
the R parts that best separate the two, each with a confidence value and the
T nearest part patches from both classes.
"""

import base64
import html
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .classification import crop_origin, locations_array
from .errors import CoverageError, DimensionError, PartUnavailableError
from .evaluation import confusion_matrix
from .geometry import receptive_field
from .io import load_tensor, save_tensor
from .localization import PartLocations
from .training import rank_parts, train_classifier

# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def _normalize(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    # NaN rows stay NaN so retrieval can skip them
    out = np.where(np.isnan(n), np.nan, 0.0) * np.ones_like(v)
    return np.divide(v, n, out=out, where=n > 0)


def _loc_row(locations, num_parts):
    if isinstance(locations, PartLocations):
        return locations_array([locations], num_parts)[0]
    return np.asarray(locations, dtype=np.int64).reshape(num_parts, 2)


def embed_batch(images, model, locations=None, part=None, batch_size=64):
    """L2-normalised conv5_1 embeddings, [N, F] float64.

    Without ``part`` the whole grid is flattened; with ``part`` only that
    part's crop window. Rows whose part is missing are all-NaN.
    """
    images = np.asarray(images)
    rows = []
    for s in range(0, len(images), batch_size):
        feats = model.part_features(images[s : s + batch_size]).data.astype(np.float64)
        if part is None:
            rows.append(feats.reshape(len(feats), -1))
            continue
        k, spec = model.crop_spec.crop_side, model.crop_spec
        out = np.full((len(feats), feats.shape[1] * k * k), np.nan)
        for i, f in enumerate(feats):
            h, w = locations[s + i, part - 1]
            if h < 0:
                continue
            r, c = crop_origin(int(h), int(w), spec)
            out[i] = f[:, r : r + k, c : c + k].ravel()
        rows.append(out)
    vecs = np.concatenate(rows) if rows else np.zeros((0, 0))
    return _normalize(vecs)


def embed(image, model, locations=None, part=None):
    """Embedding of a single [C, S, S] image; see ``embed_batch``.

    Raises:
        PartUnavailableError: ``part`` was not detected in this image.
    """
    locs = None
    if part is not None:
        if locations is None:
            raise PartUnavailableError(f"part {part} unavailable: no locations given")
        locs = _loc_row(locations, model.config.num_parts)[None]
        if locs[0, part - 1, 0] < 0:
            raise PartUnavailableError(f"part {part} unavailable: not detected")
    return embed_batch(np.asarray(image)[None], model, locs, part)[0]


def nearest_neighbors(query, vectors, k):
    """Indices and Euclidean distances of the ``k`` rows nearest to ``query``.

    Ties keep the lower row index. NaN rows (missing parts) are never returned.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if vectors.ndim != 2 or query.shape != vectors.shape[1:]:
        raise DimensionError(f"query {query.shape} does not match index {vectors.shape}")
    d = np.sqrt(((vectors - query) ** 2).sum(axis=1))
    valid = np.flatnonzero(~np.isnan(d))
    order = valid[np.argsort(d[valid], kind="stable")][:k]
    return order, d[order]


@dataclass
class EmbeddingIndex:
    vectors: np.ndarray  # [N, F], rows L2-normalised
    ids: list
    labels: np.ndarray

    def __post_init__(self):
        if len(self.vectors) != len(self.ids) or len(self.ids) != len(self.labels):
            raise DimensionError("index vectors, ids and labels must align")

    def query(self, vec, k, label=None):
        """[(id, distance)] of the nearest entries, optionally within one class."""
        rows = np.arange(len(self.ids)) if label is None else np.flatnonzero(self.labels == label)
        idx, dist = nearest_neighbors(vec, self.vectors[rows], k)
        return [(self.ids[rows[i]], float(d)) for i, d in zip(idx, dist)]

    def save(self, directory, name="embeddings"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_tensor(directory / f"{name}.psten", self.vectors)
        meta = {"ids": list(self.ids), "labels": [int(v) for v in self.labels]}
        (directory / f"{name}.ids.json").write_text(json.dumps(meta, indent=1) + "\n")

    @classmethod
    def load(cls, directory, name="embeddings"):
        directory = Path(directory)
        meta = json.loads((directory / f"{name}.ids.json").read_text())
        vecs = load_tensor(directory / f"{name}.psten").astype(np.float64)
        return cls(vecs.reshape(len(meta["ids"]), -1), meta["ids"], np.asarray(meta["labels"], np.int64))


def build_index(data, model, locations=None, part=None):
    return EmbeddingIndex(embed_batch(data.images, model, locations, part), list(data.ids), np.asarray(data.labels))


# ---------------------------------------------------------------------------
# gain and confidence tables
# ---------------------------------------------------------------------------


def class_recall(scores, labels, cls, pool=None):
    """Recall of ``cls`` with the argmax restricted to the classes in ``pool``."""
    labels = np.asarray(labels)
    rows = np.flatnonzero(labels == cls)
    if rows.size == 0:
        raise CoverageError(f"class {cls} has no test samples")
    pool = np.arange(scores.shape[1]) if pool is None else np.asarray(sorted(set(pool) | {cls}))
    pred = pool[np.asarray(scores)[rows][:, pool].argmax(axis=1)]
    return float(np.mean(pred == cls))


def most_confused(cm, cls, k):
    """The ``k`` classes most often mixed up with ``cls`` in either direction; ties by class id."""
    counts = cm[cls] + cm[:, cls]
    others = [c for c in range(len(cm)) if c != cls]
    return sorted(others, key=lambda c: (-counts[c], c))[:k]


def pairwise_accuracy(scores, labels, a, b):
    """Two-class accuracy on samples of ``a`` and ``b`` with the argmax restricted to them."""
    labels = np.asarray(labels)
    rows = np.flatnonzero((labels == a) | (labels == b))
    if rows.size == 0:
        raise CoverageError(f"classes {a} and {b} have no test samples")
    pair = np.array([a, b])
    pred = pair[np.asarray(scores)[rows][:, pair].argmax(axis=1)]
    return float(np.mean(pred == labels[rows]))


@dataclass
class PartGainTable:
    """gain[c, p - 1] = recall of class c with bbox + part p minus bbox only."""

    one_vs_all: np.ndarray
    one_vs_most: np.ndarray
    confused: list  # per class, its most-confused classes
    parts: tuple

    def ranked_parts(self, cls, variant="one_vs_most"):
        g = getattr(self, variant)[cls]
        return sorted(self.parts, key=lambda p: (-g[p - 1], p))

    def to_dict(self):
        return {
            "parts": list(self.parts),
            "one_vs_all": np.round(self.one_vs_all, 6).tolist(),
            "one_vs_most": np.round(self.one_vs_most, 6).tolist(),
            "confused": [list(map(int, c)) for c in self.confused],
        }


def part_gain(labels, bbox_scores, part_scores, num_classes, top_k=3):
    """PartGainTable from test-set scores.

    Args:
        labels: test labels.
        bbox_scores: [N, C] scores of the bbox-only model.
        part_scores: dict part → [N, C] scores of the bbox + that part model.
        top_k: size of the one-vs-most pool, taken from the bbox-only
            confusion matrix.
    """
    labels = np.asarray(labels)
    present = set(labels.tolist())
    for c in range(num_classes):
        if c not in present:
            raise CoverageError(f"class {c} has no test samples")
    cm = confusion_matrix(np.asarray(bbox_scores).argmax(axis=1), labels, num_classes)
    confused = [most_confused(cm, c, top_k) for c in range(num_classes)]
    parts = tuple(sorted(part_scores))
    # column p - 1 holds part p; parts without a model stay at zero
    width = max(parts, default=0)
    ova = np.zeros((num_classes, width))
    ovm = np.zeros((num_classes, width))
    for c in range(num_classes):
        base_all = class_recall(bbox_scores, labels, c)
        base_most = class_recall(bbox_scores, labels, c, confused[c])
        for p in parts:
            ova[c, p - 1] = class_recall(part_scores[p], labels, c) - base_all
            ovm[c, p - 1] = class_recall(part_scores[p], labels, c, confused[c]) - base_most
    return PartGainTable(ova, ovm, confused, parts)


def confidence_table(labels, part_only_scores, num_classes):
    """part → [C, C] pairwise accuracies of the part-only models (diagonal 1)."""
    out = {}
    for p, scores in sorted(part_only_scores.items()):
        t = np.ones((num_classes, num_classes))
        for a in range(num_classes):
            for b in range(a + 1, num_classes):
                t[a, b] = t[b, a] = pairwise_accuracy(scores, labels, a, b)
        out[p] = t
    return out


@dataclass
class InterpretationTables:
    gain: PartGainTable
    confidence: dict
    bbox_confusion: np.ndarray
    results: dict = field(default_factory=dict, repr=False)  # name → ClassifierResult


def build_tables(train, test, fcn, config, locations, model_config=None, bbox_result=None, top_k=3):
    """Train the models behind the gain and confidence tables.

    Each bbox + single-part model trains from scratch under ``config``; the
    part-only models come from ``rank_parts``.
    """
    if bbox_result is None:
        bbox_result = train_classifier(train, test, fcn, (), config, model_config, locations=locations, stage="bbox")
    with_part = {}
    for p in range(1, train.num_parts + 1):
        with_part[p] = train_classifier(
            train, test, fcn, (p,), config, model_config, locations=locations, stage=f"bbox_part{p}"
        )
    ranked, part_only = rank_parts(train, test, fcn, config, locations=locations, model_config=model_config)
    part_only = {p: r for (p, _), r in zip(ranked, part_only)}
    c = train.num_classes
    gain = part_gain(test.labels, bbox_result.test_scores, {p: r.test_scores for p, r in with_part.items()}, c, top_k)
    conf = confidence_table(test.labels, {p: r.test_scores for p, r in part_only.items()}, c)
    cm = confusion_matrix(bbox_result.test_pred, test.labels, c)
    results = {"bbox": bbox_result}
    results.update({f"bbox_part{p}": r for p, r in with_part.items()})
    results.update({f"part{p}": r for p, r in part_only.items()})
    return InterpretationTables(gain, conf, cm, results)


# ---------------------------------------------------------------------------
# manual
# ---------------------------------------------------------------------------


@dataclass
class ManualEntry:
    sample_id: str
    predicted: int
    exemplars: list  # [(id, distance)]
    comparisons: list  # [{"class", "parts": [{"part", "gain", "confidence", "patches"}]}]

    def __post_init__(self):
        for comp in self.comparisons:
            for p in comp["parts"]:
                if not 0 <= p["confidence"] <= 1:
                    raise ValueError(f"confidence {p['confidence']} outside [0, 1]")

    def to_dict(self):
        return {
            "sample": self.sample_id,
            "predicted": self.predicted,
            "exemplars": [{"id": i, "distance": round(d, 6)} for i, d in self.exemplars],
            "comparisons": self.comparisons,
        }


class Interpreter:
    """Read-only bundle of a trained classifier, its reference set and tables."""

    def __init__(self, model, reference, reference_locations, tables, class_names=None, part_names=None):
        self.model = model
        self.reference = reference
        self.reference_locations = np.asarray(reference_locations)
        self.tables = tables
        c, m = model.config.num_classes, model.config.num_parts
        self.class_names = class_names or [f"class {i}" for i in range(c)]
        self.part_names = part_names or {p: f"part {p}" for p in range(1, m + 1)}
        self.index = build_index(reference, model)
        self._part_index = {}
        self._row = {sid: i for i, sid in enumerate(reference.ids)}

    def part_index(self, part):
        if part not in self._part_index:
            self._part_index[part] = build_index(self.reference, self.model, self.reference_locations, part)
        return self._part_index[part]

    def patch(self, sample_id, part, side=16):
        """Pixel window of ``side`` around the reference sample's detected part."""
        i = self._row[sample_id]
        h, w = self.reference_locations[i, part - 1]
        _, stride, offset = receptive_field(self.model.config.geometry)
        img = self.reference.images[i]
        s = img.shape[-1]
        y0 = int(np.clip(round(offset + stride * h) - side // 2, 0, s - side))
        x0 = int(np.clip(round(offset + stride * w) - side // 2, 0, s - side))
        return img[:, y0 : y0 + side, x0 : x0 + side]


def _png_b64(image, zoom=4):
    pix = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    pix = pix.repeat(zoom, axis=0).repeat(zoom, axis=1)
    buf = io.BytesIO()
    Image.fromarray(pix, "RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def render_manual(image, locations, interp, K=3, R=3, T=3, sample_id="sample", out_dir=None):
    """Build the manual for one image.

    Returns (ManualEntry, html_text, json_text); with ``out_dir`` also writes
    ``manual_<sample_id>.html`` and ``manual_<sample_id>.json``.
    """
    model, tables = interp.model, interp.tables
    m = model.config.num_parts
    locs = _loc_row(locations, m)
    pred = int(model.predict(np.asarray(image)[None], locs[None])[0])
    exemplars = interp.index.query(embed(image, model), T, label=pred)

    comparisons = []
    if K > 0:
        gain = tables.gain.one_vs_most[pred]
        for other in most_confused(tables.bbox_confusion, pred, K):
            conf = {p: float(tables.confidence[p][pred, other]) for p in tables.gain.parts if p in tables.confidence}
            order = sorted(tables.gain.parts, key=lambda p: (-gain[p - 1], -conf.get(p, 0.0), p))[:R]
            parts = []
            for p in order:
                patches = {}
                if locs[p - 1, 0] >= 0:
                    q = embed(image, model, locs, p)
                    for cls in (pred, other):
                        patches[str(cls)] = [i for i, _ in interp.part_index(p).query(q, T, label=cls)]
                parts.append(
                    {"part": p, "gain": round(float(gain[p - 1]), 6), "confidence": round(conf.get(p, 0.5), 6), "patches": patches}
                )
            comparisons.append({"class": int(other), "parts": parts})
    entry = ManualEntry(str(sample_id), pred, exemplars, comparisons)
    json_text = json.dumps(entry.to_dict(), indent=2, sort_keys=True) + "\n"
    html_text = _manual_html(entry, image, interp)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"manual_{sample_id}.html").write_text(html_text)
        (out / f"manual_{sample_id}.json").write_text(json_text)
    return entry, html_text, json_text


def _img(b64, alt):
    return f'<img alt="{html.escape(alt)}" src="data:image/png;base64,{b64}">'


def _manual_html(entry, image, interp):
    names, pnames = interp.class_names, interp.part_names
    rows = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8">',
        f"<title>Manual for {html.escape(entry.sample_id)}</title>",
        "<style>body{font-family:sans-serif} img{image-rendering:pixelated;margin:2px} td{vertical-align:top;padding:4px}</style>",
        "</head><body>",
        f"<h1>{html.escape(entry.sample_id)}: predicted {html.escape(names[entry.predicted])}</h1>",
        _img(_png_b64(image, 3), entry.sample_id),
        "<h2>Nearest exemplars</h2><p>",
    ]
    for sid, d in entry.exemplars:
        i = interp._row[sid]
        rows.append(_img(_png_b64(interp.reference.images[i], 2), f"{sid} ({d:.3f})"))
    rows.append("</p>")
    for comp in entry.comparisons:
        other = comp["class"]
        rows.append(f"<h2>{html.escape(names[entry.predicted])} vs {html.escape(names[other])}</h2><table>")
        for p in comp["parts"]:
            label = f"{pnames[p['part']]} ({p['confidence']:.2f})"
            rows.append(f"<tr><td>{html.escape(label)}<br>gain {p['gain']:+.3f}</td>")
            for cls in (entry.predicted, other):
                ids = p["patches"].get(str(cls), [])
                cells = "".join(_img(_png_b64(interp.patch(sid, p["part"])), sid) for sid in ids) or "part not detected"
                rows.append(f"<td>{html.escape(names[cls])}<br>{cells}</td>")
            rows.append("</tr>")
        rows.append("</table>")
    rows.append("</body></html>")
    return "\n".join(rows) + "\n"
