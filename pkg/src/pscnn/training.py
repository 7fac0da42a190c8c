"""Two-stage training: localizer first, then the classifier on frozen part locations.

Also hosts the incremental part-insertion schedule (bbox-only, then 2, 4, 8,
... parts, each stage warm-started from the previous one) and the single-part
ranking used to order insertions.
"""

import json
import logging
import time
from pathlib import Path
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .classification import ClassifierConfig, PartStackedClassifier, init_from_localizer, locations_array
from .errors import ConfigurationError, NonFiniteError, TrainingError
from .io import load_checkpoint, save_checkpoint
from .evaluation import KeypointMatchConfig, accuracy, evaluate_localization, format_table
from .localization import FCNConfig, build_fcn, build_label_map, localize, spatial_softmax_loss
from .optim import SGD
from .tensor import scale, softmax_cross_entropy

logger = logging.getLogger("pscnn")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    lr_decay: float = 0.1
    step_epochs: int = 0  # 0 disables step decay
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    jitter: int = 0  # max random translation in pixels
    part_order: tuple = None  # insertion order for the incremental schedule
    rank_epochs: int = None  # epochs per single-part model in rank_parts; None → epochs // 2
    init_streams: tuple = ()  # streams started from the localizer trunk

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigurationError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be ≥ 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be ≥ 0, got {self.epochs}")
        if self.part_order is not None:
            order = tuple(int(p) for p in self.part_order)
            if len(set(order)) != len(order) or any(p < 1 for p in order):
                raise ConfigurationError(f"part_order must list distinct positive part ids, got {order}")
            object.__setattr__(self, "part_order", order)
        object.__setattr__(self, "init_streams", tuple(self.init_streams))


def localizer_defaults(**overrides):
    """Desk-scale localizer schedule; larger rates diverge on the summed loss."""
    kw = dict(lr=0.0005, epochs=25, step_epochs=20, batch_size=32, seed=7)
    kw.update(overrides)
    return TrainConfig(**kw)


def classifier_defaults(**overrides):
    kw = dict(lr=0.01, epochs=15, step_epochs=12, batch_size=8, rank_epochs=6, seed=0)
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass(frozen=True)
class InferenceConfig:
    sigma: float = 1.0
    radius: int = 2
    mu: float = 0.3
    overlap: float = 0.5
    alpha: float = 0.1


@dataclass
class ExperimentLog:
    """Per-epoch records; wall-clock times are kept apart so logs stay reproducible."""

    records: list = field(default_factory=list)
    wall_time: dict = field(default_factory=dict)

    def log(self, stage, epoch, **metrics):
        prev = [r["epoch"] for r in self.records if r["stage"] == stage]
        if prev and epoch <= prev[-1]:
            raise ValueError(f"epoch index must increase within stage {stage!r}")
        for k, v in metrics.items():
            if "acc" in k and not 0 <= v <= 1:
                raise ValueError(f"{k}={v} outside [0, 1]")
        rec = {"stage": stage, "epoch": epoch, **metrics}
        self.records.append(rec)
        logger.info(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))

    def extend(self, other):
        self.records.extend(other.records)
        self.wall_time.update(other.wall_time)

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass
class LocalizerResult:
    model: object
    report: object
    log: ExperimentLog
    inference: InferenceConfig


@dataclass
class ClassifierResult:
    model: PartStackedClassifier
    accuracy: float
    log: ExperimentLog
    test_pred: np.ndarray
    test_scores: np.ndarray


@dataclass
class ScheduleResult:
    stages: list  # [(num_parts, accuracy)]
    part_order: tuple
    results: list  # ClassifierResult per stage
    log: ExperimentLog

    def table(self):
        """One row per stage: label, part count, accuracy in percent."""
        rows = [["BBox only" if n == 0 else f"+{n} part", n, f"{100 * a:.2f}"] for n, a in self.stages]
        return format_table(["stage", "parts", "accuracy"], rows)


def _translate(images, dx, dy):
    """Shift each image by integer (dx, dy), replicating edge pixels."""
    out = np.empty_like(images)
    pad = int(max(np.abs(dx).max(initial=0), np.abs(dy).max(initial=0)))
    if pad == 0:
        return images.copy()
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    s = images.shape[-1]
    for i in range(len(images)):
        r, c = pad - dy[i], pad - dx[i]
        out[i] = padded[i, :, r : r + s, c : c + s]
    return out


def _snapshot(model):
    return model.state_dict()


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield np.sort(perm[s : s + batch_size])


def train_localizer(train, test, config, fcn_config=None, inference=InferenceConfig(), init_seed=None):
    """Train the FCN on the summed spatial softmax loss; report test MPK/MRK/APK."""
    from .geometry import desk_geometry

    if fcn_config is None:
        fcn_config = FCNConfig(desk_geometry(train.spec.image_side), train.num_parts)
    geom = fcn_config.geometry
    if geom.input_side != train.images.shape[-1]:
        raise ConfigurationError(f"geometry input side {geom.input_side} != image side {train.images.shape[-1]}")
    model = build_fcn(fcn_config, seed=config.seed if init_seed is None else init_seed)
    m = train.num_parts
    labels = np.stack([build_label_map(train.keypoint_list(i), geom, m, inference.overlap) for i in range(len(train))])
    opt = SGD(model.params, config.lr, config.momentum, config.weight_decay, config.lr_decay, config.step_epochs)
    rng = np.random.default_rng([config.seed, 1])
    log = ExperimentLog()
    t0 = time.perf_counter()
    good = _snapshot(model)
    for epoch in range(config.epochs):
        total = 0.0
        for idx in _batches(len(train), config.batch_size, rng):
            images, lab = train.images[idx], labels[idx]
            if config.jitter:
                d = rng.integers(-config.jitter, config.jitter + 1, size=(2, len(idx)))
                images = _translate(images, d[0], d[1])
                kps = train.keypoints[idx].copy()
                kps[:, :, 0] += d[0][:, None]
                kps[:, :, 1] += d[1][:, None]
                lab = np.stack(
                    [
                        build_label_map([(p + 1, x, y, v) for p, (x, y, v) in enumerate(k)], geom, m, inference.overlap)
                        for k in kps
                    ]
                )
            opt.zero_grad()
            try:
                loss = scale(spatial_softmax_loss(model.forward(images), lab), 1.0 / len(idx))
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"localizer diverged in epoch {epoch}: {exc}", good, epoch) from exc
            opt.step(epoch)
            total += loss.item() * len(idx)
        mean_loss = total / len(train)
        if not np.isfinite(mean_loss):
            raise TrainingError(f"localizer loss is {mean_loss} in epoch {epoch}", good, epoch)
        good = _snapshot(model)
        log.log("localizer", epoch, loss=mean_loss)
    log.wall_time["localizer"] = time.perf_counter() - t0
    report = evaluate_fcn(model, test, inference)
    return LocalizerResult(model, report, log, inference)


def evaluate_fcn(model, data, inference=InferenceConfig()):
    locs = localize(model, data.images, inference.sigma, inference.radius, inference.mu)
    cfg = KeypointMatchConfig(inference.alpha)
    return evaluate_localization(locs, data.keypoints, data.bboxes, model.geometry, cfg)


def locate(fcn, data, inference=InferenceConfig()):
    """Frozen-localizer part locations for every sample: int array [N, M, 2]."""
    locs = localize(fcn, data.images, inference.sigma, inference.radius, inference.mu)
    return locations_array(locs, data.num_parts)


def default_classifier_config(fcn_config, num_classes):
    return ClassifierConfig(fcn_config.geometry, fcn_config.num_parts, num_classes)


def _warm_start(init, config, active_parts, use_object):
    if init.config != config:
        raise ConfigurationError("checkpoint was built with a different classifier configuration")
    missing = set(init.active_parts) - set(active_parts)
    if missing:
        raise ConfigurationError(
            f"checkpoint parts {init.active_parts} are not a subset of requested parts {tuple(active_parts)}"
        )
    if init.use_object != use_object:
        raise ConfigurationError("checkpoint and requested model disagree on the object stream")
    model = PartStackedClassifier(config, active_parts, seed=0, use_object=use_object)
    model.load_state_dict(init.state_dict())
    for c in active_parts:
        if c not in init.active_parts:
            model.part_blocks[c].data[:] = 0
    return model


def train_classifier(
    train,
    test,
    fcn,
    active_parts,
    config,
    model_config=None,
    init=None,
    locations=None,
    use_object=True,
    stage="classifier",
    inference=InferenceConfig(),
):
    """Train object stream + active part streams + head with the localizer frozen.

    Args:
        fcn: trained localizer; used to infer part locations unless
            ``locations`` = (train_locs, test_locs) is given.
        active_parts: part ids fed to fc6; empty gives the bbox-only model.
        init: optional PartStackedClassifier to warm-start from; its parts
            must be a subset of ``active_parts``. Newly inserted fc6 blocks
            start at zero, so the initial predictions equal the checkpoint's.
        use_object: False drops the object stream (single-part studies).
    """
    active_parts = tuple(int(p) for p in active_parts)
    m = train.num_parts
    if any(not 1 <= p <= m for p in active_parts):
        raise ConfigurationError(f"active parts {active_parts} must lie in 1..{m}")
    if model_config is None:
        model_config = init.config if init is not None else default_classifier_config(fcn.config, train.num_classes)
    if locations is None:
        if active_parts and fcn is None:
            raise ConfigurationError("part locations need a localizer")
        if fcn is not None:
            locations = (locate(fcn, train, inference), locate(fcn, test, inference))
        else:
            locations = (np.full((len(train), m, 2), -1), np.full((len(test), m, 2), -1))
    train_locs, test_locs = locations
    if init is not None:
        model = _warm_start(init, model_config, active_parts, use_object)
    else:
        model = PartStackedClassifier(model_config, active_parts, seed=config.seed, use_object=use_object)
        streams = tuple(s for s in config.init_streams if use_object or s != "object")
        if fcn is not None and streams:
            init_from_localizer(model, fcn, streams)

    params = model.trainable_params()
    opt = SGD(params, config.lr, config.momentum, config.weight_decay, config.lr_decay, config.step_epochs)
    rng = np.random.default_rng([config.seed, 2])
    log = ExperimentLog()
    t0 = time.perf_counter()
    good = _snapshot(model)
    for epoch in range(config.epochs):
        total, correct = 0.0, 0
        for idx in _batches(len(train), config.batch_size, rng):
            images, locs = train.images[idx], train_locs[idx]
            if config.jitter:
                d = rng.integers(-config.jitter, config.jitter + 1, size=(2, len(idx)))
                images = _translate(images, d[0], d[1])
                if active_parts:
                    locs = locations_array(localize(fcn, images, inference.sigma, inference.radius, inference.mu), m)
            opt.zero_grad()
            try:
                scores = model.forward(images, locs)
                loss = softmax_cross_entropy(scores, train.labels[idx])
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"{stage} diverged in epoch {epoch}: {exc}", good, epoch) from exc
            opt.step(epoch)
            total += loss.item() * len(idx)
            correct += int((scores.data.argmax(axis=1) == train.labels[idx]).sum())
        try:
            test_acc = accuracy(model.predict(test.images, test_locs), test.labels) if len(test) else 0.0
        except NonFiniteError as exc:
            raise TrainingError(f"{stage} diverged in epoch {epoch}: {exc}", good, epoch) from exc
        good = _snapshot(model)
        log.log(stage, epoch, loss=total / len(train), train_acc=correct / len(train), test_acc=test_acc)
    log.wall_time[stage] = time.perf_counter() - t0
    scores = model.scores(test.images, test_locs)
    pred = scores.argmax(axis=1) if len(test) else np.zeros(0, np.int64)
    return ClassifierResult(model, accuracy(pred, test.labels), log, pred, scores)


def schedule_counts(num_parts):
    """Cumulative part counts: 0, 2, 4, 8, ... capped at ``num_parts``."""
    counts, i = [0], 1
    while counts[-1] < num_parts:
        counts.append(min(2**i, num_parts))
        i += 1
    return counts


def rank_parts(train, test, fcn, config, epochs=None, locations=None, model_config=None, inference=InferenceConfig()):
    """Train one part-only model per part (object stream dropped).

    Returns ([(part, accuracy)] best first, per-part ClassifierResults in the
    same order). Ties in accuracy are broken by the smaller part id.
    """
    if locations is None:
        locations = (locate(fcn, train, inference), locate(fcn, test, inference))
    if epochs is None:
        epochs = config.rank_epochs if config.rank_epochs is not None else max(1, config.epochs // 2)
    cfg = replace(config, epochs=epochs)
    results = []
    for part in range(1, train.num_parts + 1):
        res = train_classifier(
            train, test, fcn, (part,), cfg, model_config, locations=locations, use_object=False, stage=f"rank_part{part}"
        )
        results.append((part, res.accuracy, res))
    results.sort(key=lambda r: (-r[1], r[0]))
    return [(p, a) for p, a, _ in results], [r for _, _, r in results]


def incremental_schedule(
    train, test, fcn, config, part_order=None, model_config=None, locations=None, inference=InferenceConfig()
):
    """Bbox-only model, then warm-started stages with 2, 4, 8, ... parts."""
    m = train.num_parts
    if locations is None:
        locations = (locate(fcn, train, inference), locate(fcn, test, inference))
    order = part_order or config.part_order
    if order is None:
        ranked, _ = rank_parts(train, test, fcn, config, locations=locations, model_config=model_config)
        order = tuple(p for p, _ in ranked)
    order = tuple(int(p) for p in order)
    if len(set(order)) != len(order) or not set(order) <= set(range(1, m + 1)):
        raise ConfigurationError(f"insertion order {order} is not a permutation prefix of 1..{m}")
    counts = [n for n in schedule_counts(m) if n <= len(order)]
    if counts[-1] < len(order):
        counts.append(len(order))
    log, stages, results = ExperimentLog(), [], []
    prev = None
    for i, n in enumerate(counts):
        res = train_classifier(
            train, test, fcn, order[:n], config, model_config, init=prev, locations=locations, stage=f"stage{i}_parts{n}"
        )
        stages.append((n, res.accuracy))
        results.append(res)
        log.extend(res.log)
        prev = res.model
    return ScheduleResult(stages, order, results, log)


def config_to_dict(cfg):
    d = asdict(cfg)
    if d.get("part_order") is not None:
        d["part_order"] = list(d["part_order"])
    return d


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_fcn(directory, model, inference=None):
    meta = {"kind": "fcn", "config": model.config.to_dict()}
    if inference is not None:
        meta["inference"] = asdict(inference)
    save_checkpoint(directory, model.state_dict(), meta)


def load_fcn(directory):
    """(model, InferenceConfig) from a localizer checkpoint."""
    tensors, meta = load_checkpoint(directory)
    if meta.get("kind") != "fcn":
        raise ConfigurationError(f"{directory} is not a localizer checkpoint")
    model = build_fcn(FCNConfig.from_dict(meta["config"]))
    model.load_state_dict(tensors)
    return model, InferenceConfig(**meta.get("inference", {}))


def save_classifier(directory, model):
    meta = {
        "kind": "classifier",
        "config": model.config.to_dict(),
        "active_parts": list(model.active_parts),
        "use_object": model.use_object,
    }
    save_checkpoint(directory, model.state_dict(), meta)


def load_classifier(directory):
    tensors, meta = load_checkpoint(directory)
    if meta.get("kind") != "classifier":
        raise ConfigurationError(f"{directory} is not a classifier checkpoint")
    model = PartStackedClassifier(
        ClassifierConfig.from_dict(meta["config"]), meta["active_parts"], use_object=meta.get("use_object", True)
    )
    model.load_state_dict(tensors)
    return model


def checkpoint_exists(directory):
    return (Path(directory) / "manifest.json").is_file()
