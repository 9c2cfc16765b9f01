"""Per-pixel material classification on 15-channel cubes.

Training data come from labelled rectangles shrunk by a margin; the
classifier is a small numpy multilayer perceptron trained with mini-batch
SGD on softmax cross-entropy.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, TrainingDiverged
from .cube import N_CHANNELS, SpectralCube, assemble_cube, canonical_channel_meta

logger = logging.getLogger(__name__)


class MaterialClass(IntEnum):
    Unlabeled = -1
    Plastic = 0
    PaperCardboard = 1
    Wood = 2
    Metal = 3
    Textile = 4
    Foam = 5
    MineralStone = 6


MATERIALS = tuple(m for m in MaterialClass if m >= 0)
N_CLASSES = len(MATERIALS)

# RGB palette for label-map PNGs; Unlabeled is stored as index 255
PALETTE = {
    MaterialClass.Plastic: (230, 25, 75),
    MaterialClass.PaperCardboard: (255, 225, 25),
    MaterialClass.Wood: (170, 110, 40),
    MaterialClass.Metal: (128, 128, 128),
    MaterialClass.Textile: (0, 130, 200),
    MaterialClass.Foam: (245, 130, 48),
    MaterialClass.MineralStone: (60, 180, 75),
    MaterialClass.Unlabeled: (0, 0, 0),
}


def material_from_name(name) -> MaterialClass:
    if isinstance(name, MaterialClass):
        return name
    try:
        return MaterialClass[str(name)]
    except KeyError:
        raise InvalidInputError(f"unknown material class {name!r}") from None


# --------------------------------------------------------------------------
# labels and samples


@dataclass(frozen=True)
class LabelRect:
    x: int
    y: int
    w: int
    h: int
    material: MaterialClass
    margin_px: int = 2

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise InvalidInputError(f"label rectangle {self} has non-positive size")
        if self.material == MaterialClass.Unlabeled:
            raise InvalidInputError("Unlabeled cannot be used as a training label")

    def core(self) -> tuple[int, int, int, int]:
        m = self.margin_px
        return self.x + m, self.y + m, self.w - 2 * m, self.h - 2 * m

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h,
                "class": self.material.name, "margin": self.margin_px}

    @classmethod
    def from_json(cls, d: dict) -> "LabelRect":
        return cls(int(d["x"]), int(d["y"]), int(d["w"]), int(d["h"]),
                   material_from_name(d["class"]), int(d.get("margin", 2)))


def load_labels(path) -> list[LabelRect]:
    return [LabelRect.from_json(d) for d in json.loads(Path(path).read_text())]


def save_labels(rects, path) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in rects], indent=1))


@dataclass
class SampleSet:
    """Pixel samples: ``features`` N×15, ``targets`` N class ordinals."""

    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float).reshape(-1, N_CHANNELS)
        self.targets = np.asarray(self.targets, dtype=int).ravel()
        if len(self.features) != len(self.targets):
            raise InvalidInputError("features and targets differ in length")
        if np.any(self.targets < 0) or np.any(self.targets >= N_CLASSES):
            raise InvalidInputError("targets must be trainable class ordinals")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("sample features must be finite")

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.features[idx], self.targets[idx])

    @classmethod
    def concat(cls, sets) -> "SampleSet":
        sets = list(sets)
        return cls(np.concatenate([s.features for s in sets]), np.concatenate([s.targets for s in sets]))


def extract_samples(cube: SpectralCube, rects) -> SampleSet:
    """Every valid pixel inside each margin-shrunk rectangle becomes a sample.

    Overlapping rectangles emit their pixels once per rectangle.
    """
    feats, targets = [], []
    for rect in rects:
        x, y, w, h = rect.core()
        if w <= 0 or h <= 0:
            raise InvalidInputError(f"rectangle {rect.to_json()} is empty after margin shrink")
        if x < 0 or y < 0 or x + w > cube.width or y + h > cube.height:
            raise InvalidInputError(f"rectangle {rect.to_json()} lies outside the cube")
        valid = cube.validity_mask[y : y + h, x : x + w]
        if not valid.any():
            warnings.warn(f"rectangle {rect.to_json()} covers only masked pixels", stacklevel=2)
            continue
        feats.append(cube.channels[y : y + h, x : x + w][valid])
        targets.append(np.full(int(valid.sum()), int(rect.material)))
    if not feats:
        return SampleSet(np.zeros((0, N_CHANNELS)), np.zeros(0, dtype=int))
    return SampleSet(np.concatenate(feats), np.concatenate(targets))


def stratified_split(samples: SampleSet, test_frac: float = 0.2, seed: int = 0):
    """Per-class random split; returns (train, test)."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(N_CLASSES):
        idx = np.flatnonzero(samples.targets == c)
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        n_test = int(round(test_frac * len(idx)))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return samples.subset(train_idx), samples.subset(test_idx)


# --------------------------------------------------------------------------
# model


@dataclass
class MlpModel:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]  # layer l: in × out
    biases: list[np.ndarray]
    feature_means: np.ndarray
    feature_stds: np.ndarray
    band_subset: tuple[int, ...] = tuple(range(N_CHANNELS))
    loss_history: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else float("nan")

    def to_json(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "band_subset": list(self.band_subset),
            "loss_history": list(self.loss_history),
        }

    @classmethod
    def from_json(cls, d: dict) -> "MlpModel":
        return cls(
            tuple(d["layer_sizes"]),
            [np.array(w, dtype=float) for w in d["weights"]],
            [np.array(b, dtype=float) for b in d["biases"]],
            np.array(d["feature_means"], dtype=float),
            np.array(d["feature_stds"], dtype=float),
            tuple(d["band_subset"]),
            list(d.get("loss_history", [])),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "MlpModel":
        return cls.from_json(json.loads(Path(path).read_text()))

    def copy(self) -> "MlpModel":
        return MlpModel.from_json(self.to_json())


def zero_model(band_subset=None, hidden_sizes=(64,)) -> MlpModel:
    subset = tuple(range(N_CHANNELS)) if band_subset is None else tuple(band_subset)
    sizes = (len(subset), *hidden_sizes, N_CLASSES)
    return MlpModel(
        sizes,
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
        np.zeros(len(subset)),
        np.ones(len(subset)),
        subset,
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _standardize(model: MlpModel, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.shape[-1] == N_CHANNELS and len(model.band_subset) != N_CHANNELS:
        x = x[..., list(model.band_subset)]
    if x.shape[-1] != model.layer_sizes[0]:
        raise InvalidInputError(
            f"feature length {x.shape[-1]} does not match model input {model.layer_sizes[0]}"
        )
    return (x - model.feature_means) / model.feature_stds


def _forward(weights, biases, x):
    acts = [x]
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = acts[-1] @ w + b
        acts.append(np.maximum(z, 0.0) if i < len(weights) - 1 else z)
    return acts


def logits(model: MlpModel, features: np.ndarray) -> np.ndarray:
    x = _standardize(model, np.atleast_2d(features))
    return _forward(model.weights, model.biases, x)[-1]


def predict_proba(model: MlpModel, features: np.ndarray) -> np.ndarray:
    return softmax(logits(model, features))


def predict_pixel(model: MlpModel, features):
    """Class and 7 probabilities for one pixel; ties go to the lowest ordinal."""
    feats = np.asarray(features, dtype=float).ravel()
    probs = predict_proba(model, feats[None])[0]
    return MaterialClass(int(np.argmax(probs))), probs


def loss_and_grads(weights, biases, x, y):
    """Mean cross-entropy and its gradients for standardized inputs ``x``."""
    acts = _forward(weights, biases, x)
    z = acts[-1]
    zs = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zs).sum(axis=1))
    n = len(y)
    loss = float(np.mean(logsum - zs[np.arange(n), y]))
    delta = softmax(z)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw, gb = [None] * len(weights), [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i].T) * (acts[i] > 0)
    return loss, gw, gb


@dataclass(frozen=True)
class MlpConfig:
    hidden_sizes: tuple[int, ...] = (64,)
    epochs: int = 30
    batch: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    band_subset: tuple[int, ...] | None = None


def init_model(samples: SampleSet, config: MlpConfig) -> MlpModel:
    subset = tuple(range(N_CHANNELS)) if config.band_subset is None else tuple(config.band_subset)
    if not subset or any(not 0 <= c < N_CHANNELS for c in subset):
        raise InvalidInputError(f"band subset {subset} must be non-empty indices < {N_CHANNELS}")
    x = samples.features[:, list(subset)]
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds[stds == 0] = 1.0
    sizes = (len(subset), *config.hidden_sizes, N_CLASSES)
    rng = np.random.default_rng(config.seed)
    weights = [rng.normal(0.0, np.sqrt(2.0 / a), (a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    return MlpModel(sizes, weights, biases, means, stds, subset)


def train_mlp(samples: SampleSet, config: MlpConfig = MlpConfig()) -> MlpModel:
    """Mini-batch SGD with momentum; deterministic for a fixed seed.

    ``loss_history`` holds the full training-set loss after each epoch.
    """
    present = set(np.unique(samples.targets).tolist())
    missing = [MaterialClass(c).name for c in range(N_CLASSES) if c not in present]
    if missing:
        raise InvalidInputError(f"no samples for classes: {', '.join(missing)}")
    model = init_model(samples, config)
    x = _standardize(model, samples.features)
    y = samples.targets
    rng = np.random.default_rng(config.seed + 1)
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    n = len(y)
    # a loss this far above the untrained one only comes from a blow-up
    blowup = 1e3 * max(loss_and_grads(model.weights, model.biases, x, y)[0], 1.0)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n, config.batch):
                idx = order[start : start + config.batch]
                loss, gw, gb = loss_and_grads(model.weights, model.biases, x[idx], y[idx])
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
                for i in range(len(gw)):
                    vel_w[i] = config.momentum * vel_w[i] - config.lr * gw[i]
                    vel_b[i] = config.momentum * vel_b[i] - config.lr * gb[i]
                    model.weights[i] += vel_w[i]
                    model.biases[i] += vel_b[i]
            epoch_loss, _, _ = loss_and_grads(model.weights, model.biases, x, y)
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(w)) for w in model.weights):
            raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
        if epoch_loss > blowup:
            raise TrainingDiverged(f"loss blew up to {epoch_loss:.3g} in epoch {epoch}")
        model.loss_history.append(epoch_loss)
        logger.debug("epoch %d loss %.5f", epoch, epoch_loss)
    return model


def classify_cube(model: MlpModel, cube: SpectralCube):
    """Per-pixel labels and max-probabilities; masked pixels are Unlabeled / 0."""
    flat = cube.channels.reshape(-1, N_CHANNELS)
    mask = cube.validity_mask.ravel()
    labels = np.full(len(flat), int(MaterialClass.Unlabeled), dtype=int)
    conf = np.zeros(len(flat))
    if mask.any():
        probs = predict_proba(model, flat[mask])
        labels[mask] = np.argmax(probs, axis=1)
        conf[mask] = probs.max(axis=1)
    return labels.reshape(cube.height, cube.width), conf.reshape(cube.height, cube.width)


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray  # rows: true class, columns: predicted

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))

    @property
    def weighted_f1(self) -> float:
        total = self.support.sum()
        return float(self.f1 @ self.support / total) if total else 0.0

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    def summary(self) -> str:
        return f"f1-score of {self.macro_f1:.2f} (macro; weighted {self.weighted_f1:.2f})"

    def to_json(self) -> dict:
        return {
            "headline": self.summary(),
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "accuracy": self.accuracy,
            "per_class": {
                m.name: {
                    "precision": float(self.precision[m]),
                    "recall": float(self.recall[m]),
                    "f1": float(self.f1[m]),
                    "support": int(self.support[m]),
                }
                for m in MATERIALS
            },
            "confusion": self.confusion.tolist(),
        }


def metrics_from_predictions(y_true, y_pred) -> Metrics:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    conf = np.zeros((N_CLASSES, N_CLASSES), dtype=int)
    np.add.at(conf, (y_true, y_pred), 1)
    tp = np.diag(conf).astype(float)
    pred_tot = conf.sum(axis=0)
    true_tot = conf.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return Metrics(precision, recall, f1, true_tot, conf)


def evaluate(model: MlpModel, samples: SampleSet) -> Metrics:
    if len(samples) == 0:
        raise InvalidInputError("cannot evaluate on an empty sample set")
    pred = np.argmax(logits(model, samples.features), axis=1)
    return metrics_from_predictions(samples.targets, pred)


def band_ablation(samples: SampleSet, subsets, config: MlpConfig = MlpConfig(), test_frac=0.2,
                  split_seed: int | None = None):
    """Train one model per channel subset and rank subsets by held-out macro-F1.

    All subsets share the same stratified split and training config.
    Returns a list of (subset, macro_f1), best first.
    """
    train, test = stratified_split(samples, test_frac, config.seed if split_seed is None else split_seed)
    scored = []
    for subset in subsets:
        subset = tuple(int(c) for c in subset)
        if not subset or any(not 0 <= c < N_CHANNELS for c in subset):
            raise InvalidInputError(f"invalid band subset {subset}")
        model = train_mlp(train, replace(config, band_subset=subset))
        scored.append((subset, evaluate(model, test).macro_f1))
    return sorted(scored, key=lambda t: -t[1])


# --------------------------------------------------------------------------
# gradient verification


def _param_list(model: MlpModel):
    out = []
    for i, w in enumerate(model.weights):
        out.append(w)
        out.append(model.biases[i])
    return out


def gradient_check_mlp(model: MlpModel, samples: SampleSet, epsilon: float = 1e-5,
                       n_params: int = 120, seed: int = 0, gradient_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``gradient_fn(weights, biases, x, y) -> (loss, gw, gb)`` defaults to the
    backprop used in training; tests swap in a mutated version.
    """
    if len(samples) == 0:
        raise InvalidInputError("gradient check needs samples")
    if not 1e-7 <= epsilon <= 1e-3:
        raise InvalidInputError("epsilon must lie in [1e-7, 1e-3]")
    gradient_fn = gradient_fn or loss_and_grads
    m = model.copy()
    x = _standardize(m, samples.features)
    y = samples.targets
    _, gw, gb = gradient_fn(m.weights, m.biases, x, y)
    params = _param_list(m)
    grads = [g for pair in zip(gw, gb) for g in pair]
    sizes = np.array([p.size for p in params])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for k in flat_idx:
        which = int(np.searchsorted(bounds, k, side="right"))
        local = k - (bounds[which - 1] if which else 0)
        p = params[which].reshape(-1)
        orig = p[local]
        p[local] = orig + epsilon
        lp = loss_and_grads(m.weights, m.biases, x, y)[0]
        p[local] = orig - epsilon
        lm = loss_and_grads(m.weights, m.biases, x, y)[0]
        p[local] = orig
        num = (lp - lm) / (2 * epsilon)
        ana = grads[which].reshape(-1)[local]
        denom = max(abs(num) + abs(ana), 1e-7)
        worst = max(worst, abs(num - ana) / denom)
    return worst


# --------------------------------------------------------------------------
# synthetic scenes


def default_signatures() -> np.ndarray:
    """Mean 15-channel reflectance per material (rows in class order)."""
    return np.array(
        [
            # UV bb, UV 290-365, UV dual | R G B | 730 830 845 928 | SWIR bb 930 1290 1440 1485
            [0.25, 0.12, 0.32, 0.70, 0.30, 0.28, 0.72, 0.70, 0.66, 0.60, 0.62, 0.66, 0.40, 0.50, 0.22],  # Plastic
            [0.62, 0.55, 0.52, 0.78, 0.74, 0.66, 0.80, 0.80, 0.79, 0.77, 0.70, 0.76, 0.62, 0.28, 0.48],  # Paper
            [0.20, 0.08, 0.28, 0.56, 0.40, 0.22, 0.60, 0.66, 0.67, 0.64, 0.58, 0.63, 0.55, 0.22, 0.42],  # Wood
            [0.52, 0.50, 0.50, 0.46, 0.47, 0.49, 0.50, 0.51, 0.52, 0.53, 0.55, 0.56, 0.58, 0.60, 0.62],  # Metal
            [0.32, 0.22, 0.36, 0.28, 0.30, 0.55, 0.52, 0.56, 0.55, 0.52, 0.50, 0.52, 0.44, 0.18, 0.34],  # Textile
            [0.45, 0.38, 0.50, 0.82, 0.78, 0.52, 0.85, 0.84, 0.83, 0.80, 0.74, 0.80, 0.70, 0.55, 0.36],  # Foam
            [0.16, 0.12, 0.18, 0.34, 0.33, 0.31, 0.37, 0.39, 0.40, 0.41, 0.44, 0.42, 0.47, 0.45, 0.50],  # Mineral
        ]
    )


def swir_only_signatures() -> np.ndarray:
    """Signatures identical outside the SWIR camera channels."""
    base = np.full(N_CHANNELS, 0.5)
    sig = np.tile(base, (N_CLASSES, 1))
    swir = [i for i, m in enumerate(canonical_channel_meta()) if m.camera == "SWIR"]
    patterns = np.array(
        [
            [0.80, 0.20, 0.50, 0.30, 0.70],
            [0.20, 0.80, 0.30, 0.70, 0.50],
            [0.50, 0.30, 0.80, 0.20, 0.40],
            [0.30, 0.70, 0.20, 0.80, 0.30],
            [0.70, 0.50, 0.40, 0.20, 0.80],
            [0.20, 0.40, 0.70, 0.60, 0.20],
            [0.60, 0.20, 0.20, 0.50, 0.80],
        ]
    )
    sig[:, swir] = patterns
    return sig


@dataclass(frozen=True)
class SyntheticSceneSpec:
    width: int = 96
    height: int = 96
    signatures: np.ndarray = field(default_factory=default_signatures)
    noise_std: np.ndarray | float = 0.05
    shadow_range: tuple[float, float] = (0.5, 1.0)
    layout: tuple[tuple[int, int, int, int, int], ...] | None = None  # (x, y, w, h, class)
    grid: int = 4
    seed: int = 0

    def __post_init__(self):
        sig = np.asarray(self.signatures, dtype=float)
        if sig.shape != (N_CLASSES, N_CHANNELS) or np.any(sig < 0) or np.any(sig > 1):
            raise InvalidInputError("signatures must be 7×15 values in [0, 1]")
        if np.any(np.asarray(self.noise_std) < 0):
            raise InvalidInputError("noise std must be non-negative")
        lo, hi = self.shadow_range
        if not 0 < lo <= hi <= 1:
            raise InvalidInputError("shadow range must lie inside (0, 1]")


def grid_layout(width: int, height: int, grid: int, rng) -> list[tuple[int, int, int, int, int]]:
    """Grid of patches with shuffled classes; every class appears at least once."""
    n = grid * grid
    classes = np.concatenate([np.arange(N_CLASSES), rng.integers(0, N_CLASSES, max(n - N_CLASSES, 0))])
    classes = rng.permutation(classes)[:n]
    xs = np.linspace(0, width, grid + 1).astype(int)
    ys = np.linspace(0, height, grid + 1).astype(int)
    return [
        (int(xs[j]), int(ys[i]), int(xs[j + 1] - xs[j]), int(ys[i + 1] - ys[i]), int(classes[i * grid + j]))
        for i in range(grid)
        for j in range(grid)
    ]


def gen_synthetic_scene(spec: SyntheticSceneSpec = SyntheticSceneSpec()):
    """Cube and ground-truth label map for a patch scene.

    Each patch gets its class signature times a per-patch shadow factor plus
    per-channel Gaussian noise. Pixels outside the layout are Unlabeled
    zeros (before noise).
    """
    rng = np.random.default_rng(spec.seed)
    layout = spec.layout if spec.layout is not None else grid_layout(spec.width, spec.height, spec.grid, rng)
    sig = np.asarray(spec.signatures, dtype=float)
    img = np.zeros((spec.height, spec.width, N_CHANNELS))
    gt = np.full((spec.height, spec.width), int(MaterialClass.Unlabeled), dtype=int)
    lo, hi = spec.shadow_range
    for x, y, w, h, cls in layout:
        shade = rng.uniform(lo, hi) if hi > lo else lo
        img[y : y + h, x : x + w] = sig[cls] * shade
        gt[y : y + h, x : x + w] = cls
    noise = np.broadcast_to(np.asarray(spec.noise_std, dtype=float), (N_CHANNELS,))
    img = img + rng.normal(size=img.shape) * noise
    cube = assemble_cube([img[:, :, c] for c in range(N_CHANNELS)])
    return cube, gt


def layout_of(spec: SyntheticSceneSpec):
    """The layout ``gen_synthetic_scene`` uses for ``spec`` (reproduces the RNG draw)."""
    if spec.layout is not None:
        return list(spec.layout)
    return grid_layout(spec.width, spec.height, spec.grid, np.random.default_rng(spec.seed))


def label_rects_for(spec: SyntheticSceneSpec, margin: int = 2) -> list[LabelRect]:
    return [LabelRect(x, y, w, h, MaterialClass(c), margin) for x, y, w, h, c in layout_of(spec)]


def scene_family(n_scenes: int = 4, seed: int = 0, **kw):
    """Scenes with different layouts/shadows/noise draws and their label rectangles."""
    out = []
    for i in range(n_scenes):
        spec = SyntheticSceneSpec(seed=seed * 1000 + i, **kw)
        cube, gt = gen_synthetic_scene(spec)
        out.append((cube, gt, label_rects_for(spec)))
    return out


# --------------------------------------------------------------------------
# map export


def save_label_map(label_map: np.ndarray, png_path, legend_path=None) -> None:
    from PIL import Image

    idx = np.where(label_map < 0, 255, label_map).astype(np.uint8)
    im = Image.fromarray(idx, mode="P")
    pal = [0] * 768
    for m, rgb in PALETTE.items():
        j = 255 if m < 0 else int(m)
        pal[3 * j : 3 * j + 3] = rgb
    im.putpalette(pal)
    im.save(png_path)
    if legend_path is not None:
        legend = {str(255 if m < 0 else int(m)): {"class": m.name, "rgb": list(rgb)} for m, rgb in PALETTE.items()}
        Path(legend_path).write_text(json.dumps(legend, indent=1, sort_keys=True))


def load_label_map(png_path) -> np.ndarray:
    from PIL import Image

    with Image.open(png_path) as im:
        idx = np.asarray(im).astype(int)
    return np.where(idx == 255, int(MaterialClass.Unlabeled), idx)


def save_confidence_map(conf: np.ndarray, png_path) -> None:
    from PIL import Image

    q = np.round(np.clip(conf, 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(q).save(png_path)


def load_confidence_map(png_path) -> np.ndarray:
    from PIL import Image

    with Image.open(png_path) as im:
        return np.asarray(im).astype(float) / 65535.0
