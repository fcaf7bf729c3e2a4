"""Dataset generation and I/O, the training loop, evaluation, and ablations.

The synthetic generator stands in for real scan data at desk scale: a few
parametric shape families sampled on their surfaces, with an optional
clutter mode that adds a ground-plane patch and nearby fragments to mimic
background-contaminated crops.
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .abstraction import (
    CsmSetting,
    LayerConfig,
    Model,
    RumSetting,
    build_model,
    classify,
    collect_loss_terms,
)
from .errors import ArgumentError, ConfigError, NonFiniteError, ParseError
from .loss import total_loss
from .seeding import (
    DATASET,
    POINT_SHUFFLE,
    SPLIT,
    SUBSAMPLE,
    TRAIN_ORDER,
    SampleRng,
    derive_rng,
)
from .tensor import MomentumSgd, Tape, backward, load_checkpoint, save_checkpoint, scale

DATASET_MAGIC = "LRLDS1"
METRICS_COLUMNS = "epoch,train_loss,ce,fit,range,rum,train_acc,test_acc,test_macc"


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


def _box_surface(rng, n, half, center=(0.0, 0.0, 0.0)):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=n)
    v = rng.uniform(-1.0, 1.0, size=n)
    pts = np.empty((n, 3))
    for f in range(6):
        m = face == f
        axis, sign = divmod(f, 2)
        fixed = (1.0 if sign == 0 else -1.0) * half[axis]
        spread = [u[m], v[m]]
        cols = [c for c in range(3) if c != axis]
        pts[m, axis] = fixed
        pts[m, cols[0]] = spread[0] * half[cols[0]]
        pts[m, cols[1]] = spread[1] * half[cols[1]]
    return pts + np.asarray(center)


def _shape_box(rng, n):
    half = rng.uniform(0.4, 1.0, size=3)
    return _box_surface(rng, n, half)


def _shape_cylinder(rng, n):
    rho = rng.uniform(0.3, 0.6)
    h = rng.uniform(1.0, 1.8)
    lat = 2.0 * math.pi * rho * h
    cap = math.pi * rho * rho
    which = rng.choice(3, size=n, p=np.array([lat, cap, cap]) / (lat + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts = np.empty((n, 3))
    m = which == 0
    pts[m, 0] = rho * np.cos(theta[m])
    pts[m, 1] = rho * np.sin(theta[m])
    pts[m, 2] = rng.uniform(-h / 2, h / 2, size=int(m.sum()))
    for side, zval in ((1, h / 2), (2, -h / 2)):
        m = which == side
        rr = rho * np.sqrt(rng.uniform(0.0, 1.0, size=int(m.sum())))
        pts[m, 0] = rr * np.cos(theta[m])
        pts[m, 1] = rr * np.sin(theta[m])
        pts[m, 2] = zval
    return pts


def _shape_chair(rng, n):
    # Seat slab plus a perpendicular backrest slab.
    w = rng.uniform(0.8, 1.2)
    d = rng.uniform(0.8, 1.2)
    hb = rng.uniform(0.8, 1.4)
    seat_half = (w / 2, d / 2, 0.06)
    back_half = (w / 2, 0.06, hb / 2)
    seat_area = 8 * (seat_half[0] * seat_half[1] + seat_half[0] * seat_half[2]
                     + seat_half[1] * seat_half[2])
    back_area = 8 * (back_half[0] * back_half[1] + back_half[0] * back_half[2]
                     + back_half[1] * back_half[2])
    n_back = int(round(n * back_area / (seat_area + back_area)))
    n_back = min(max(n_back, 1), n - 1)
    seat = _box_surface(rng, n - n_back, seat_half)
    back = _box_surface(rng, n_back, back_half, center=(0.0, -d / 2, hb / 2 + seat_half[2]))
    return np.vstack([seat, back])


def _shape_sphere(rng, n):
    radius = rng.uniform(0.6, 1.0)
    v = rng.normal(size=(n, 3))
    v /= np.sqrt((v ** 2).sum(axis=1, keepdims=True))
    return radius * v


def _shape_cone(rng, n):
    rho = rng.uniform(0.4, 0.8)
    h = rng.uniform(1.0, 1.6)
    slant = math.sqrt(rho * rho + h * h)
    lat = math.pi * rho * slant
    base = math.pi * rho * rho
    which = rng.choice(2, size=n, p=np.array([lat, base]) / (lat + base))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts = np.empty((n, 3))
    m = which == 0
    s = np.sqrt(rng.uniform(0.0, 1.0, size=int(m.sum())))  # area grows with distance from apex
    pts[m, 0] = s * rho * np.cos(theta[m])
    pts[m, 1] = s * rho * np.sin(theta[m])
    pts[m, 2] = h * (1.0 - s)
    m = which == 1
    rr = rho * np.sqrt(rng.uniform(0.0, 1.0, size=int(m.sum())))
    pts[m, 0] = rr * np.cos(theta[m])
    pts[m, 1] = rr * np.sin(theta[m])
    pts[m, 2] = 0.0
    return pts


def _shape_torus(rng, n):
    big = rng.uniform(0.6, 0.9)
    small = rng.uniform(0.15, 0.3)
    out = np.empty((n, 3))
    have = 0
    while have < n:  # rejection on the tube angle keeps the surface density uniform
        need = n - have
        theta = rng.uniform(0.0, 2.0 * math.pi, size=2 * need + 8)
        keep = rng.uniform(0.0, 1.0, size=theta.size) < (big + small * np.cos(theta)) / (big + small)
        theta = theta[keep][:need]
        phi = rng.uniform(0.0, 2.0 * math.pi, size=theta.size)
        ring = big + small * np.cos(theta)
        out[have : have + theta.size, 0] = ring * np.cos(phi)
        out[have : have + theta.size, 1] = ring * np.sin(phi)
        out[have : have + theta.size, 2] = small * np.sin(theta)
        have += theta.size
    return out


SHAPE_FAMILIES = (
    ("box", _shape_box),
    ("cylinder", _shape_cylinder),
    ("chair", _shape_chair),
    ("sphere", _shape_sphere),
    ("cone", _shape_cone),
    ("torus", _shape_torus),
)


def _yaw(rng, pts):
    a = rng.uniform(0.0, 2.0 * math.pi)
    rot = np.array([[math.cos(a), -math.sin(a), 0.0],
                    [math.sin(a), math.cos(a), 0.0],
                    [0.0, 0.0, 1.0]])
    return pts @ rot.T


def normalize_cloud(pts: np.ndarray) -> np.ndarray:
    """Zero-center and scale so the farthest point sits on the unit sphere."""
    pts = pts - pts.mean(axis=0)
    extent = np.sqrt((pts ** 2).sum(axis=1)).max()
    if extent > 0:
        pts = pts / extent
    return pts


@dataclass
class Dataset:
    clouds: list[np.ndarray]
    labels: np.ndarray
    class_names: list[str]
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split_indices(self, split: str) -> np.ndarray:
        if split == "train":
            return self.train_idx
        if split == "test":
            return self.test_idx
        if split == "all":
            return np.arange(len(self.clouds))
        raise ArgumentError(f"unknown split {split!r}; expected train/test/all")


def _stratified_split(labels: np.ndarray, seed: int, train_frac: float = 0.8):
    rng = derive_rng(seed, SPLIT)
    train, test = [], []
    for c in range(int(labels.max()) + 1 if labels.size else 0):
        idx = np.flatnonzero(labels == c)
        perm = idx[rng.permutation(idx.size)]
        cut = int(round(train_frac * idx.size))
        cut = min(max(cut, 1), idx.size)
        train.extend(perm[:cut])
        test.extend(perm[cut:])
    return np.sort(np.array(train, dtype=np.intp)), np.sort(np.array(test, dtype=np.intp))


def generate_synthetic(classes: int, per_class: int, points: int, noise: float,
                       clutter: bool, seed: int) -> Dataset:
    """Balanced clouds from parametric families, normalized to the unit sphere.

    Clutter mode replaces part of each cloud with a ground-plane patch under
    the object and a few small fragments beside it.
    """
    if classes < 2:
        raise ArgumentError(f"need at least 2 classes, got {classes}")
    if classes > len(SHAPE_FAMILIES):
        raise ArgumentError(f"at most {len(SHAPE_FAMILIES)} shape families available")
    if points < 64:
        raise ArgumentError(f"need at least 64 points per cloud, got {points}")
    if per_class < 1:
        raise ArgumentError(f"per_class must be >= 1, got {per_class}")
    if noise < 0:
        raise ArgumentError(f"noise must be >= 0, got {noise}")
    clouds, labels = [], []
    for c in range(classes):
        name, sampler = SHAPE_FAMILIES[c]
        for i in range(per_class):
            rng = derive_rng(seed, DATASET, c, i)
            if clutter:
                n_plane = points // 5
                n_frag = points // 10
                obj = _yaw(rng, sampler(rng, points - n_plane - n_frag))
                lo, hi = obj.min(axis=0), obj.max(axis=0)
                span = float(max(hi[0] - lo[0], hi[1] - lo[1], 0.5))
                side = span * rng.uniform(1.2, 1.8)
                plane = np.column_stack([
                    rng.uniform(-side, side, n_plane) + (lo[0] + hi[0]) / 2,
                    rng.uniform(-side, side, n_plane) + (lo[1] + hi[1]) / 2,
                    np.full(n_plane, lo[2]),
                ])
                n_pieces = int(rng.integers(1, 4))
                counts = [n_frag // n_pieces] * n_pieces
                counts[-1] += n_frag - sum(counts)
                frags = []
                for take in counts:
                    half = rng.uniform(0.08, 0.2, size=3) * span
                    angle = rng.uniform(0.0, 2.0 * math.pi)
                    dist = span * rng.uniform(0.7, 1.2)
                    centre = np.array([math.cos(angle) * dist + (lo[0] + hi[0]) / 2,
                                       math.sin(angle) * dist + (lo[1] + hi[1]) / 2,
                                       lo[2] + half[2]])
                    frags.append(_box_surface(rng, take, half, centre))
                pts = np.vstack([obj, plane] + frags)
            else:
                pts = _yaw(rng, sampler(rng, points))
            pts = pts + rng.normal(0.0, noise, size=pts.shape) if noise > 0 else pts
            clouds.append(normalize_cloud(pts))
            labels.append(c)
    labels = np.array(labels, dtype=np.intp)
    train_idx, test_idx = _stratified_split(labels, seed)
    names = [SHAPE_FAMILIES[c][0] for c in range(classes)]
    return Dataset(clouds=clouds, labels=labels, class_names=names,
                   train_idx=train_idx, test_idx=test_idx)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{DATASET_MAGIC} {len(ds.clouds)} {ds.num_classes}\n")
        for cloud, label in zip(ds.clouds, ds.labels):
            f.write(f"cloud {int(label)} {cloud.shape[0]}\n")
            for x, y, z in cloud:
                f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def load_dataset(path, target_points: int | None = None, seed: int = 0) -> Dataset:
    """Parse a dataset file, subsampling oversized clouds and validating shape.

    Clouds violating the normalization invariants are renormalized with a
    warning; subsampled clouds are renormalized silently (dropping points
    moves the centroid).
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: line 1: empty file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != DATASET_MAGIC:
        raise ParseError(f"{path}: line 1: expected '{DATASET_MAGIC} <clouds> <classes>'")
    try:
        n_clouds, n_classes = int(head[1]), int(head[2])
    except ValueError:
        raise ParseError(f"{path}: line 1: counts must be integers") from None
    clouds, labels = [], []
    ln = 1
    for ci in range(n_clouds):
        if ln >= len(lines):
            raise ParseError(f"{path}: line {ln + 1}: truncated; expected cloud {ci}")
        parts = lines[ln].split()
        if len(parts) != 3 or parts[0] != "cloud":
            raise ParseError(f"{path}: line {ln + 1}: expected 'cloud <label> <points>'")
        try:
            label, npts = int(parts[1]), int(parts[2])
        except ValueError:
            raise ParseError(f"{path}: line {ln + 1}: label/count must be integers") from None
        if not 0 <= label < n_classes:
            raise ParseError(f"{path}: line {ln + 1}: label {label} outside 0..{n_classes - 1}")
        if npts < 1:
            raise ParseError(f"{path}: line {ln + 1}: cloud must have at least one point")
        ln += 1
        if ln + npts > len(lines):
            raise ParseError(f"{path}: line {len(lines) + 1}: truncated inside cloud {ci} "
                             f"(expected {npts} points)")
        block = np.empty((npts, 3))
        for r in range(npts):
            cols = lines[ln + r].split()
            if len(cols) != 3:
                raise ParseError(f"{path}: line {ln + r + 1}: expected 3 coordinates")
            try:
                block[r] = [float(c) for c in cols]
            except ValueError:
                raise ParseError(f"{path}: line {ln + r + 1}: bad float") from None
        ln += npts
        if not np.all(np.isfinite(block)):
            raise ParseError(f"{path}: cloud {ci}: non-finite coordinate")
        resampled = False
        if target_points is not None and npts > target_points:
            rng = derive_rng(seed, SUBSAMPLE, ci)
            keep = np.sort(rng.choice(npts, size=target_points, replace=False))
            block = block[keep]
            resampled = True
        if target_points is not None and block.shape[0] < target_points:
            raise ArgumentError(
                f"{path}: cloud {ci} has {block.shape[0]} points, fewer than required {target_points}"
            )
        centroid = np.abs(block.mean(axis=0)).max()
        extent = np.sqrt((block ** 2).sum(axis=1)).max()
        if resampled:
            block = normalize_cloud(block)
        elif centroid > 1e-9 or abs(extent - 1.0) > 1e-9:
            warnings.warn(f"{path}: cloud {ci} not normalized (centroid {centroid:.2e}, "
                          f"max norm {extent:.6f}); renormalizing")
            block = normalize_cloud(block)
        clouds.append(block)
        labels.append(label)
    if ln != len(lines):
        raise ParseError(f"{path}: line {ln + 1}: trailing data after last cloud")
    labels = np.array(labels, dtype=np.intp)
    train_idx, test_idx = _stratified_split(labels, seed)
    names = [f"class_{c}" for c in range(n_classes)]
    return Dataset(clouds=clouds, labels=labels, class_names=names,
                   train_idx=train_idx, test_idx=test_idx)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _default_layers() -> list[LayerConfig]:
    return [
        LayerConfig(n_centers=128, radius=0.2, k=16, mlp_widths=(64,)),
        LayerConfig(n_centers=32, radius=0.4, k=16, mlp_widths=(128,)),
    ]


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 60
    batch_size: int = 16
    lr: float = 0.01
    lr_decay: float = 1.0
    momentum: float = 0.9
    alpha1: float = 0.01
    alpha2: float = 0.01
    points: int = 1024
    data: str = "synthetic"
    synth_classes: int = 3
    synth_per_class: int = 100
    synth_noise: float = 0.01
    synth_clutter: bool = False
    layers: list[LayerConfig] = field(default_factory=_default_layers)
    global_mlp: tuple = (256,)
    head: tuple = (128,)


def _parse_widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"bad width list {text!r}") from None


def parse_csm_value(text: str):
    if text == "off":
        return None
    parts = text.split(":")
    try:
        variant = int(parts[0])
    except ValueError:
        raise ConfigError(f"bad csm value {text!r}") from None
    if variant not in (1, 2, 3, 4, 5):
        raise ConfigError(f"csm variant must be 1..5 or off, got {text!r}")
    setting = CsmSetting(variant=variant)
    if len(parts) == 2:
        if variant == 2:
            setting.sim = parts[1]
            if setting.sim not in ("sub", "sum", "cat", "dot", "hadamard"):
                raise ConfigError(f"bad csm similarity in {text!r}")
        elif variant == 3:
            try:
                setting.u = int(parts[1])
            except ValueError:
                raise ConfigError(f"bad csm u value in {text!r}") from None
        else:
            raise ConfigError(f"variant {variant} takes no option, got {text!r}")
    elif len(parts) > 2:
        raise ConfigError(f"bad csm value {text!r}")
    return setting


def parse_rum_value(text: str):
    if text == "off":
        return None
    parts = text.split(":")
    if len(parts) != 2:
        raise ConfigError(f"rum value must be 'off' or VARIANT:AGG, got {text!r}")
    try:
        variant = int(parts[0])
    except ValueError:
        raise ConfigError(f"bad rum value {text!r}") from None
    if variant not in (1, 2) or parts[1] not in ("cum", "max"):
        raise ConfigError(f"bad rum value {text!r}")
    return RumSetting(variant=variant, agg=parts[1])


def _parse_layer(value: str, base: LayerConfig) -> LayerConfig:
    cfg = copy.deepcopy(base)
    for tok in value.split():
        if "=" not in tok:
            raise ConfigError(f"bad layer token {tok!r}")
        key, val = tok.split("=", 1)
        if key == "n":
            cfg.n_centers = int(val)
        elif key == "r":
            cfg.radius = float(val)
        elif key == "k":
            cfg.k = int(val)
        elif key == "mlp":
            cfg.mlp_widths = _parse_widths(val)
        elif key == "csm":
            cfg.csm = parse_csm_value(val)
        elif key == "csm_k":
            if cfg.csm is None:
                raise ConfigError("csm_k given but csm is off")
            cfg.csm.k = int(val)
        elif key == "rum":
            cfg.rum = parse_rum_value(val)
        elif key == "rum_shells":
            if cfg.rum is None:
                raise ConfigError("rum_shells given but rum is off")
            cfg.rum.t_shells = int(val)
        elif key == "rum_smax":
            if cfg.rum is None:
                raise ConfigError("rum_smax given but rum is off")
            cfg.rum.s_max = int(val)
        elif key == "rum_scale":
            if cfg.rum is None:
                raise ConfigError("rum_scale given but rum is off")
            if val not in ("on", "off"):
                raise ConfigError(f"rum_scale must be on/off, got {val!r}")
            cfg.rum.scale_by_radius = val == "on"
        else:
            raise ConfigError(f"unknown layer key {key!r}")
    return cfg


def _format_csm(setting) -> str:
    if setting is None:
        return "off"
    if setting.variant == 2:
        base = f"2:{setting.sim}"
    elif setting.variant == 3:
        base = f"3:{setting.u}"
    else:
        base = str(setting.variant)
    return base


def _format_layer(cfg: LayerConfig) -> str:
    toks = [f"n={cfg.n_centers}", f"r={cfg.radius!r}", f"k={cfg.k}",
            "mlp=" + ",".join(str(w) for w in cfg.mlp_widths),
            f"csm={_format_csm(cfg.csm)}"]
    if cfg.csm is not None and cfg.csm.k is not None:
        toks.append(f"csm_k={cfg.csm.k}")
    if cfg.rum is None:
        toks.append("rum=off")
    else:
        toks.append(f"rum={cfg.rum.variant}:{cfg.rum.agg}")
        toks.append(f"rum_shells={cfg.rum.t_shells}")
        toks.append(f"rum_smax={cfg.rum.s_max}")
        toks.append(f"rum_scale={'on' if cfg.rum.scale_by_radius else 'off'}")
    return " ".join(toks)


_SCALAR_KEYS = {
    "seed": int,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "lr_decay": float,
    "momentum": float,
    "alpha1": float,
    "alpha2": float,
    "points": int,
    "synth_classes": int,
    "synth_per_class": int,
    "synth_noise": float,
}


def parse_config(text: str) -> RunConfig:
    """Flat `key = value` configuration; unknown keys are errors."""
    run = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _SCALAR_KEYS:
            try:
                setattr(run, key, _SCALAR_KEYS[key](value))
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
        elif key == "data":
            run.data = value
        elif key == "synth_clutter":
            if value not in ("on", "off"):
                raise ConfigError(f"line {lineno}: synth_clutter must be on/off")
            run.synth_clutter = value == "on"
        elif key == "layer1":
            run.layers[0] = _parse_layer(value, run.layers[0])
        elif key == "layer2":
            run.layers[1] = _parse_layer(value, run.layers[1])
        elif key == "global_mlp":
            run.global_mlp = _parse_widths(value)
        elif key == "head":
            run.head = _parse_widths(value)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return run


def format_config(run: RunConfig) -> str:
    """Canonical serialization; parse_config(format_config(r)) == r."""
    lines = [
        f"seed = {run.seed}",
        f"epochs = {run.epochs}",
        f"batch_size = {run.batch_size}",
        f"lr = {run.lr!r}",
        f"lr_decay = {run.lr_decay!r}",
        f"momentum = {run.momentum!r}",
        f"alpha1 = {run.alpha1!r}",
        f"alpha2 = {run.alpha2!r}",
        f"points = {run.points}",
        f"data = {run.data}",
        f"synth_classes = {run.synth_classes}",
        f"synth_per_class = {run.synth_per_class}",
        f"synth_noise = {run.synth_noise!r}",
        f"synth_clutter = {'on' if run.synth_clutter else 'off'}",
        f"layer1 = {_format_layer(run.layers[0])}",
        f"layer2 = {_format_layer(run.layers[1])}",
        "global_mlp = " + ",".join(str(w) for w in run.global_mlp),
        "head = " + ",".join(str(w) for w in run.head),
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    acc: float
    macc: float
    confusion: np.ndarray
    predictions: np.ndarray


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    config_path: Path
    history: list[dict]


def get_dataset(run: RunConfig) -> Dataset:
    if run.data == "synthetic":
        return generate_synthetic(run.synth_classes, run.synth_per_class, run.points,
                                  run.synth_noise, run.synth_clutter, run.seed)
    return load_dataset(run.data, target_points=run.points, seed=run.seed)


def build_model_from_config(run: RunConfig, n_classes: int) -> Model:
    return build_model(run.layers, run.global_mlp, run.head, n_classes, run.seed)


def evaluate_model(model: Model, ds: Dataset, split: str, seed: int) -> EvalResult:
    """Accuracy, class-mean accuracy, and the confusion matrix on a split.

    Evaluation always samples with the epoch-0 streams, so results for a
    fixed model do not depend on how many epochs were trained.
    """
    idx = ds.split_indices(split)
    c = ds.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    preds = np.empty(idx.size, dtype=np.intp)
    for pos, obj in enumerate(idx):
        logits, _ = classify(ds.clouds[obj], model, SampleRng(seed, 0, int(obj)))
        pred = int(np.argmax(logits.data))
        preds[pos] = pred
        confusion[ds.labels[obj], pred] += 1
    total = confusion.sum()
    acc = float(confusion.trace() / total) if total else 0.0
    per_class = []
    for cl in range(c):
        row = confusion[cl].sum()
        if row:
            per_class.append(confusion[cl, cl] / row)
    macc = float(np.mean(per_class)) if per_class else 0.0
    return EvalResult(acc=acc, macc=macc, confusion=confusion, predictions=preds)


def _format_row(values: dict) -> str:
    return ",".join([
        str(values["epoch"]),
        repr(values["train_loss"]),
        repr(values["ce"]),
        repr(values["fit"]),
        repr(values["range"]),
        repr(values["rum"]),
        repr(values["train_acc"]),
        repr(values["test_acc"]),
        repr(values["test_macc"]),
    ])


def train(run: RunConfig, out_dir) -> TrainResult:
    """Minibatch momentum SGD on the composite loss; writes metrics + checkpoint.

    Per-epoch metrics rows hold epoch means of the loss terms, the running
    training accuracy, and test accuracy/MAcc under the fixed eval streams.
    Aborts with NonFiniteError if any forward pass goes non-finite, naming
    the first offending operation.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = get_dataset(run)
    model = build_model_from_config(run, ds.num_classes)
    blocks = model.blocks()
    opt = MomentumSgd(blocks, lr=run.lr, momentum=run.momentum)
    metrics_path = out_dir / "metrics.csv"
    history: list[dict] = []
    with open(metrics_path, "w", encoding="utf-8") as mf:
        mf.write(METRICS_COLUMNS + "\n")
        for epoch in range(1, run.epochs + 1):
            opt.lr = run.lr * (run.lr_decay ** (epoch - 1))
            order = ds.train_idx[derive_rng(run.seed, TRAIN_ORDER, epoch).permutation(ds.train_idx.size)]
            sums = {"train_loss": 0.0, "ce": 0.0, "fit": 0.0, "range": 0.0, "rum": 0.0}
            correct = 0
            for start in range(0, order.size, run.batch_size):
                batch = order[start : start + run.batch_size]
                opt.zero_grads()
                for obj in batch:
                    obj = int(obj)
                    cloud = ds.clouds[obj]
                    perm = derive_rng(run.seed, POINT_SHUFFLE, epoch, obj).permutation(cloud.shape[0])
                    srng = SampleRng(run.seed, epoch, obj)
                    with Tape() as tape:
                        logits, records = classify(cloud[perm], model, srng)
                        terms = collect_loss_terms(logits, int(ds.labels[obj]), records,
                                                   run.alpha1, run.alpha2)
                        total = total_loss(terms)
                        if not np.isfinite(total.data):
                            bad = tape.first_nonfinite() or "total_loss"
                            raise NonFiniteError(
                                f"epoch {epoch}, object {obj}: non-finite loss; "
                                f"first non-finite tensor came from op {bad!r}"
                            )
                        backward(scale(total, 1.0 / batch.size), tape, blocks)
                    comps = terms.component_values()
                    sums["train_loss"] += float(total.data)
                    for key in ("ce", "fit", "range", "rum"):
                        sums[key] += comps[key]
                    if int(np.argmax(logits.data)) == int(ds.labels[obj]):
                        correct += 1
                opt.step()
            test_eval = evaluate_model(model, ds, "test", run.seed)
            row = {
                "epoch": epoch,
                "train_loss": sums["train_loss"] / order.size,
                "ce": sums["ce"] / order.size,
                "fit": sums["fit"] / order.size,
                "range": sums["range"] / order.size,
                "rum": sums["rum"] / order.size,
                "train_acc": correct / order.size,
                "test_acc": test_eval.acc,
                "test_macc": test_eval.macc,
            }
            history.append(row)
            mf.write(_format_row(row) + "\n")
            mf.flush()
    checkpoint_path = out_dir / "checkpoint.lrl"
    save_checkpoint(checkpoint_path, blocks)
    config_path = out_dir / "config.txt"
    config_path.write_text(format_config(run), encoding="utf-8")
    return TrainResult(checkpoint_path=checkpoint_path, metrics_path=metrics_path,
                       config_path=config_path, history=history)


def load_model(checkpoint_path, run: RunConfig, n_classes: int) -> Model:
    model = build_model_from_config(run, n_classes)
    model.load_weights(load_checkpoint(checkpoint_path))
    return model


def evaluate_checkpoint(checkpoint_path, run: RunConfig, ds: Dataset, split: str) -> EvalResult:
    model = load_model(checkpoint_path, run, ds.num_classes)
    return evaluate_model(model, ds, split, run.seed)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

_GRID_KEYS = {"layer1.csm", "layer2.csm", "layer1.rum", "layer2.rum"}


def parse_grid(text: str) -> list[tuple[str, dict]]:
    """Grid lines: `name: layer2.csm=1 layer2.rum=1:max`.

    Only module-placement keys are allowed; anything else (seed, dataset,
    optimizer) must stay shared across the grid and is rejected.
    """
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ParseError(f"grid line {lineno}: expected 'name: overrides'")
        name, rest = (s.strip() for s in line.split(":", 1))
        if not name:
            raise ParseError(f"grid line {lineno}: empty entry name")
        overrides = {}
        for tok in rest.split():
            if "=" not in tok:
                raise ParseError(f"grid line {lineno}: bad token {tok!r}")
            key, value = tok.split("=", 1)
            if key not in _GRID_KEYS:
                raise ConfigError(
                    f"grid line {lineno}: key {key!r} not allowed; grid entries may only "
                    f"place modules ({sorted(_GRID_KEYS)}); seed and dataset are shared"
                )
            overrides[key] = value
        entries.append((name, overrides))
    if not entries:
        raise ParseError("grid file has no entries")
    return entries


def apply_grid_overrides(run: RunConfig, overrides: dict) -> RunConfig:
    cfg = copy.deepcopy(run)
    for key, value in overrides.items():
        layer = 0 if key.startswith("layer1") else 1
        if key.endswith(".csm"):
            cfg.layers[layer].csm = parse_csm_value(value)
        else:
            cfg.layers[layer].rum = parse_rum_value(value)
    return cfg


def strip_modules(run: RunConfig) -> RunConfig:
    cfg = copy.deepcopy(run)
    for layer in cfg.layers:
        layer.csm = None
        layer.rum = None
    return cfg


def ablation_grid(run: RunConfig, entries: list[tuple[str, dict]], out_dir) -> list[dict]:
    """Train/evaluate each entry on the shared seed and dataset.

    Emits `ablation.csv` with accuracy deltas against the all-off baseline,
    which is always trained first.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    baseline_cfg = strip_modules(run)
    base_result = train(baseline_cfg, out_dir / "baseline")
    ds = get_dataset(baseline_cfg)
    base_eval = evaluate_checkpoint(base_result.checkpoint_path, baseline_cfg, ds, "test")
    rows = [{
        "name": "baseline",
        "acc": base_eval.acc,
        "macc": base_eval.macc,
        "delta_acc": 0.0,
        "delta_macc": 0.0,
    }]
    for name, overrides in entries:
        cfg = apply_grid_overrides(run, overrides)
        result = train(cfg, out_dir / name)
        ev = evaluate_checkpoint(result.checkpoint_path, cfg, ds, "test")
        rows.append({
            "name": name,
            "acc": ev.acc,
            "macc": ev.macc,
            "delta_acc": ev.acc - base_eval.acc,
            "delta_macc": ev.macc - base_eval.macc,
        })
    table = out_dir / "ablation.csv"
    with open(table, "w", encoding="utf-8") as f:
        f.write("name,acc,macc,delta_acc,delta_macc\n")
        for row in rows:
            f.write(f"{row['name']},{row['acc']!r},{row['macc']!r},"
                    f"{row['delta_acc']!r},{row['delta_macc']!r}\n")
    return rows


def dump_regions(model: Model, ds: Dataset, cloud_index: int, seed: int, out_path) -> int:
    """Write `layer,center_index,cx,cy,cz,dx,dy,dz,r,dr` lines for one cloud."""
    if not 0 <= cloud_index < len(ds.clouds):
        raise ArgumentError(f"cloud index {cloud_index} out of range")
    _, records = classify(ds.clouds[cloud_index], model, SampleRng(seed, 0, cloud_index))
    n = 0
    with open(out_path, "w", encoding="utf-8") as f:
        for rec in records:
            m = rec.base_centers.shape[0]
            shifts = rec.shifts.data if rec.shifts is not None else np.zeros((m, 3))
            deltas = (rec.deltas.data.tolist() if rec.deltas is not None
                      else [0.0] * m)
            for j in range(m):
                cx, cy, cz = (float(v) for v in rec.base_centers[j])
                dx, dy, dz = (float(v) for v in shifts[j])
                f.write(f"{rec.layer_index},{j},{cx!r},{cy!r},{cz!r},"
                        f"{dx!r},{dy!r},{dz!r},{float(rec.layer_radius)!r},{deltas[j]!r}\n")
                n += 1
    return n
