"""Seeded two-domain image datasets with planted foreground/background structure.

Each image has a class-specific shape inside a fixed central window (the
foreground) and a domain-specific texture everywhere outside it (the
background). Source backgrounds are faint uniform noise; target backgrounds
are bright stripes. The class is recoverable from the foreground alone, so
the domain shift lives entirely in a task-irrelevant component.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("disk", "cross", "bar", "ring", "square", "hbar")
SOURCE, TARGET = "source", "target"
UNLABELED = -1


class DataConfigError(ValueError):
    pass


class CSVParseError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 3
    image_size: tuple[int, int, int] = (1, 16, 16)
    n_source: int = 100
    n_target_train: int = 100
    n_target_test: int = 50
    source_bg: float = 0.2
    target_bg: float = 0.5
    stripe_period: int = 2
    fg_intensity: float = 1.0
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.num_classes <= len(SHAPES):
            raise DataConfigError(f"num_classes must be in [1, {len(SHAPES)}], got {self.num_classes}")
        for name in ("n_source", "n_target_train", "n_target_test"):
            if getattr(self, name) < 1:
                raise DataConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        c, h, w = self.image_size
        if c < 1 or h < 8 or w < 8 or h % 4 or w % 4:
            raise DataConfigError(f"image_size must be C x H x W with H, W >= 8 and divisible by 4, got {self.image_size}")
        if self.stripe_period < 2:
            raise DataConfigError("stripe_period must be >= 2")
        if self.noise_sigma < 0:
            raise DataConfigError("noise_sigma must be >= 0")

    @property
    def foreground_box(self) -> tuple[slice, slice]:
        """Rows/cols of the central window holding the foreground shape."""
        _, h, w = self.image_size
        return slice(h // 4, h - h // 4), slice(w // 4, w - w // 4)

    def foreground_mask(self) -> np.ndarray:
        _, h, w = self.image_size
        mask = np.zeros((h, w), dtype=bool)
        mask[self.foreground_box] = True
        return mask


@dataclass
class Dataset:
    x: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # int, UNLABELED for unlabeled rows
    domains: np.ndarray  # str, SOURCE or TARGET

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def labeled(self) -> bool:
        return bool(np.all(self.labels >= 0))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.labels[idx], self.domains[idx])


@dataclass
class DomainSplits:
    source_train: Dataset
    target_train: Dataset
    target_test: Dataset
    config: SyntheticConfig = field(default_factory=SyntheticConfig)


def shape_template(name: str, size: int) -> np.ndarray:
    """Binary ``size x size`` mask of one of :data:`SHAPES`."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = np.hypot(yy - c, xx - c)
    t = max(1, size // 4)  # stroke thickness
    lo, hi = size // 2 - t // 2 - t % 2, size // 2 + t // 2
    if name == "disk":
        m = r <= size * 0.4
    elif name == "cross":
        m = ((yy >= lo) & (yy < hi)) | ((xx >= lo) & (xx < hi))
    elif name == "bar":
        m = np.abs(yy - xx) <= t // 2
    elif name == "ring":
        m = (r <= size * 0.45) & (r >= size * 0.45 - t)
    elif name == "square":
        m = (np.minimum(np.minimum(yy, xx), np.minimum(size - 1 - yy, size - 1 - xx)) < t)
    elif name == "hbar":
        m = (yy >= lo) & (yy < hi)
    else:
        raise DataConfigError(f"unknown shape {name!r}")
    return m.astype(np.float64)


def class_templates(cfg: SyntheticConfig) -> np.ndarray:
    """Noise-free foreground images ``[K, H, W]`` (zero outside the window)."""
    _, h, w = cfg.image_size
    rows, cols = cfg.foreground_box
    size = min(rows.stop - rows.start, cols.stop - cols.start)
    out = np.zeros((cfg.num_classes, h, w))
    for k in range(cfg.num_classes):
        out[k, rows.start : rows.start + size, cols.start : cols.start + size] = (
            cfg.fg_intensity * shape_template(SHAPES[k], size)
        )
    return out


def background(cfg: SyntheticConfig, domain: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Domain texture ``[n, C, H, W]``, zero inside the foreground window."""
    c, h, w = cfg.image_size
    if domain == SOURCE:
        bg = rng.uniform(0.0, cfg.source_bg, size=(n, c, h, w))
    elif domain == TARGET:
        cols = np.arange(w)
        stripes = ((cols % cfg.stripe_period) < cfg.stripe_period // 2).astype(np.float64)
        phase = rng.integers(0, cfg.stripe_period, size=n)
        bg = np.empty((n, c, h, w))
        for i, ph in enumerate(phase):
            bg[i] = cfg.target_bg * np.roll(stripes, ph)[None, None, :]
    else:
        raise DataConfigError(f"unknown domain {domain!r}")
    bg[..., cfg.foreground_box[0], cfg.foreground_box[1]] = 0.0
    return bg


def render(cfg: SyntheticConfig, labels: np.ndarray, domain: str, rng: np.random.Generator) -> np.ndarray:
    """Images for the given labels with ``domain``'s background, clamped to [0, 1]."""
    labels = np.asarray(labels, dtype=int)
    c = cfg.image_size[0]
    fg = class_templates(cfg)[labels][:, None].repeat(c, axis=1)
    x = fg + background(cfg, domain, len(labels), rng)
    if cfg.noise_sigma > 0:
        x = x + rng.normal(0.0, cfg.noise_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0)


def _balanced_labels(num_classes: int, per_class: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.repeat(np.arange(num_classes), per_class))


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> DomainSplits:
    """Source train (labeled), target train (unlabeled), target test (labeled)."""
    cfg.validate()
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)]
    K = cfg.num_classes

    ys = _balanced_labels(K, cfg.n_source, streams[0])
    source = Dataset(render(cfg, ys, SOURCE, streams[0]), ys, np.full(len(ys), SOURCE))

    yt = _balanced_labels(K, cfg.n_target_train, streams[1])
    target = Dataset(
        render(cfg, yt, TARGET, streams[1]), np.full(len(yt), UNLABELED), np.full(len(yt), TARGET)
    )

    ye = _balanced_labels(K, cfg.n_target_test, streams[2])
    test = Dataset(render(cfg, ye, TARGET, streams[2]), ye, np.full(len(ye), TARGET))
    return DomainSplits(source, target, test, cfg)


def generate_blobs(
    num_classes: int = 3,
    per_class: int = 30,
    image_size: tuple[int, int, int] = (1, 8, 8),
    spread: float = 0.1,
    shift: float = 0.5,
    seed: int = 0,
) -> DomainSplits:
    """Gaussian clusters in pixel space, reshaped to images; for fast tests.

    Each class has a random mean vector in [0.2, 0.8]; the target domain adds
    a fixed offset to the first half of the pixels.
    """
    rng = np.random.default_rng(seed)
    d = int(np.prod(image_size))
    means = rng.uniform(0.2, 0.8, size=(num_classes, d))
    offset = np.zeros(d)
    offset[: d // 2] = shift

    def draw(domain: str, labeled: bool) -> Dataset:
        y = _balanced_labels(num_classes, per_class, rng)
        x = means[y] + rng.normal(0.0, spread, size=(len(y), d))
        if domain == TARGET:
            x = x + offset
        x = np.clip(x, 0.0, 1.0).reshape((len(y),) + tuple(image_size))
        return Dataset(x, y if labeled else np.full(len(y), UNLABELED), np.full(len(y), domain))

    cfg = SyntheticConfig(num_classes=num_classes, image_size=tuple(image_size), seed=seed)
    return DomainSplits(draw(SOURCE, True), draw(TARGET, False), draw(TARGET, True), cfg)


def export_csv(dataset: Dataset, path: str | Path) -> None:
    """Header ``domain,label,pixel_0..pixel_{N-1}``; unlabeled rows carry -1.

    Image shape is not stored; :func:`import_csv` needs it to restore
    ``[N, C, H, W]``.
    """
    n_pix = int(np.prod(dataset.x.shape[1:])) if dataset.x.ndim > 1 else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "label"] + [f"pixel_{i}" for i in range(n_pix)])
        for x, y, d in zip(dataset.x.reshape(len(dataset), n_pix), dataset.labels, dataset.domains):
            writer.writerow([d, int(y)] + [repr(float(v)) for v in x])


def import_csv(path: str | Path, image_size: tuple[int, int, int] | None = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVParseError(f"{path}: line 1: missing header") from None
        if header[:2] != ["domain", "label"]:
            raise CSVParseError(f"{path}: line 1: header must start with domain,label")
        n_pix = len(header) - 2
        xs, ys, ds = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n_pix + 2:
                raise CSVParseError(f"{path}: line {lineno}: expected {n_pix + 2} fields, got {len(row)}")
            if row[0] not in (SOURCE, TARGET):
                raise CSVParseError(f"{path}: line {lineno}: unknown domain {row[0]!r}")
            try:
                ys.append(int(row[1]))
                xs.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise CSVParseError(f"{path}: line {lineno}: {exc}") from None
            ds.append(row[0])
    if image_size is None:
        image_size = (1, int(round(np.sqrt(n_pix))), int(round(np.sqrt(n_pix))))
    if int(np.prod(image_size)) != n_pix:
        raise CSVParseError(f"{path}: {n_pix} pixels do not fit image size {image_size}")
    x = np.array(xs, dtype=np.float64).reshape((len(xs),) + tuple(image_size))
    return Dataset(x, np.array(ys, dtype=int), np.array(ds, dtype=str))


def with_background(splits: DomainSplits, domain: str, seed: int = 0) -> Dataset:
    """Re-render the target test labels with ``domain``'s background."""
    rng = np.random.default_rng(seed)
    y = splits.target_test.labels
    return Dataset(render(splits.config, y, domain, rng), y, np.full(len(y), TARGET))
