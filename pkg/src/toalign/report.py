"""Static artifacts: aggregate CSV, per-epoch JSON lines, SVG curves, PGM heatmaps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .autodiff import ContractError, Tensor
from .data import Dataset
from .decompose import class_gradient, spatial_response_map
from .nets import Nets
from .train import EpochRecord, ExperimentRecord

RESULT_COLUMNS = ["method", "seeds", "mean_acc", "std_acc", "mean_lcls", "mean_ld", "failures"]


@dataclass
class AggregateRow:
    method: str
    seeds: int
    mean_acc: float
    std_acc: float
    mean_lcls: float
    mean_ld: float
    failures: int = 0


def aggregate(records: list[ExperimentRecord], failures: dict[str, int] | None = None) -> list[AggregateRow]:
    """Mean and population std of final target accuracy per method, sorted by name."""
    failures = dict(failures or {})
    lengths = {len(r.epochs) for r in records}
    if len(lengths) > 1:
        raise ContractError(f"records have mixed epoch counts: {sorted(lengths)}")
    by_method: dict[str, list[ExperimentRecord]] = {}
    for r in records:
        by_method.setdefault(r.method, []).append(r)
    rows = []
    for method in sorted(set(by_method) | set(failures)):
        recs = by_method.get(method, [])
        if not recs:
            rows.append(AggregateRow(method, 0, float("nan"), float("nan"), float("nan"), float("nan"), failures[method]))
            continue
        acc = np.array([r.final.target_acc for r in recs])
        lcls = np.array([np.nan if r.final.l_cls is None else r.final.l_cls for r in recs])
        ld = np.array([np.nan if r.final.l_d is None else r.final.l_d for r in recs])
        rows.append(
            AggregateRow(
                method=method,
                seeds=len(recs),
                mean_acc=float(acc.mean()),
                std_acc=float(acc.std()),
                mean_lcls=float(lcls.mean()),
                mean_ld=float(ld.mean()),
                failures=failures.get(method, 0),
            )
        )
    return rows


def write_results_csv(rows: list[AggregateRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow([r.method, r.seeds, repr(r.mean_acc), repr(r.std_acc), repr(r.mean_lcls), repr(r.mean_ld), r.failures])


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_jsonl(record: ExperimentRecord, path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in record.jsonl_rows():
            fh.write(json.dumps(row) + "\n")


def read_jsonl(path: str | Path) -> ExperimentRecord:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path}: no records")
    rec = ExperimentRecord(rows[0]["method"], int(rows[0]["seed"]))
    for row in rows:
        rec.epochs.append(
            EpochRecord(
                epoch=int(row["epoch"]),
                l_cls=row["l_cls"],
                l_d=row["l_d"],
                target_acc=float(row["target_acc"]),
                degenerate_decomp_count=int(row["degenerate_decomp_count"]),
            )
        )
    return rec


# ---------------------------------------------------------------------------
# SVG accuracy curves

PALETTE = ["#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


def mean_curves(records: list[ExperimentRecord]) -> dict[str, np.ndarray]:
    """Seed-averaged target accuracy per epoch, keyed by method (sorted)."""
    grouped: dict[str, list[list[float]]] = {}
    for r in records:
        grouped.setdefault(r.method, []).append([e.target_acc for e in r.epochs])
    out = {}
    for method in sorted(grouped):
        runs = grouped[method]
        n = min(len(c) for c in runs)
        out[method] = np.mean([c[:n] for c in runs], axis=0) if n else np.zeros(0)
    return out


def emit_svg_curves(records: list[ExperimentRecord], path: str | Path, width: int = 640, height: int = 400) -> None:
    """One polyline per method (seed mean), epoch on x, target accuracy on y."""
    curves = mean_curves(records)
    left, right, top, bottom = 60, 170, 20, 50
    pw, ph = width - left - right, height - top - bottom
    n_epochs = max((len(c) for c in curves.values()), default=0)
    x_max = max(n_epochs - 1, 1)

    def px(epoch: float) -> float:
        return left + pw * epoch / x_max

    def py(acc: float) -> float:
        return top + ph * (1.0 - acc)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line class="axis" x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for tick in np.linspace(0.0, 1.0, 6):
        y = py(tick)
        parts.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">{tick:.1f}</text>')
    step = max(1, x_max // 10)
    for e in range(0, x_max + 1, step):
        x = px(e)
        parts.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.2f}" y="{top + ph + 18}" text-anchor="middle">{e}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">epoch</text>')
    parts.append(
        f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 15 {top + ph / 2:.1f})">target accuracy</text>'
    )
    for i, (method, curve) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        if len(curve):
            pts = " ".join(f"{px(e):.2f},{py(a):.2f}" for e, a in enumerate(curve))
            parts.append(
                f'<polyline data-method="{escape(method)}" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>'
            )
        ly = top + 10 + 18 * i
        lx = left + pw + 15
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text class="legend" x="{lx + 26}" y="{ly + 4}">{escape(method)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# heatmaps


def write_pgm(image: np.ndarray, path: str | Path) -> None:
    """8-bit binary greyscale PGM (P5) of an array with values in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos].decode("ascii"))
    if fields[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    return np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


@dataclass
class HeatmapSample:
    index: int
    label: int
    image: np.ndarray  # [H, W], first channel
    pos_raw: np.ndarray
    neg_raw: np.ndarray
    pos: np.ndarray
    neg: np.ndarray


def heatmap_samples(nets: Nets, dataset: Dataset, n: int = 8, seed: int = 0) -> list[HeatmapSample]:
    """Positive/negative response maps for ``n`` labelled images drawn with ``seed``.

    Channel weights are the gradient of each image's ground-truth logit.
    """
    if not dataset.labeled:
        raise ContractError("heatmaps need labelled samples")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(dataset), size=min(n, len(dataset)), replace=False))
    was_training = nets.training
    nets.eval()
    try:
        fmap, f = nets.G(Tensor(dataset.x[idx]))
        w = class_gradient(f, nets.C, dataset.labels[idx])
    finally:
        nets.training = was_training
    out = []
    for j, i in enumerate(idx):
        F, wj = fmap.data[j], w.data[j]
        out.append(
            HeatmapSample(
                index=int(i),
                label=int(dataset.labels[i]),
                image=dataset.x[i, 0],
                pos_raw=spatial_response_map(F, wj, +1, normalize=False),
                neg_raw=spatial_response_map(F, wj, -1, normalize=False),
                pos=spatial_response_map(F, wj, +1),
                neg=spatial_response_map(F, wj, -1),
            )
        )
    return out


def write_heatmaps(samples: list[HeatmapSample], out_dir: str | Path) -> list[Path]:
    """``sample<i>_{input,pos,neg}.pgm`` plus ``heatmaps.csv`` with raw values."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    rows = []
    for s in samples:
        stem = f"sample{s.index:04d}_class{s.label}"
        for tag, img in (("input", s.image), ("pos", s.pos), ("neg", s.neg)):
            p = out_dir / f"{stem}_{tag}.pgm"
            write_pgm(img, p)
            written.append(p)
        for sign, raw, norm in (("pos", s.pos_raw, s.pos), ("neg", s.neg_raw, s.neg)):
            for (r, c), v in np.ndenumerate(raw):
                rows.append([s.index, s.label, sign, r, c, repr(float(v)), repr(float(norm[r, c]))])
    csv_path = out_dir / "heatmaps.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "label", "sign", "row", "col", "raw", "normalized"])
        writer.writerows(rows)
    written.append(csv_path)
    return written


def foreground_cells(pixel_mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Feature-map cells whose pixel block lies mostly inside the foreground mask."""
    h, w = pixel_mask.shape
    gh, gw = grid
    blocks = pixel_mask.reshape(gh, h // gh, gw, w // gw).mean(axis=(1, 3))
    return blocks > 0.5
