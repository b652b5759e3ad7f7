"""Experiment matrices: config parsing, (method, seed) cells, artifact emission.

Config files are INI documents with three sections::

    [experiment]
    methods = SourceOnly, DANN, ToAlign_DANN, TiAlign_DANN
    seeds = 0, 1, 2, 3, 4
    out = out/default
    heatmap_samples = 8

    [train]
    eta0 = 0.03
    epochs = 40

    [data]
    target_bg = 0.8

``[train]`` accepts the fields of ``TrainConfig`` except ``method`` and
``seed``; ``[data]`` accepts those of ``SyntheticConfig`` except ``seed``
(``image_size`` is written ``C, H, W``). Every cell uses its run seed for
both the data and the networks. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .autodiff import ConfigError
from .data import DomainSplits, SyntheticConfig, generate
from .nets import load_state_dict, state_dict
from .train import ExperimentRecord, Method, TrainConfig, build_nets, train_loop
from . import report

log = logging.getLogger(__name__)

EXPERIMENT_KEYS = {"methods", "seeds", "out", "heatmap_samples"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"method", "seed"}
DATA_KEYS = {f.name for f in dataclasses.fields(SyntheticConfig)} - {"seed"}
DEFAULT_OUT = "toalign_out"


@dataclass
class ExperimentMatrix:
    methods: list[Method]
    seeds: list[int]
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    out: Path = Path(DEFAULT_OUT)
    heatmap_samples: int = 8

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.methods)) != len(self.methods) or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("methods and seeds must not repeat")
        if self.heatmap_samples < 0:
            raise ConfigError("heatmap_samples must be >= 0")

    def train_config(self, method: Method, seed: int) -> TrainConfig:
        return TrainConfig(method=method, seed=seed, **self.train)

    def data_config(self, seed: int) -> SyntheticConfig:
        cfg = SyntheticConfig(seed=seed, **self.data)
        cfg.validate()
        return cfg

    def cells(self) -> list[tuple[Method, int]]:
        return [(m, s) for m in self.methods for s in self.seeds]


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.split(","))
    return value


def _section(parser, name: str, allowed: set[str], defaults) -> dict:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in allowed:
            raise ConfigError(f"[{name}] unknown key {key!r} (allowed: {', '.join(sorted(allowed))})")
        try:
            out[key] = _coerce(raw.strip(), getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from None
    return out


def parse_config(text: str) -> ExperimentMatrix:
    """Parse and validate an INI experiment description."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(parser.sections()) - {"experiment", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    if not parser.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    exp = dict(parser.items("experiment"))
    bad = set(exp) - EXPERIMENT_KEYS
    if bad:
        raise ConfigError(f"[experiment] unknown key(s): {', '.join(sorted(bad))}")
    try:
        methods = [Method(m.strip()) for m in exp.get("methods", "").split(",") if m.strip()]
    except ValueError as exc:
        raise ConfigError(f"[experiment] methods: {exc}") from None
    try:
        seeds = [int(s) for s in exp.get("seeds", "").split(",") if s.strip()]
        heatmap_samples = int(exp.get("heatmap_samples", 8))
    except ValueError as exc:
        raise ConfigError(f"[experiment] {exc}") from None
    train = _section(parser, "train", TRAIN_KEYS, TrainConfig())
    data = _section(parser, "data", DATA_KEYS, SyntheticConfig())
    matrix = ExperimentMatrix(
        methods=methods,
        seeds=seeds,
        train=train,
        data=data,
        out=Path(exp.get("out", DEFAULT_OUT)),
        heatmap_samples=heatmap_samples,
    )
    # surface value errors now rather than inside a worker
    try:
        matrix.train_config(methods[0], seeds[0])
        matrix.data_config(seeds[0])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return matrix


def load_config(path: str | Path) -> ExperimentMatrix:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


@dataclass
class CellResult:
    method: str
    seed: int
    record: ExperimentRecord | None
    state: dict | None
    error: str | None = None


def run_cell(matrix: ExperimentMatrix, method: Method, seed: int) -> CellResult:
    """Train one (method, seed) cell; never raises."""
    try:
        data = generate(matrix.data_config(seed))
        record, nets = train_loop(matrix.train_config(method, seed), data, return_nets=True)
        return CellResult(method.value, seed, record, state_dict(nets))
    except Exception:  # noqa: BLE001 - a failed cell is reported, not fatal
        return CellResult(method.value, seed, None, None, traceback.format_exc())


def _run_cell_args(args):
    return run_cell(*args)


def run_matrix(matrix: ExperimentMatrix, jobs: int = 1) -> list[CellResult]:
    """All cells, in (method, seed) order regardless of scheduling."""
    work = [(matrix, m, s) for m, s in matrix.cells()]
    if jobs <= 1:
        return [run_cell(*w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_args, work))


def _cell_stem(method: str, seed: int) -> str:
    return f"{method}_seed{seed}"


def heatmap_cell(matrix: ExperimentMatrix) -> tuple[Method, int]:
    """The first ToAlign method (or the first method) with the first seed."""
    for m in matrix.methods:
        if m.source_view == "positive":
            return m, matrix.seeds[0]
    return matrix.methods[0], matrix.seeds[0]


def emit_heatmaps(matrix: ExperimentMatrix, out: Path, method: Method, seed: int, state: dict) -> list:
    data: DomainSplits = generate(matrix.data_config(seed))
    cfg = matrix.train_config(method, seed)
    nets = build_nets(cfg, data.source_train.x.shape[1], data.config.num_classes)
    load_state_dict(nets, state)
    samples = report.heatmap_samples(nets, data.target_test, matrix.heatmap_samples, seed)
    report.write_heatmaps(samples, out / "heatmaps")
    return samples


def run(matrix: ExperimentMatrix, out: Path | None = None, jobs: int = 1, config_text: str | None = None) -> int:
    """Run every cell and write all artifacts under ``out``; 0 on success, 1 if any cell failed."""
    from . import plotting

    out = Path(out or matrix.out)
    for sub in ("runs", "checkpoints", "figures"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if config_text is not None:
        (out / "config.ini").write_text(config_text)

    results = run_matrix(matrix, jobs)
    records, failures = [], {}
    for res in results:
        stem = _cell_stem(res.method, res.seed)
        if res.error is not None:
            failures[res.method] = failures.get(res.method, 0) + 1
            log.error("cell %s failed:\n%s", stem, res.error)
            (out / "runs" / f"{stem}.error.txt").write_text(res.error)
            continue
        records.append(res.record)
        report.write_jsonl(res.record, out / "runs" / f"{stem}.jsonl")
        save_checkpoint_state(res.state, out / "checkpoints" / f"{stem}.json")
        log.info("%s final target acc %.4f", stem, res.record.final.target_acc)

    rows = report.aggregate(records, failures)
    report.write_results_csv(rows, out / "results.csv")
    report.emit_svg_curves(records, out / "curves.svg")
    if records:
        plotting.plot_curves(records, out / "figures" / "curves.png")

    method, seed = heatmap_cell(matrix)
    hm = next((r for r in results if r.method == method.value and r.seed == seed), None)
    if matrix.heatmap_samples and hm is not None and hm.state is not None:
        samples = emit_heatmaps(matrix, out, method, seed, hm.state)
        plotting.plot_heatmaps(samples, out / "figures" / "heatmaps.png")
    return 1 if failures else 0


def save_checkpoint_state(state: dict, path: Path) -> None:
    path.write_text(json.dumps(state))


def load_records(run_dir: str | Path) -> list[ExperimentRecord]:
    files = sorted((Path(run_dir) / "runs").glob("*.jsonl"))
    return [report.read_jsonl(p) for p in files]


def viz(run_dir: str | Path) -> int:
    """Re-emit curves and heatmaps from the records and checkpoints of a finished run."""
    from . import plotting

    run_dir = Path(run_dir)
    records = load_records(run_dir)
    if not records:
        raise FileNotFoundError(f"no run records under {run_dir / 'runs'}")
    (run_dir / "figures").mkdir(exist_ok=True)
    report.emit_svg_curves(records, run_dir / "curves.svg")
    plotting.plot_curves(records, run_dir / "figures" / "curves.png")
    cfg_path = run_dir / "config.ini"
    if cfg_path.exists():
        matrix = load_config(cfg_path)
        method, seed = heatmap_cell(matrix)
        ckpt = run_dir / "checkpoints" / f"{_cell_stem(method.value, seed)}.json"
        if matrix.heatmap_samples and ckpt.exists():
            samples = emit_heatmaps(matrix, run_dir, method, seed, json.loads(ckpt.read_text()))
            plotting.plot_heatmaps(samples, run_dir / "figures" / "heatmaps.png")
    return 0


def gen_data(matrix: ExperimentMatrix, out: Path | None = None) -> list[Path]:
    """Export the three splits of every seed as CSV."""
    from .data import export_csv

    out = Path(out or matrix.out) / "data"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for seed in matrix.seeds:
        splits = generate(matrix.data_config(seed))
        for name in ("source_train", "target_train", "target_test"):
            p = out / f"seed{seed}_{name}.csv"
            export_csv(getattr(splits, name), p)
            written.append(p)
    return written

