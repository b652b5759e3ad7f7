"""Source-only, DANN, DANNP and task-oriented alignment training.

One step updates G, C and D together: the classification loss on labeled
source samples plus the domain loss, with a gradient reversal layer between
the aligned features and D so that G (and, for the probability-conditioned
variants, C) ascends the domain loss while D descends it.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data import Dataset, DomainSplits
from .decompose import class_gradient, positive_features
from .nets import Nets, init_params

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    SourceOnly = "SourceOnly"
    DANN = "DANN"
    DANNP = "DANNP"
    ToAlign_DANN = "ToAlign_DANN"
    ToAlign_DANNP = "ToAlign_DANNP"
    TiAlign_DANN = "TiAlign_DANN"

    @property
    def adversarial(self) -> bool:
        return self is not Method.SourceOnly

    @property
    def conditions_on_probs(self) -> bool:
        return self in (Method.DANNP, Method.ToAlign_DANNP)

    @property
    def source_view(self) -> str:
        """Which source feature D sees: holistic, positive or negative."""
        if self in (Method.ToAlign_DANN, Method.ToAlign_DANNP):
            return "positive"
        if self is Method.TiAlign_DANN:
            return "negative"
        return "holistic"


@dataclass
class TrainConfig:
    method: Method = Method.DANN
    eta0: float = 1e-3
    gamma: float = 10.0
    tau: float = 0.75
    batch_size: int = 32
    epochs: int = 10
    grl_lambda_max: float = 1.0
    momentum: float = 0.9
    seed: int = 0
    feat_dim: int = 32
    disc_hidden: int = 64
    dropout: float = 0.5

    def __post_init__(self):
        self.method = Method(self.method)
        if self.eta0 <= 0:
            raise ad.ConfigError(f"eta0 must be positive, got {self.eta0}")
        if self.batch_size < 2:
            raise ad.ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ad.ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.grl_lambda_max < 0:
            raise ad.ConfigError("grl_lambda_max must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ad.ConfigError("momentum must lie in [0, 1)")


@dataclass
class LossReport:
    l_cls: float
    l_d: float
    step: int
    progress: float
    degenerate: int = 0


@dataclass
class EpochRecord:
    epoch: int
    l_cls: float | None
    l_d: float | None
    target_acc: float
    degenerate_decomp_count: int


@dataclass
class ExperimentRecord:
    method: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1]

    def jsonl_rows(self) -> list[dict]:
        return [{"method": self.method, "seed": self.seed, **asdict(e)} for e in self.epochs]


def lr_at(p: float, cfg: TrainConfig) -> float:
    """Annealed learning rate ``eta0 / (1 + gamma p)^tau``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    return cfg.eta0 / (1.0 + cfg.gamma * p) ** cfg.tau


def grl_lambda_at(p: float, lambda_max: float = 1.0) -> float:
    """Reversal strength warm-up ``lambda_max * (2 / (1 + exp(-10 p)) - 1)``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    return lambda_max * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)


def _domain_loss(p_source: Tensor, p_target: Tensor) -> Tensor:
    if p_source.size == 0 or p_target.size == 0:
        raise ContractError("domain loss needs non-empty source and target batches")
    return ad.add(ad.binary_cross_entropy(p_source, 1.0), ad.binary_cross_entropy(p_target, 0.0))


def domain_loss_baseline(source_feats: Tensor, target_feats: Tensor, D, train=False, rng=None) -> Tensor:
    """Mean ``-log D(f_s)`` over source plus mean ``-log(1 - D(f_t))`` over target."""
    return _domain_loss(D(source_feats, train, rng), D(target_feats, train, rng))


def domain_loss_toalign(source_pos_feats: Tensor, target_feats: Tensor, D, train=False, rng=None) -> Tensor:
    """Same as the baseline with the source positive features standing in for ``f_s``."""
    return domain_loss_baseline(source_pos_feats, target_feats, D, train, rng)


def build_nets(cfg: TrainConfig, in_channels: int, num_classes: int) -> Nets:
    ss = np.random.SeedSequence([cfg.seed, 0])
    disc_in = num_classes if cfg.method.conditions_on_probs else cfg.feat_dim
    return init_params(
        ss,
        in_channels=in_channels,
        num_classes=num_classes,
        feat_dim=cfg.feat_dim,
        disc_in=disc_in,
        disc_hidden=cfg.disc_hidden,
        dropout=cfg.dropout,
    )


WeightFn = Callable[[Tensor, object, np.ndarray], Tensor]


class Trainer:
    """Owns the networks, optimiser state and random streams of one run."""

    def __init__(self, cfg: TrainConfig, nets: Nets, weight_fn: WeightFn = class_gradient):
        self.cfg = cfg
        self.nets = nets
        self.weight_fn = weight_fn
        params = nets.G.parameters() + nets.C.parameters()
        if cfg.method.adversarial:
            params += nets.D.parameters()
        self.params = params
        self.opt = ad.SGD(params, cfg.momentum)
        seqs = np.random.SeedSequence([cfg.seed, 1]).spawn(2)
        self.dropout_rng = np.random.default_rng(seqs[0])
        self.batch_rng = np.random.default_rng(seqs[1])
        self.step_count = 0

    def forward_losses(self, xs, ys, xt, p: float) -> tuple[Tensor, Tensor | None, int]:
        """Classification and domain losses for one source/target batch."""
        cfg, nets = self.cfg, self.nets
        if ys is None or np.any(np.asarray(ys) < 0):
            raise ValueError("every source sample needs a label")
        _, f_s = nets.G(Tensor(xs))
        logits_s = nets.C(f_s)
        l_cls = ad.softmax_cross_entropy(logits_s, ys)
        if not cfg.method.adversarial:
            return l_cls, None, 0

        degenerate = 0
        view = cfg.method.source_view
        if view == "holistic":
            a_s = f_s
        else:
            w = self.weight_fn(f_s, nets.C, ys)
            a_s, _, mask = positive_features(f_s, w)
            degenerate = int(mask.sum())
            if view == "negative":
                a_s = ad.neg(a_s)
        _, f_t = nets.G(Tensor(xt))
        a_t = f_t
        if cfg.method.conditions_on_probs:
            a_s = ad.softmax(logits_s if view == "holistic" else nets.C(a_s))
            a_t = ad.softmax(nets.C(a_t))
        lam = grl_lambda_at(p, cfg.grl_lambda_max)
        l_d = domain_loss_baseline(
            ad.grl(a_s, lam), ad.grl(a_t, lam), nets.D, nets.training, self.dropout_rng
        )
        return l_cls, l_d, degenerate

    def step(self, xs, ys, xt, p: float) -> LossReport:
        l_cls, l_d, degenerate = self.forward_losses(xs, ys, xt, p)
        total = l_cls if l_d is None else ad.add(l_cls, l_d)
        self.opt.zero_grad()
        ad.backward(total)
        self.opt.step(lr_at(p, self.cfg))
        report = LossReport(
            l_cls=l_cls.item(),
            l_d=0.0 if l_d is None else l_d.item(),
            step=self.step_count,
            progress=p,
            degenerate=degenerate,
        )
        self.step_count += 1
        return report


def train_step(batch_s: Dataset, batch_t: Dataset | None, trainer: Trainer, p: float) -> LossReport:
    """One simultaneous G/C/D update on a source batch and a target batch."""
    if not trainer.nets.training:
        raise ContractError("train_step needs the networks in train mode")
    xt = None if batch_t is None else batch_t.x
    if trainer.cfg.method.adversarial and (batch_t is None or len(batch_t) == 0):
        raise ContractError("adversarial methods need a non-empty target batch")
    return trainer.step(batch_s.x, batch_s.labels, xt, p)


def predict(nets: Nets, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    logits = [nets.C(nets.G(Tensor(x[i : i + chunk]))[1]).data for i in range(0, len(x), chunk)]
    return np.argmax(np.concatenate(logits), axis=1)


def evaluate(nets: Nets, dataset: Dataset) -> float:
    """Accuracy of ``argmax C(G(x))`` (ties go to the lowest class index)."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    was_training = nets.training
    nets.eval()
    try:
        pred = predict(nets, dataset.x)
    finally:
        nets.training = was_training
    return float(np.mean(pred == dataset.labels))


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    count = max(1, n // batch_size)
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(count)]


def train_loop(
    cfg: TrainConfig,
    data: DomainSplits,
    weight_fn: WeightFn = class_gradient,
    on_step: Callable[[LossReport], None] | None = None,
    return_nets: bool = False,
):
    """Train for ``cfg.epochs`` epochs, evaluating target-test accuracy each epoch.

    Progress ``p`` rises linearly from 0 to 1 over all steps. The record holds
    ``epochs + 1`` entries, the first being the untrained evaluation.
    """
    src, tgt = data.source_train, data.target_train
    nets = build_nets(cfg, src.x.shape[1], data.config.num_classes)
    trainer = Trainer(cfg, nets, weight_fn)
    record = ExperimentRecord(cfg.method.value, cfg.seed)
    record.epochs.append(EpochRecord(0, None, None, evaluate(nets, data.target_test), 0))

    steps_per_epoch = max(1, len(src) // cfg.batch_size)
    total = max(1, cfg.epochs * steps_per_epoch)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        nets.train()
        s_batches = _epoch_batches(len(src), cfg.batch_size, trainer.batch_rng)
        t_batches = _epoch_batches(len(tgt), cfg.batch_size, trainer.batch_rng)
        l_cls, l_d, degenerate = [], [], 0
        for i, s_idx in enumerate(s_batches):
            t_idx = t_batches[i % len(t_batches)]
            report = train_step(src.subset(s_idx), tgt.subset(t_idx), trainer, step / total)
            step += 1
            l_cls.append(report.l_cls)
            l_d.append(report.l_d)
            degenerate += report.degenerate
            if on_step is not None:
                on_step(report)
        acc = evaluate(nets, data.target_test)
        rec = EpochRecord(epoch, float(np.mean(l_cls)), float(np.mean(l_d)), acc, degenerate)
        record.epochs.append(rec)
        log.debug("%s seed=%d epoch=%d l_cls=%.4f l_d=%.4f acc=%.4f", cfg.method.value, cfg.seed, epoch, rec.l_cls, rec.l_d, acc)
    nets.eval()
    return (record, nets) if return_nets else record
