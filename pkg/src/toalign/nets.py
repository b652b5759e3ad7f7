"""Feature extractor G, classifier C and domain discriminator D."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Holds named parameters; subclasses define ``forward``."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Extractor(Module):
    """Two conv(3x3)+ReLU stages, each followed by 2x2 pooling (max by default).

    Returns the non-negative feature map ``F[..., M, H/4, W/4]`` and its
    spatial mean ``f[..., M]``.
    """

    def __init__(
        self,
        in_channels: int,
        rng: np.random.Generator,
        hidden: int = 16,
        feat_dim: int = 32,
        pool: str = "max",
    ):
        super().__init__()
        if pool not in ("max", "avg"):
            raise ValueError(f"pool must be 'max' or 'avg', got {pool!r}")
        self.pool = ad.max_pool2 if pool == "max" else ad.avg_pool2
        self.in_channels = in_channels
        self.feat_dim = feat_dim
        self.params = {
            "conv1.weight": glorot(rng, (hidden, in_channels, 3, 3), in_channels * 9, hidden * 9),
            "conv1.bias": zeros((hidden, 1, 1)),
            "conv2.weight": glorot(rng, (feat_dim, hidden, 3, 3), hidden * 9, feat_dim * 9),
            "conv2.bias": zeros((feat_dim, 1, 1)),
        }

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = ad.as_tensor(x)
        if x.data.ndim not in (3, 4):
            raise DimensionError(f"extractor expects [C, H, W] or [N, C, H, W], got {x.shape}")
        c, h, w = x.shape[-3:]
        if c != self.in_channels:
            raise DimensionError(f"extractor built for {self.in_channels} channels, got input {x.shape}")
        if h < 8 or w < 8 or h % 4 or w % 4:
            raise DimensionError(f"extractor needs spatial dims >= 8 and divisible by 4, got {x.shape}")
        p = self.params
        h1 = ad.relu(ad.conv2d(x, p["conv1.weight"]) + p["conv1.bias"])
        h1 = self.pool(h1)
        h2 = ad.relu(ad.conv2d(h1, p["conv2.weight"]) + p["conv2.bias"])
        fmap = self.pool(h2)
        return fmap, ad.gap(fmap)


class Classifier(Module):
    """A single affine layer; ``weight`` is ``[K, M]`` so row k scores class k."""

    def __init__(self, feat_dim: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.feat_dim = feat_dim
        self.num_classes = num_classes
        self.params = {
            "weight": glorot(rng, (num_classes, feat_dim), feat_dim, num_classes),
            "bias": zeros((num_classes,)),
        }

    def forward(self, f: Tensor) -> Tensor:
        f = ad.as_tensor(f)
        if f.shape[-1] != self.feat_dim:
            raise DimensionError(f"classifier expects width {self.feat_dim}, got {f.shape}")
        single = f.data.ndim == 1
        if single:
            f = ad.reshape(f, (1, self.feat_dim))
        logits = ad.matmul(f, ad.transpose(self.params["weight"])) + self.params["bias"]
        if single:
            logits = ad.reshape(logits, (self.num_classes,))
        return logits


class Discriminator(Module):
    """``in -> hidden -> hidden -> 1`` MLP with ReLU and dropout, sigmoid output."""

    def __init__(self, in_dim: int, rng: np.random.Generator, hidden: int = 64, dropout: float = 0.5):
        super().__init__()
        self.in_dim = in_dim
        self.dropout = dropout
        self.params = {
            "fc1.weight": glorot(rng, (in_dim, hidden), in_dim, hidden),
            "fc1.bias": zeros((hidden,)),
            "fc2.weight": glorot(rng, (hidden, hidden), hidden, hidden),
            "fc2.bias": zeros((hidden,)),
            "fc3.weight": glorot(rng, (hidden, 1), hidden, 1),
            "fc3.bias": zeros((1,)),
        }

    def forward(self, v: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Probability that each row of ``v`` comes from the source domain.

        A 1-D input yields a scalar tensor; ``[N, in_dim]`` yields ``[N]``.
        """
        v = ad.as_tensor(v)
        if v.shape[-1] != self.in_dim:
            raise DimensionError(f"discriminator built for width {self.in_dim}, got {v.shape}")
        single = v.data.ndim == 1
        if single:
            v = ad.reshape(v, (1, self.in_dim))
        p = self.params
        h = ad.relu(ad.matmul(v, p["fc1.weight"]) + p["fc1.bias"])
        h = ad.dropout(h, self.dropout, train, rng)
        h = ad.relu(ad.matmul(h, p["fc2.weight"]) + p["fc2.bias"])
        h = ad.dropout(h, self.dropout, train, rng)
        z = ad.matmul(h, p["fc3.weight"]) + p["fc3.bias"]
        out = ad.sigmoid(ad.reshape(z, (v.shape[0],)))
        return ad.reshape(out, ()) if single else out


@dataclass
class Nets:
    G: Extractor
    C: Classifier
    D: Discriminator
    training: bool = True

    def train(self) -> "Nets":
        self.training = True
        return self

    def eval(self) -> "Nets":
        self.training = False
        return self

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, module in (("G", self.G), ("C", self.C), ("D", self.D)):
            for name, t in module.named_parameters().items():
                out[f"{prefix}.{name}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def init_params(
    seed: int | np.random.SeedSequence,
    in_channels: int = 1,
    num_classes: int = 3,
    feat_dim: int = 32,
    disc_in: int | None = None,
    disc_hidden: int = 64,
    dropout: float = 0.5,
) -> Nets:
    """Glorot-uniform weights and zero biases, reproducible per seed.

    ``disc_in`` defaults to ``feat_dim`` (feature-conditioned D); pass
    ``num_classes`` for the probability-conditioned variant.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    g_seq, c_seq, d_seq = ss.spawn(3)
    G = Extractor(in_channels, np.random.default_rng(g_seq), feat_dim=feat_dim)
    C = Classifier(feat_dim, num_classes, np.random.default_rng(c_seq))
    D = Discriminator(
        feat_dim if disc_in is None else disc_in,
        np.random.default_rng(d_seq),
        hidden=disc_hidden,
        dropout=dropout,
    )
    return Nets(G, C, D)


# Checkpoint format: a JSON object mapping parameter name to
# {"shape": [...], "values": [... row-major floats ...]}. Floats are written
# with repr precision, so a save/load round trip is exact.


def state_dict(nets: Nets) -> dict[str, dict]:
    return {
        name: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
        for name, t in nets.named_parameters().items()
    }


def load_state_dict(nets: Nets, state: dict[str, dict]) -> None:
    params = nets.named_parameters()
    missing = set(params) - set(state)
    unknown = set(state) - set(params)
    if missing or unknown:
        raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
    for name, entry in state.items():
        t = params[name]
        if tuple(entry["shape"]) != t.shape:
            raise DimensionError(f"{name}: checkpoint shape {entry['shape']} vs model {t.shape}")
        t.data[...] = np.asarray(entry["values"], dtype=np.float64).reshape(t.shape)


def save_checkpoint(nets: Nets, path: str | Path) -> None:
    Path(path).write_text(json.dumps(state_dict(nets)))


def load_checkpoint(nets: Nets, path: str | Path) -> None:
    load_state_dict(nets, json.loads(Path(path).read_text()))
