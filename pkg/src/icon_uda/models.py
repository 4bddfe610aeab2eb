"""Backbone plus classification head ``f`` and cluster head ``g``.

Parameters live in plain numpy arrays inside :class:`ModelState`. A training
step wraps them as graph leaves (:meth:`ModelState.leaves`), so evaluation
never touches the differentiation engine.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, DimensionError

CHECKPOINT_MAGIC = "ICON-CHECKPOINT"
CHECKPOINT_VERSION = 1

_NONLINEARITIES = {"tanh": ad.tanh, "relu": ad.relu, "identity": ad.identity}
_NP_NONLINEARITIES = {
    "tanh": np.tanh,
    "relu": lambda a: np.maximum(a, 0.0),
    "identity": lambda a: a,
}


class ConfigError(ValueError):
    """Invalid configuration value."""


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of a run's seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class HyperbolicLayerSpec:
    """Backbone layout: ``widths[0]`` is the input width, the last is the feature width.

    A single width means an identity backbone (features equal inputs).
    """

    widths: tuple[int, ...] = (8, 32, 32, 16)
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if not self.widths or any(int(w) <= 0 for w in self.widths):
            raise ConfigError(f"widths must be non-empty and positive, got {self.widths}")
        if self.nonlinearity not in _NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


@dataclass
class ModelState:
    backbone: list[tuple[np.ndarray, np.ndarray]]
    head_f: tuple[np.ndarray, np.ndarray]
    head_g: tuple[np.ndarray, np.ndarray]
    nonlinearity: str
    input_dim: int
    feature_dim: int
    num_classes: int
    num_clusters: int

    # flat parameter views -------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.backbone):
            out[f"backbone.{i}.W"] = W
            out[f"backbone.{i}.b"] = b
        out["head_f.W"], out["head_f.b"] = self.head_f
        out["head_g.W"], out["head_g.b"] = self.head_g
        return out

    def with_params(self, params: Mapping[str, np.ndarray]) -> "ModelState":
        backbone = [(np.array(params[f"backbone.{i}.W"], dtype=float),
                     np.array(params[f"backbone.{i}.b"], dtype=float))
                    for i in range(len(self.backbone))]
        return ModelState(
            backbone=backbone,
            head_f=(np.array(params["head_f.W"], dtype=float), np.array(params["head_f.b"], dtype=float)),
            head_g=(np.array(params["head_g.W"], dtype=float), np.array(params["head_g.b"], dtype=float)),
            nonlinearity=self.nonlinearity, input_dim=self.input_dim,
            feature_dim=self.feature_dim, num_classes=self.num_classes,
            num_clusters=self.num_clusters)

    def leaves(self) -> dict[str, DiffValue]:
        return ad.leaves_from({k: v.copy() for k, v in self.params().items()})

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim,) + tuple(W.shape[0] for W, _ in self.backbone)

    # value-only inference ---------------------------------------------------

    def features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        _check_input(X, self.input_dim)
        act = _NP_NONLINEARITIES[self.nonlinearity]
        h = X
        for W, b in self.backbone:
            h = act(h @ W.T + b)
        return h

    def predict_proba(self, X, head: str = "f") -> np.ndarray:
        W, b = self._head(head)
        z = self.features(X) @ W.T + b
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, X, head: str = "f") -> np.ndarray:
        """Argmax prediction; ties resolve to the lowest index."""
        return np.argmax(self.predict_proba(X, head), axis=-1)

    def _head(self, head: str):
        if head == "f":
            return self.head_f
        if head == "g":
            return self.head_g
        raise ValueError(f"head must be 'f' or 'g', got {head!r}")


def _check_input(X: np.ndarray, input_dim: int):
    if X.ndim not in (1, 2) or X.shape[-1] != input_dim:
        raise DimensionError(f"input has shape {X.shape}, expected last dim {input_dim}")


def cluster_count(num_classes: int, multiplier: float) -> int:
    raw = num_classes * multiplier
    k = int(round(raw))
    if multiplier <= 0 or k < 1 or not math.isclose(raw, k, abs_tol=1e-9):
        raise ConfigError(
            f"cluster multiplier {multiplier} gives non-integer cluster count {raw} for C={num_classes}")
    return k


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / math.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=fan_out)
    return W, b


def init_model(spec: HyperbolicLayerSpec, num_classes: int, cluster_multiplier: float = 1.0,
               seed: int = 0) -> ModelState:
    """Fresh model with scaled-uniform weights.

    The backbone, ``f`` and ``g`` each draw from their own substream, so ``g``
    is not a copy of ``f`` and changing one head's shape leaves the others intact.
    """
    if num_classes < 1:
        raise ConfigError(f"num_classes must be positive, got {num_classes}")
    num_clusters = cluster_count(num_classes, cluster_multiplier)
    widths = spec.widths
    rng = substream(seed, "init.backbone")
    backbone = [_uniform_layer(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
    head_f = _uniform_layer(substream(seed, "init.head_f"), widths[-1], num_classes)
    head_g = _uniform_layer(substream(seed, "init.head_g"), widths[-1], num_clusters)
    return ModelState(backbone=backbone, head_f=head_f, head_g=head_g,
                      nonlinearity=spec.nonlinearity, input_dim=widths[0],
                      feature_dim=widths[-1], num_classes=num_classes,
                      num_clusters=num_clusters)


# differentiable forward ----------------------------------------------------

def backbone_graph(model: ModelState, leaves: Mapping[str, DiffValue], x) -> DiffValue:
    x = ad.lift(x)
    _check_input(x.value, model.input_dim)
    act = _NONLINEARITIES[model.nonlinearity]
    h = x
    for i in range(len(model.backbone)):
        h = act(ad.affine(h, leaves[f"backbone.{i}.W"], leaves[f"backbone.{i}.b"]))
    return h


def head_graph(leaves: Mapping[str, DiffValue], feats: DiffValue, head: str) -> DiffValue:
    if head not in ("f", "g"):
        raise ValueError(f"head must be 'f' or 'g', got {head!r}")
    return ad.softmax(ad.affine(feats, leaves[f"head_{head}.W"], leaves[f"head_{head}.b"]))


def forward(model: ModelState, x, head: str = "f",
            leaves: Mapping[str, DiffValue] | None = None) -> DiffValue:
    """Probability vector (or one row per sample) from head ``f`` or ``g``."""
    if leaves is None:
        leaves = model.leaves()
    return head_graph(leaves, backbone_graph(model, leaves, x), head)


def backbone_features(model: ModelState, x) -> np.ndarray:
    return model.features(x)


# checkpoint I/O --------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ModelState, path) -> None:
    """Text checkpoint: a header, then one ``array`` block per parameter.

    ::

        ICON-CHECKPOINT 1
        nonlinearity tanh
        num_classes 2
        num_clusters 2
        widths 8 32 32 16
        array backbone.0.W 32 8
        <one row of repr floats per line>
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             f"nonlinearity {model.nonlinearity}",
             f"num_classes {model.num_classes}",
             f"num_clusters {model.num_clusters}",
             "widths " + " ".join(str(w) for w in model.widths)]
    for name, arr in model.params().items():
        rows = arr.reshape(arr.shape[0], -1) if arr.ndim == 2 else arr.reshape(1, -1)
        lines.append(f"array {name} " + " ".join(str(d) for d in arr.shape))
        lines.extend(" ".join(repr(float(v)) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelState:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split() != [CHECKPOINT_MAGIC, str(CHECKPOINT_VERSION)]:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    header = {}
    pos = 1
    while pos < len(lines) and not lines[pos].startswith("array "):
        key, _, val = lines[pos].partition(" ")
        header[key] = val
        pos += 1
    try:
        widths = tuple(int(w) for w in header["widths"].split())
        spec = HyperbolicLayerSpec(widths, header["nonlinearity"])
        num_classes = int(header["num_classes"])
        num_clusters = int(header["num_clusters"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    params = {}
    while pos < len(lines):
        parts = lines[pos].split()
        if len(parts) < 3 or parts[0] != "array":
            raise CheckpointError(f"{path}:{pos + 1}: expected an array header")
        name, shape = parts[1], tuple(int(d) for d in parts[2:])
        nrows = shape[0] if len(shape) == 2 else 1
        try:
            rows = [[float(v) for v in lines[pos + 1 + r].split()] for r in range(nrows)]
            params[name] = np.array(rows, dtype=float).reshape(shape)
        except (IndexError, ValueError) as exc:
            raise CheckpointError(f"{path}:{pos + 1}: malformed array {name} ({exc})") from exc
        pos += 1 + nrows
    template = init_model(spec, num_classes, num_clusters / num_classes, seed=0)
    missing = set(template.params()) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing arrays {sorted(missing)}")
    for name, arr in template.params().items():
        if params[name].shape != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, expected {arr.shape}")
    return template.with_params(params)
