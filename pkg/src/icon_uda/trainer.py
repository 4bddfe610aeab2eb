"""ICON training loop.

One step minimises

    CE(S) + [include_bce_s] BCE(S) + [past warm-up] BCE(T) + alpha * L_st
          + beta * Var{BCE(S), BCE(T)} + lambda_cluster * L_cluster

with SGD plus momentum. ``BCE(T)`` pairs come from the cluster head ``g``
(or from per-epoch k-means labels); ``L_cluster`` trains ``g`` with
rank-statistic pair labels. Switching terms off reproduces the ablation rows.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .clustering import RankStatConfig, cluster_head_loss, kmeans_assign
from .datagen import AugmentConfig, DomainDataset, augment
from .evaluation import accuracy, probe_g_vs_f
from .models import (ConfigError, HyperbolicLayerSpec, ModelState, backbone_graph,
                     head_graph, init_model, substream)

ST_VARIANTS = ("fixmatch", "pseudolabel", "noisy_student", "none")
CLUSTER_METHODS = ("rank_stat", "kmeans")
DEFAULT_TAU = {"fixmatch": 0.97, "pseudolabel": 0.8}
METRIC_COLUMNS = ("epoch", "ce_s", "bce_s", "bce_t", "st", "rex", "cluster",
                  "acc_s", "acc_t", "probe_pct")


class NumericalError(ArithmeticError):
    def __init__(self, term: str, message: str = ""):
        self.term = term
        super().__init__(message or f"non-finite value in loss term {term!r}")


@dataclass
class TrainConfig:
    alpha: float = 0.75
    beta: float = 0.15
    include_bce_s: bool = False
    use_bce_t: bool = True
    lambda_cluster: float = 1.0
    st_variant: str = "fixmatch"
    tau: float | None = None  # None: 0.97 for fixmatch, 0.8 for pseudolabel
    cluster_conf: float = 0.6
    cluster_multiplier: float = 1.0
    cluster_method: str = "rank_stat"
    rank_k: int = 5
    warmup_epochs_bce_t: int = 1
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    detach_cluster_backbone: bool = False
    rex_source: str = "bce"
    hidden: tuple = (32, 32)
    feature_dim: int = 16
    nonlinearity: str = "tanh"
    sigma_weak: float = 0.1
    sigma_strong: float = 0.4
    p_drop: float = 0.15
    probe_pairs: int = 10_000

    def validate(self) -> "TrainConfig":
        if min(self.alpha, self.beta, self.lambda_cluster) < 0:
            raise ConfigError("alpha, beta and lambda_cluster must be non-negative")
        if self.tau is not None and not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 <= self.cluster_conf <= 1.0:
            raise ConfigError(f"cluster_conf must lie in [0, 1], got {self.cluster_conf}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for pairwise losses")
        if self.st_variant not in ST_VARIANTS:
            raise ConfigError(f"st_variant must be one of {ST_VARIANTS}, got {self.st_variant!r}")
        if self.cluster_method not in CLUSTER_METHODS:
            raise ConfigError(f"cluster_method must be one of {CLUSTER_METHODS}")
        if self.rex_source not in ("bce", "ce"):
            raise ConfigError(f"rex_source must be 'bce' or 'ce', got {self.rex_source!r}")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("lr must be positive and momentum in [0, 1)")
        return self

    @property
    def st_tau(self) -> float:
        if self.tau is not None:
            return self.tau
        return DEFAULT_TAU.get(self.st_variant, 0.97)

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.sigma_weak, self.sigma_strong, self.p_drop)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# Named presets for the ablation rows.
PRESETS: dict[str, dict] = {
    "erm": dict(alpha=0.0, beta=0.0, use_bce_t=False, include_bce_s=False,
                st_variant="none", detach_cluster_backbone=True),
    "self_training": dict(beta=0.0, use_bce_t=False, include_bce_s=False,
                          detach_cluster_backbone=True),
    "con": dict(beta=0.0),
    "icon": dict(),
}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return TrainConfig(**{**base, **overrides}).validate()


# config file --------------------------------------------------------------

OPTIONAL_FLOATS = ("tau",)


def _coerce(name: str, raw, current):
    if isinstance(raw, str):
        raw = raw.strip()
    if isinstance(current, bool):
        if isinstance(raw, bool):
            return raw
        low = str(raw).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if name in OPTIONAL_FLOATS:
        if str(raw).lower() in ("", "none", "default"):
            return None
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    try:
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            if isinstance(raw, (list, tuple)):
                return tuple(int(v) for v in raw)
            return tuple(int(v) for v in str(raw).replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return str(raw)


def apply_overrides(cfg, pairs: dict):
    """Return a copy of a config dataclass with string or typed values applied."""
    known = {f.name for f in fields(cfg)}
    updates = {}
    for key, raw in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, raw, getattr(cfg, key))
    return replace(cfg, **updates)


def parse_kv_lines(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = val
    return out


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8")
    return apply_overrides(base or TrainConfig(), parse_kv_lines(text, str(path))).validate()


# optimisation ------------------------------------------------------------------

class SGDMomentum:
    def __init__(self, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name, p in params.items():
            v = self.momentum * self.velocity.get(name, 0.0) + grads[name]
            self.velocity[name] = v
            out[name] = p - self.lr * v
        return out


@dataclass
class StepInputs:
    """Per-step extras the loop prepares: augmented target views and fixed labels."""

    target_weak: np.ndarray | None = None
    target_strong: np.ndarray | None = None
    st_targets: np.ndarray | None = None
    cluster_labels: np.ndarray | None = None


def _check(term: str, node: ad.DiffValue):
    if not np.all(np.isfinite(node.value)):
        raise NumericalError(term)


def build_objective(model: ModelState, leaves, xs, ys, xt, cfg: TrainConfig, epoch: int,
                    ramp: float = 1.0, extras: StepInputs | None = None):
    """Total loss node plus the report; target labels never enter here."""
    extras = extras or StepInputs()
    xs, xt = np.asarray(xs, dtype=float), np.asarray(xt, dtype=float)
    ys = np.asarray(ys, dtype=np.intp)
    report = L.LossReport(alpha=cfg.alpha, beta=cfg.beta)
    w = report.weights
    terms: dict[str, ad.DiffValue] = {}

    feats_s = backbone_graph(model, leaves, xs)
    pf_s = head_graph(leaves, feats_s, "f")
    terms["ce_s"] = L.cross_entropy(pf_s, ys)
    w["ce_s"] = 1.0

    bce_t_on = cfg.use_bce_t and epoch >= cfg.warmup_epochs_bce_t
    need_bce_s = cfg.include_bce_s or (cfg.beta > 0 and bce_t_on and cfg.rex_source == "bce")
    if need_bce_s:
        res = L.pairwise_bce(pf_s, L.pairs_from_class_labels(ys))
        if not res.skipped:
            terms["bce_s"] = res.loss
            w["bce_s"] = 1.0 if cfg.include_bce_s else 0.0

    feats_t = backbone_graph(model, leaves, xt)
    if cfg.lambda_cluster > 0 and cfg.cluster_method == "rank_stat":
        res = cluster_head_loss(model, xt, RankStatConfig(cfg.rank_k), leaves=leaves,
                                detach_backbone=cfg.detach_cluster_backbone, feats=feats_t)
        if not res.skipped:
            terms["cluster"] = res.loss
            w["cluster"] = cfg.lambda_cluster

    if bce_t_on:
        if cfg.cluster_method == "kmeans" and extras.cluster_labels is not None:
            pairs = L.pairs_from_class_labels(extras.cluster_labels)
        else:
            g_vals = model.predict_proba(xt, "g")
            pairs = L.pairs_from_clusters(g_vals, cfg.cluster_conf)
        res = L.pairwise_bce(head_graph(leaves, feats_t, "f"), pairs)
        if not res.skipped:
            terms["bce_t"] = res.loss
            w["bce_t"] = 1.0

    if cfg.alpha > 0 and cfg.st_variant != "none":
        weak = extras.target_weak if extras.target_weak is not None else xt
        if cfg.st_variant == "fixmatch":
            strong = extras.target_strong if extras.target_strong is not None else xt
            p_weak = model.predict_proba(weak, "f")
            p_strong = head_graph(leaves, backbone_graph(model, leaves, strong), "f")
            terms["st"] = L.fixmatch_loss(p_weak, p_strong, cfg.st_tau)
        elif cfg.st_variant == "pseudolabel":
            p = head_graph(leaves, backbone_graph(model, leaves, weak), "f")
            terms["st"] = L.pseudolabel_loss(p, cfg.st_tau, ramp)
        elif extras.st_targets is not None:
            p = head_graph(leaves, backbone_graph(model, leaves, weak), "f")
            terms["st"] = L.noisy_student_loss(p, extras.st_targets)
        if "st" in terms:
            w["st"] = cfg.alpha

    # The variance needs both of its arguments; skip it with BCE(T).
    if cfg.beta > 0 and "bce_t" in terms:
        src = terms.get("bce_s") if cfg.rex_source == "bce" else terms["ce_s"]
        if src is not None:
            terms["rex"] = L.rex_penalty(src, terms["bce_t"])
            w["rex"] = cfg.beta

    total = None
    for name in L.LossReport.TERMS:
        if name not in terms:
            continue
        _check(name, terms[name])
        setattr(report, name, terms[name].item())
        if w.get(name, 0.0) != 0.0:
            part = terms[name] * w[name] if w[name] != 1.0 else terms[name]
            total = part if total is None else total + part
    total = total if total is not None else ad.DiffValue(0.0)
    _check("total", total)
    report.total = total.item()
    return total, report


def train_step(model: ModelState, batch_s, batch_t, cfg: TrainConfig, epoch: int,
               step_frac: float = 0.0, opt: SGDMomentum | None = None,
               extras: StepInputs | None = None, ramp: float | None = None):
    """One momentum-SGD update on ``theta``, ``f`` and ``g``.

    ``batch_s`` is ``(inputs, labels)``; ``batch_t`` holds target inputs only.
    Returns the updated model and the :class:`LossReport` of the pre-update loss.
    """
    if not 0.0 <= step_frac <= 1.0:
        raise ConfigError(f"step_frac must lie in [0, 1], got {step_frac}")
    xs, ys = batch_s
    if len(xs) == 0 or len(batch_t) == 0:
        raise ConfigError("empty batch")
    if ramp is None:
        ramp = min(1.0, step_frac / 0.4) if cfg.st_variant == "pseudolabel" else 1.0
    opt = opt or SGDMomentum(cfg.lr, cfg.momentum)
    leaves = model.leaves()
    total, report = build_objective(model, leaves, xs, ys, batch_t, cfg, epoch, ramp, extras)
    total.backward()
    grads = {k: v.grad for k, v in leaves.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError("total", f"non-finite gradient for parameter {k}")
    new_params = opt.step(model.params(), grads)
    return model.with_params(new_params), report


# loop --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    losses: dict
    acc_s: float
    acc_t: float
    probe_pct: float

    def row(self) -> list:
        return [self.epoch] + [self.losses[t] for t in L.LossReport.TERMS] + [
            self.acc_s, self.acc_t, self.probe_pct]


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    model: ModelState | None = None
    config: TrainConfig | None = None
    seconds: float = 0.0

    def __len__(self):
        return len(self.records)

    def final(self) -> EpochRecord:
        return self.records[-1]

    def metrics_csv(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for rec in self.records:
            lines.append(",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in rec.row()))
        return "\n".join(lines) + "\n"


def _batch_order(rng: np.random.Generator, n: int, needed: int) -> np.ndarray:
    # Fresh permutations, concatenated until ``needed`` indices are available.
    parts, have = [], 0
    while have < needed:
        parts.append(rng.permutation(n))
        have += n
    return np.concatenate(parts)[:needed]


def train(ds: DomainDataset, cfg: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainLog:
    """Seeded epoch loop over source and target batches in lockstep.

    Target labels are used only by the per-epoch evaluation; training calls
    receive ``ds.target_inputs``.
    """
    cfg.validate()
    started = time.perf_counter()
    spec = HyperbolicLayerSpec((ds.input_dim, *cfg.hidden, cfg.feature_dim), cfg.nonlinearity)
    model = init_model(spec, ds.num_classes, cfg.cluster_multiplier, cfg.seed)
    opt = SGDMomentum(cfg.lr, cfg.momentum)
    shuffle = substream(cfg.seed, "shuffle")
    aug_rng = substream(cfg.seed, "augment")
    probe_seed = int(substream(cfg.seed, "probe").integers(2**31))

    xs_all, ys_all = ds.source_x, ds.source_y
    xt_all = ds.target_inputs
    B = cfg.batch_size
    steps = max(1, max(len(xs_all), len(xt_all)) // B)
    total_steps = cfg.epochs * steps
    log = TrainLog(config=cfg)
    global_step = 0

    for epoch in range(cfg.epochs):
        order_s = _batch_order(shuffle, len(xs_all), steps * B)
        order_t = _batch_order(shuffle, len(xt_all), steps * B)
        st_targets = None
        if cfg.st_variant == "noisy_student" and cfg.alpha > 0:
            st_targets = L.noisy_student_targets(model, xt_all)
        cluster_labels = None
        if cfg.cluster_method == "kmeans" and cfg.use_bce_t:
            cluster_labels = kmeans_assign(model.features(xt_all), model.num_clusters,
                                           iters=30, seed=cfg.seed + epoch)
        sums: dict[str, float] = {t: 0.0 for t in L.LossReport.TERMS}
        for step in range(steps):
            bs = order_s[step * B:(step + 1) * B]
            bt = order_t[step * B:(step + 1) * B]
            xt = xt_all[bt]
            extras = StepInputs(
                target_weak=augment(xt, "weak", aug_rng, cfg.augment),
                target_strong=augment(xt, "strong", aug_rng, cfg.augment),
                st_targets=None if st_targets is None else st_targets[bt],
                cluster_labels=None if cluster_labels is None else cluster_labels[bt])
            ramp = L.ramp_weight(global_step, total_steps) if cfg.st_variant == "pseudolabel" else 1.0
            model, report = train_step(model, (xs_all[bs], ys_all[bs]), xt, cfg, epoch,
                                       global_step / total_steps, opt, extras, ramp)
            for t, v in report.as_row().items():
                sums[t] += v
            global_step += 1
        rec = EpochRecord(
            epoch=epoch + 1,
            losses={t: v / steps for t, v in sums.items()},
            acc_s=accuracy(model, xs_all, ys_all),
            acc_t=accuracy(model, ds.target_x, ds.target_y),
            probe_pct=probe_g_vs_f(model, ds.target_x, ds.target_y,
                                   cfg.probe_pairs, probe_seed).percentage)
        log.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    log.model = model
    log.seconds = time.perf_counter() - started
    return log

