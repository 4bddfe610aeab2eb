"""Seeded synthetic source/target datasets with a spurious environment feature.

Every sample starts as a 2-d latent point ``(c, e)``: ``c`` is the causal
coordinate (its sign is the class) and ``e`` the environment coordinate (its
sign agrees with the class with probability ``rho`` in each domain). Latent
points are mapped into ``embed_dim`` dimensions by a seeded map with
orthonormal columns, so distances are preserved.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .models import ConfigError, substream

SCENARIOS = ("spurious_shift", "assumption1_violation", "assumption2_violation")


class DatasetParseError(ValueError):
    pass


@dataclass(frozen=True)
class SpuriousShiftConfig:
    n_per_domain: int = 1000
    class_sep: float = 2.4
    env_sep: float = 0.8
    rho_s: float = 0.95
    rho_t: float = 0.05
    noise_sigma: float = 1.0
    env_sigma_s: float = 0.1
    embed_dim: int = 8
    # assumption1_violation only: target environment offset as a multiple of env_sep
    violation_env_scale: float = 10.0

    def validate(self):
        if self.n_per_domain < 1:
            raise ConfigError("n_per_domain must be >= 1")
        if self.class_sep <= 0 or self.env_sep <= 0:
            raise ConfigError("class_sep and env_sep must be positive")
        for name in ("rho_s", "rho_t"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_sigma < 0 or self.env_sigma_s < 0:
            raise ConfigError("noise scales must be non-negative")
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {self.embed_dim}")
        return self


# "Domination" regime: tight environment clusters in the source.
DOMINATION = dict(env_sigma_s=0.05, rho_s=0.95, rho_t=0.05)


@dataclass
class DomainDataset:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    num_classes: int = 2
    metadata: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.source_x.shape[1]

    @property
    def target_inputs(self) -> np.ndarray:
        """Unlabelled view of the target domain handed to training code."""
        return self.target_x

    def __eq__(self, other):
        if not isinstance(other, DomainDataset):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and np.array_equal(self.source_x, other.source_x)
                and np.array_equal(self.source_y, other.source_y)
                and np.array_equal(self.target_x, other.target_x)
                and np.array_equal(self.target_y, other.target_y))


def embedding_map(embed_dim: int, seed: int) -> np.ndarray:
    """``(embed_dim, 2)`` matrix with orthonormal columns."""
    rng = substream(seed, "data.embed")
    q, r = np.linalg.qr(rng.normal(size=(embed_dim, 2)))
    return q * np.sign(np.diag(r))


def _domain(rng, n, class_sep, env_sep, rho, noise, env_spread):
    y = rng.integers(0, 2, size=n)
    sign_c = 2.0 * y - 1.0
    agree = rng.random(n) < rho
    sign_e = np.where(agree, sign_c, -sign_c)
    c = sign_c * class_sep / 2 + rng.normal(0.0, noise, n)
    e = sign_e * env_sep / 2 + env_spread * rng.normal(0.0, noise, n)
    return np.column_stack([c, e]), y


def _assemble(name, cfg, seed, latent_s, y_s, latent_t, y_t):
    Q = embedding_map(cfg.embed_dim, seed)
    return DomainDataset(
        source_x=latent_s @ Q.T, source_y=y_s.astype(np.int64),
        target_x=latent_t @ Q.T, target_y=y_t.astype(np.int64),
        num_classes=2,
        metadata={"generator": name, "seed": int(seed), **asdict(cfg)})


def gen_spurious_shift(cfg: SpuriousShiftConfig = SpuriousShiftConfig(), seed: int = 0) -> DomainDataset:
    cfg.validate()
    rs, rt = substream(seed, "data.source"), substream(seed, "data.target")
    ls, ys = _domain(rs, cfg.n_per_domain, cfg.class_sep, cfg.env_sep, cfg.rho_s,
                     cfg.noise_sigma, cfg.env_sigma_s)
    lt, yt = _domain(rt, cfg.n_per_domain, cfg.class_sep, cfg.env_sep, cfg.rho_t,
                     cfg.noise_sigma, 1.0)
    return _assemble("spurious_shift", cfg, seed, ls, ys, lt, yt)


def gen_assumption1_violation(cfg: SpuriousShiftConfig = SpuriousShiftConfig(), seed: int = 0) -> DomainDataset:
    """Target clusters follow the environment: its offset dwarfs the class offset
    and its sign is independent of the class."""
    cfg.validate()
    rs, rt = substream(seed, "data.source"), substream(seed, "data.target")
    ls, ys = _domain(rs, cfg.n_per_domain, cfg.class_sep, cfg.env_sep, cfg.rho_s,
                     cfg.noise_sigma, cfg.env_sigma_s)
    lt, yt = _domain(rt, cfg.n_per_domain, cfg.class_sep, cfg.env_sep * cfg.violation_env_scale,
                     0.5, cfg.noise_sigma, 1.0)
    return _assemble("assumption1_violation", cfg, seed, ls, ys, lt, yt)


def gen_assumption2_violation(cfg: SpuriousShiftConfig = SpuriousShiftConfig(), seed: int = 0) -> DomainDataset:
    """Class and environment signs fully aligned in the source and fully
    anti-aligned in the target, so both axis splits fit labels and clusters."""
    cfg.validate()
    cfg = replace(cfg, rho_s=1.0, rho_t=0.0)
    rs, rt = substream(seed, "data.source"), substream(seed, "data.target")
    ls, ys = _domain(rs, cfg.n_per_domain, cfg.class_sep, cfg.env_sep, 1.0,
                     cfg.noise_sigma, cfg.env_sigma_s)
    lt, yt = _domain(rt, cfg.n_per_domain, cfg.class_sep, cfg.env_sep, 0.0,
                     cfg.noise_sigma, 1.0)
    return _assemble("assumption2_violation", cfg, seed, ls, ys, lt, yt)


GENERATORS = {
    "spurious_shift": gen_spurious_shift,
    "assumption1_violation": gen_assumption1_violation,
    "assumption2_violation": gen_assumption2_violation,
}


def generate(scenario: str, cfg: SpuriousShiftConfig = SpuriousShiftConfig(), seed: int = 0) -> DomainDataset:
    try:
        gen = GENERATORS[scenario]
    except KeyError:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}") from None
    return gen(cfg, seed)


def latent_coordinates(ds: DomainDataset, domain: str = "T") -> np.ndarray:
    """Recover ``(c, e)`` for a generated dataset (needs its metadata)."""
    Q = embedding_map(int(ds.metadata["embed_dim"]), int(ds.metadata["seed"]))
    X = ds.source_x if domain == "S" else ds.target_x
    return X @ Q


# augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    sigma_weak: float = 0.1
    sigma_strong: float = 0.4
    p_drop: float = 0.15


def augment(x, level: str, seed_or_rng=0, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Gaussian jitter (weak) or jitter plus coordinate dropout (strong)."""
    x = np.asarray(x, dtype=float)
    if level == "none":
        return x.copy()
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    if level == "weak":
        return x + rng.normal(0.0, cfg.sigma_weak, x.shape) if cfg.sigma_weak > 0 else x.copy()
    if level == "strong":
        out = x + rng.normal(0.0, cfg.sigma_strong, x.shape) if cfg.sigma_strong > 0 else x.copy()
        if cfg.p_drop > 0:
            out = np.where(rng.random(x.shape) < cfg.p_drop, 0.0, out)
        return out
    raise ValueError(f"augmentation level must be none, weak or strong; got {level!r}")


# CSV I/O ---------------------------------------------------------------------

def save_dataset(ds: DomainDataset, path) -> None:
    """Write ``domain,label,f0..f{d-1}`` rows, LF endings, 17 significant digits."""
    d = ds.input_dim
    buf = io.StringIO()
    buf.write(",".join(["domain", "label"] + [f"f{k}" for k in range(d)]) + "\n")
    for dom, X, Y in (("S", ds.source_x, ds.source_y), ("T", ds.target_x, ds.target_y)):
        for x, y in zip(X, Y):
            buf.write(",".join([dom, str(int(y))] + [format(v, ".17g") for v in x]) + "\n")
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def load_dataset(path, num_classes: int | None = None) -> DomainDataset:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetParseError(f"{path}:1: empty file") from None
    if len(header) < 3 or header[:2] != ["domain", "label"]:
        raise DatasetParseError(f"{path}:1: header must start with domain,label")
    d = len(header) - 2
    if header[2:] != [f"f{k}" for k in range(d)]:
        raise DatasetParseError(f"{path}:1: feature columns must be f0..f{d - 1}")
    rows = {"S": ([], []), "T": ([], [])}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != d + 2:
            raise DatasetParseError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
        dom = row[0]
        if dom not in rows:
            raise DatasetParseError(f"{path}:{lineno}: domain must be S or T, got {dom!r}")
        try:
            label = int(row[1])
            feats = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise DatasetParseError(f"{path}:{lineno}: {exc}") from None
        if label < 0:
            raise DatasetParseError(f"{path}:{lineno}: negative label {label}")
        rows[dom][0].append(feats)
        rows[dom][1].append(label)

    def arrays(dom):
        X, Y = rows[dom]
        return np.array(X, dtype=float).reshape(-1, d), np.array(Y, dtype=np.int64)

    sx, sy = arrays("S")
    tx, ty = arrays("T")
    if num_classes is None:
        num_classes = int(max(sy.max(initial=-1), ty.max(initial=-1)) + 1)
        num_classes = max(num_classes, 2)
    return DomainDataset(sx, sy, tx, ty, num_classes=num_classes,
                         metadata={"generator": "file", "path": str(path)})
