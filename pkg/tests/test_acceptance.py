"""Acceptance criteria, one test per criterion.

Training-based criteria use seeds 0..4 and the package defaults. Shared runs
are cached so each (scenario, regime, preset, overrides, seed) trains once.
"""

import subprocess
import sys
import time

import numpy as np

from icon_uda import autodiff as ad
from icon_uda import losses as L
from icon_uda.clustering import RankStatConfig, cluster_head_loss, rank_stat_pair_label
from icon_uda.datagen import DOMINATION, SpuriousShiftConfig, generate
from icon_uda.models import HyperbolicLayerSpec, init_model
from icon_uda.trainer import StepInputs, TrainConfig, build_objective, preset, train

from conftest import SESSION_START

SEEDS = range(5)
_RUNS = {}


def run(scenario, regime, name, seed, **overrides):
    key = (scenario, regime, name, seed, tuple(sorted(overrides.items())))
    if key not in _RUNS:
        cfg = SpuriousShiftConfig(**DOMINATION) if regime == "domination" else SpuriousShiftConfig()
        _RUNS[key] = train(generate(scenario, cfg, seed), preset(name, seed=seed, **overrides))
    return _RUNS[key]


def mean_acc_t(scenario, regime, name, **overrides):
    return float(np.mean([run(scenario, regime, name, s, **overrides).final().acc_t for s in SEEDS]))


def report(line):
    print(line)


# 1 -----------------------------------------------------------------------------

def _small_point(seed):
    rng = np.random.default_rng(seed)
    model = init_model(HyperbolicLayerSpec((5, 6, 4)), 2, 1.0, seed)
    xs, xt = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    ys = np.array([0, 1, 0, 1])
    rng.shuffle(ys)
    return model, xs, ys, xt, rng


def _loss_op_checks(seed):
    rng = np.random.default_rng(seed)
    probs = lambda z: ad.softmax(z)
    z4 = rng.normal(size=(4, 3))
    y4 = rng.integers(0, 3, size=4)
    pairs = L.pairs_from_class_labels(rng.integers(0, 2, size=4))
    weak = np.tile([0.99, 0.005, 0.005], (4, 1))
    weak[1] = [0.5, 0.3, 0.2]
    checks = {
        "affine": (lambda v: (ad.affine(v["x"], v["W"], v["b"]) ** 2).sum(),
                   {"x": rng.normal(size=(4, 3)), "W": rng.normal(size=(2, 3)), "b": rng.normal(size=2)}),
        "softmax": (lambda v: (probs(v["z"]) * np.arange(3.0)).sum(), {"z": z4}),
        "cross_entropy": (lambda v: L.cross_entropy(probs(v["z"]), y4), {"z": z4}),
        "pairwise_bce": (lambda v: L.pairwise_bce(probs(v["z"]), pairs).loss, {"z": z4}),
        "rex_penalty": (lambda v: L.rex_penalty(v["a"].sum(), (v["b"] * v["b"]).sum()),
                        {"a": rng.normal(size=2), "b": rng.normal(size=2)}),
        "fixmatch_loss": (lambda v: L.fixmatch_loss(weak, probs(v["z"]), 0.97), {"z": z4}),
        "pseudolabel_loss": (lambda v: L.pseudolabel_loss(probs(v["z"]), 0.4, 0.7), {"z": 3 * z4}),
        "noisy_student_loss": (lambda v: L.noisy_student_loss(probs(v["z"]), y4), {"z": z4}),
        "regression_similarity": (lambda v: L.regression_similarity(v["a"].sum(), v["b"].sum()),
                                  {"a": rng.normal(size=2), "b": rng.normal(size=3)}),
    }
    return {name: ad.grad_check(fn, point, eps=1e-5) for name, (fn, point) in checks.items()}


def _composed_check(seed):
    model, xs, ys, xt, rng = _small_point(seed)
    cfg = TrainConfig(include_bce_s=True, warmup_epochs_bce_t=0, cluster_conf=0.0, tau=0.3,
                      lambda_cluster=1.0, rank_k=2, hidden=(6,), feature_dim=4)
    extras = StepInputs(target_weak=xt + 0.1 * rng.normal(size=xt.shape),
                        target_strong=xt + 0.4 * rng.normal(size=xt.shape))

    def total(leaves):
        loss, _ = build_objective(model, leaves, xs, ys, xt, cfg, epoch=3, extras=extras)
        return loss

    _, rep = build_objective(model, model.leaves(), xs, ys, xt, cfg, epoch=3, extras=extras)
    assert all(getattr(rep, t) is not None for t in L.LossReport.TERMS)
    return ad.grad_check(total, model.params(), eps=1e-5)


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    worst_ops, worst_total = 0.0, 0.0
    for trial in range(20):
        worst_ops = max(worst_ops, max(_loss_op_checks(trial).values()))
        worst_total = max(worst_total, _composed_check(trial))
    elapsed = time.perf_counter() - start
    report(f"criterion 1: ops {worst_ops:.2e}, total {worst_total:.2e}, {elapsed:.1f}s")
    assert worst_ops <= 1e-4
    assert worst_total <= 1e-4
    assert elapsed < 30.0


# 2 -----------------------------------------------------------------------------

def _naive_bce(P, labels):
    total, n = 0.0, 0
    for i in range(len(P)):
        for j in range(i + 1, len(P)):
            s = min(max(float(sum(P[i][k] * P[j][k] for k in range(len(P[i])))), 1e-7), 1 - 1e-7)
            b = 1.0 if labels[i] == labels[j] else 0.0
            total += -(b * np.log(s) + (1 - b) * np.log(1 - s))
            n += 1
    return total / n


def _sort_oracle(x, k):
    return set(sorted(range(len(x)), key=lambda i: (-x[i], i))[:k])


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 65))
        P = rng.dirichlet(np.ones(3), size=n)
        labels = rng.integers(0, 3, size=n)
        got = L.pairwise_bce(ad.DiffValue(P), L.pairs_from_class_labels(labels)).loss.item()
        worst = max(worst, abs(got - _naive_bce(P.tolist(), labels.tolist())))
    agree = 0
    for _ in range(1000):
        d = int(rng.integers(5, 12))
        # small integer values make ties common
        x1, x2 = rng.integers(0, 4, size=d).astype(float), rng.integers(0, 4, size=d).astype(float)
        if rng.random() < 0.3:
            x2 = x1.copy()
        agree += rank_stat_pair_label(x1, x2, 5) == (_sort_oracle(x1, 5) == _sort_oracle(x2, 5))
    report(f"criterion 2: bce max abs diff {worst:.2e}, rank-stat agreement {agree}/1000")
    assert worst <= 1e-9
    assert agree == 1000


# 3 -----------------------------------------------------------------------------

def test_criterion_3_analytic_values():
    assert L.rex_penalty(ad.DiffValue(1.0), ad.DiffValue(0.0)).item() == 0.25
    for a in (0.0, 0.37, 5.5):
        assert L.rex_penalty(ad.DiffValue(a), ad.DiffValue(a)).item() == 0.0
    below = L.fixmatch_loss(np.array([0.96, 0.04]), ad.DiffValue(np.array([0.9, 0.1])), 0.97)
    at = L.fixmatch_loss(np.array([0.97, 0.03]), ad.DiffValue(np.array([0.9, 0.1])), 0.97)
    assert below.item() == 0.0 and at.item() == 0.0
    report("criterion 3: rex(1,0)=0.25, rex(a,a)=0, fixmatch filtered to 0")


# 4 -----------------------------------------------------------------------------

def test_criterion_4_domination_mechanism():
    start = time.perf_counter()
    icon = mean_acc_t("spurious_shift", "domination", "icon")
    st = mean_acc_t("spurious_shift", "domination", "self_training")
    erm = mean_acc_t("spurious_shift", "domination", "erm")
    elapsed = time.perf_counter() - start
    report(f"criterion 4: icon {icon:.3f}, self-training {st:.3f}, erm {erm:.3f}, {elapsed:.0f}s")
    assert 100 * (icon - st) >= 15.0
    assert 100 * (icon - erm) >= 20.0
    assert elapsed < 300.0


# 5 -----------------------------------------------------------------------------

def test_criterion_5_component_ordering():
    base = mean_acc_t("spurious_shift", "default", "self_training")
    con = mean_acc_t("spurious_shift", "default", "con")
    icon = mean_acc_t("spurious_shift", "default", "icon")
    half = mean_acc_t("spurious_shift", "default", "icon", cluster_multiplier=0.5)
    double = mean_acc_t("spurious_shift", "default", "icon", cluster_multiplier=2.0)
    report(f"criterion 5: baseline {base:.3f}, +con {con:.3f}, +con+inv {icon:.3f}, "
           f"clusters x0.5 {half:.3f}, x2 {double:.3f}")
    assert icon >= con >= base
    assert half < icon
    assert double < icon


# 6 -----------------------------------------------------------------------------

def test_criterion_6_probe_trend():
    icon_drops = st_holds = 0
    for s in SEEDS:
        rec = run("spurious_shift", "default", "icon", s).records
        icon_drops += rec[-1].probe_pct < rec[1].probe_pct
        rec = run("spurious_shift", "default", "self_training", s).records
        st_holds += rec[-1].probe_pct >= rec[1].probe_pct
    report(f"criterion 6: icon drops on {icon_drops}/5 seeds, self-training holds on {st_holds}/5")
    assert icon_drops >= 3
    assert st_holds >= 3


# 7 -----------------------------------------------------------------------------

def test_criterion_7_assumption1_violation():
    finals = [run("assumption1_violation", "default", "icon", s).final() for s in SEEDS]
    acc_t = float(np.mean([f.acc_t for f in finals]))
    acc_s = float(np.mean([f.acc_s for f in finals]))
    report(f"criterion 7: target {acc_t:.3f}, source {acc_s:.3f}")
    assert acc_t < 0.60
    assert acc_s > 0.90


# 8 -----------------------------------------------------------------------------

def _cli(*args):
    return subprocess.run([sys.executable, "-m", "icon_uda", *args],
                          capture_output=True, text=True, check=True)


def test_criterion_8_determinism(tmp_path):
    data = tmp_path / "d.csv"
    _cli("generate", "--scenario", "spurious_shift", "--seed", "3", "--out", str(data))
    outputs = []
    for name in ("a", "b"):
        _cli("train", "--data", str(data), "--seed", "3", "--override", "epochs=3",
             "--out", str(tmp_path / name))
        outputs.append((tmp_path / name / "metrics.csv").read_bytes())
    report(f"criterion 8: metrics CSV identical = {outputs[0] == outputs[1]}")
    assert outputs[0] == outputs[1]


# 9 -----------------------------------------------------------------------------

def test_criterion_9_suite_wall_clock():
    elapsed = time.perf_counter() - SESSION_START
    report(f"criterion 9: {elapsed:.0f}s since session start")
    assert elapsed < 15 * 60
