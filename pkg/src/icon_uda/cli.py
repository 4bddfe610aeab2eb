"""Command-line front end: ``generate``, ``train``, ``eval``, ``probe`` and ``ablate``.

Every command prints a JSON run manifest on stdout. Exit codes: 0 success,
2 usage or config error, 3 numerical abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datagen import (DOMINATION, SCENARIOS, DatasetParseError, DomainDataset, SpuriousShiftConfig,
                      generate, load_dataset, save_dataset)
from .evaluation import EvaluationError, confusion, mean_class_accuracy, probe_g_vs_f
from .models import CheckpointError, ConfigError, load_checkpoint, save_checkpoint
from .trainer import (PRESETS, NumericalError, TrainConfig, apply_overrides, parse_kv_lines,
                      preset, train)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

SUITES = {
    "components": [("erm", "erm", {}), ("self_training", "self_training", {}),
                   ("con", "con", {}), ("icon", "icon", {})],
    "cluster_count": [(f"clusters_x{m:g}", "icon", {"cluster_multiplier": m}) for m in (0.5, 1.0, 2.0)],
    "alpha_beta": ([(f"alpha={a:g}", "icon", {"alpha": a}) for a in (0.25, 0.5, 0.75, 1.0)]
                   + [(f"beta={b:g}", "icon", {"beta": b}) for b in (0.05, 0.1, 0.15, 0.25)]),
}


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int | None
    out: str
    files: list[str] = field(default_factory=list)
    results: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class UsageError(Exception):
    pass


# configuration -----------------------------------------------------------------

_GEN_KEYS = {f.name for f in fields(SpuriousShiftConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _parse_override(text: str) -> tuple[str, str]:
    key, sep, val = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"--override expects KEY=VALUE, got {text!r}")
    return key.strip(), val.strip()


def _settings(args) -> tuple[dict, dict]:
    """Config-file keys, then ``--override`` pairs, split into generator and trainer keys."""
    merged: dict[str, str] = {}
    if args.config:
        merged.update(parse_kv_lines(Path(args.config).read_text(encoding="utf-8"), args.config))
    for item in args.override or []:
        key, val = _parse_override(item)
        merged[key] = val
    gen, trn = {}, {}
    for key, val in merged.items():
        if key in _TRAIN_KEYS:
            trn[key] = val
        elif key in _GEN_KEYS:
            gen[key] = val
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return gen, trn


def _gen_config(args, gen_pairs: dict) -> SpuriousShiftConfig:
    base = SpuriousShiftConfig(**DOMINATION) if args.regime == "domination" else SpuriousShiftConfig()
    return apply_overrides(base, gen_pairs).validate()


def _train_config(name: str, train_pairs: dict, seed: int | None, extra: dict | None = None) -> TrainConfig:
    cfg = apply_overrides(preset(name, **(extra or {})), train_pairs)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg.validate()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> str:
    path.write_bytes(text.encode("utf-8"))
    return str(path)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_model_for(args, ds: DomainDataset):
    model = load_checkpoint(args.checkpoint)
    if model.input_dim != ds.input_dim:
        raise CheckpointError(f"{args.checkpoint}: model expects {model.input_dim} input features, "
                              f"dataset has {ds.input_dim}")
    return model


# commands --------------------------------------------------------------------

def cmd_generate(args) -> RunManifest:
    if args.out is None:
        raise UsageError("generate requires --out PATH")
    gen_pairs, _ = _settings(args)
    cfg = _gen_config(args, gen_pairs)
    seed = 0 if args.seed is None else args.seed
    ds = generate(args.scenario, cfg, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    return RunManifest("generate", args.config, seed, str(out.parent), [str(out)],
                       {"scenario": args.scenario, "n_source": len(ds.source_y), "n_target": len(ds.target_y)})


def cmd_train(args) -> RunManifest:
    _, train_pairs = _settings(args)
    cfg = _train_config(args.preset, train_pairs, args.seed)
    ds = load_dataset(args.data)
    out = _out_dir(args)
    log = train(ds, cfg)
    final = log.final()
    summary = {"preset": args.preset, "data": str(args.data), "config": cfg.to_dict(),
               "final": {"epoch": final.epoch, "acc_s": final.acc_s, "acc_t": final.acc_t,
                         "probe_pct": final.probe_pct, **final.losses},
               "seconds": log.seconds}
    ckpt = out / "model.ckpt"
    save_checkpoint(log.model, ckpt)
    files = [_write(out / "metrics.csv", log.metrics_csv()),
             _write(out / "summary.json", _json(summary)), str(ckpt)]
    return RunManifest("train", args.config, cfg.seed, str(out), files,
                       {"acc_s": final.acc_s, "acc_t": final.acc_t})


def cmd_eval(args) -> RunManifest:
    ds = load_dataset(args.data)
    model = _load_model_for(args, ds)
    out = _out_dir(args)
    cm = confusion(model, ds.target_x, ds.target_y)
    results = {"acc_s": float(np.mean(model.predict(ds.source_x) == ds.source_y)),
               "acc_t": cm.accuracy(),
               "mean_class_acc_t": mean_class_accuracy(model, ds.target_x, ds.target_y)}
    files = [_write(out / "eval.json", _json(results)), _write(out / "confusion.csv", cm.to_csv())]
    return RunManifest("eval", args.config, args.seed, str(out), files, results)


def cmd_probe(args) -> RunManifest:
    ds = load_dataset(args.data)
    if len(ds.target_y) < 2:
        raise EvaluationError(f"{args.data}: probe needs at least 2 target rows, found {len(ds.target_y)}")
    model = _load_model_for(args, ds)
    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    res = probe_g_vs_f(model, ds.target_x, ds.target_y, n_pairs=args.pairs, seed=seed)
    results = asdict(res)
    files = [_write(out / "probe.json", _json(results))]
    return RunManifest("probe", args.config, seed, str(out), files, results)


def ablation_settings(args) -> list[tuple[str, str, dict]]:
    if args.suite and args.param:
        raise UsageError("give either --suite or --param, not both")
    if args.suite:
        if args.suite not in SUITES:
            raise UsageError(f"unknown suite {args.suite!r}; expected one of {sorted(SUITES)}")
        return SUITES[args.suite]
    if not args.param or not args.values:
        raise UsageError("ablate needs --suite NAME or --param NAME --values V1,V2,...")
    if args.param not in _TRAIN_KEYS:
        raise ConfigError(f"unknown config key {args.param!r}")
    return [(f"{args.param}={v.strip()}", args.preset, {args.param: v.strip()})
            for v in args.values.split(",") if v.strip()]


def cmd_ablate(args) -> RunManifest:
    settings = ablation_settings(args)
    gen_pairs, train_pairs = _settings(args)
    first = 0 if args.seed is None else args.seed
    seeds = list(range(first, first + args.seeds))
    data = load_dataset(args.data) if args.data else None
    gen_cfg = None if data else _gen_config(args, gen_pairs)
    out = _out_dir(args)
    run_lines = ["setting,seed,acc_s,acc_t,probe_pct"]
    agg_lines = ["setting,preset,runs,mean_acc_t,std_acc_t"]
    summary = {}
    for label, name, extra in settings:
        accs = []
        for seed in seeds:
            ds = data if data is not None else generate(args.scenario, gen_cfg, seed)
            cfg = _train_config(name, {**train_pairs, **extra}, seed)
            final = train(ds, cfg).final()
            accs.append(final.acc_t)
            run_lines.append(f"{label},{seed},{final.acc_s!r},{final.acc_t!r},{final.probe_pct!r}")
        mean, std = float(np.mean(accs)), float(np.std(accs))
        agg_lines.append(f"{label},{name},{len(accs)},{mean!r},{std!r}")
        summary[label] = {"mean_acc_t": mean, "std_acc_t": std}
    files = [_write(out / "ablation.csv", "\n".join(agg_lines) + "\n"),
             _write(out / "runs.csv", "\n".join(run_lines) + "\n")]
    return RunManifest("ablate", args.config, first, str(out), files, summary)


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "probe": cmd_probe, "ablate": cmd_ablate}


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="config override, repeatable; wins over --config")

    parser = argparse.ArgumentParser(prog="icon-uda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset CSV")
    p.add_argument("--scenario", choices=SCENARIOS, default="spurious_shift")
    p.add_argument("--regime", choices=("default", "domination"), default="default")
    p.add_argument("--out", help="dataset CSV path")

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--preset", choices=sorted(PRESETS), default="icon")
    p.add_argument("--out", default="run", help="output directory")

    for name, text in (("eval", "accuracy and confusion matrix of a checkpoint"),
                       ("probe", "share of target pairs g gets right where f fails")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", required=True, help="dataset CSV")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", default="run", help="output directory")
        if name == "probe":
            p.add_argument("--pairs", type=int, default=10_000, help="pairs to sample")

    p = sub.add_parser("ablate", parents=[common], help="sweep settings over seeds")
    p.add_argument("--suite", help=f"one of {', '.join(sorted(SUITES))}")
    p.add_argument("--param", help="TrainConfig key to sweep")
    p.add_argument("--values", help="comma-separated values for --param")
    p.add_argument("--preset", choices=sorted(PRESETS), default="icon", help="base for --param sweeps")
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    p.add_argument("--data", help="dataset CSV; default generates one per seed")
    p.add_argument("--scenario", choices=SCENARIOS, default="spurious_shift")
    p.add_argument("--regime", choices=("default", "domination"), default="domination")
    p.add_argument("--out", default="ablation", help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort in term {exc.term}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetParseError, CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, EvaluationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(manifest.to_json())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
