"""Command-line entry point.

Config files are INI-style key = value text with two sections::

    [scenario]          # ScenarioSpec fields
    label_fraction = 0.5
    target_annotation = point

    [run]               # RunConfig fields
    iterations = 300
    seed = 3

``--preset NAME`` loads one of the shipped benchmark presets first; a
``--config`` file and the overrides are layered on top of it.

``seed`` is shared: it drives both the scenario and the run. Any key may be
overridden on the command line with ``--set key=value`` (repeatable); ``--seed``
and ``--iterations`` are shortcuts.

Exit codes: 0 success, 1 malformed config or missing input, 2 infeasible
scenario, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
import typing
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .core_types import ConfigError, NumericalInstability, RunConfig, SpecError, load_dataset, save_dataset
from .persist import load_checkpoint, save_checkpoint
from .synth_bench import ScenarioSpec, evaluate, generate
from .trainer import CSV_COLUMNS, DivergenceError, train

log = logging.getLogger("gengmm")

EXIT_OK, EXIT_CONFIG, EXIT_SPEC, EXIT_DIVERGED = 0, 1, 2, 3

COMPONENT_VARIANTS = {
    "Lb": {"use_unlabeled": False, "use_gmm_cl": False},
    "Lb+UL": {"use_unlabeled": True, "use_gmm_cl": False},
    "Lb+UL+GMM-Cl": {"use_unlabeled": True, "use_gmm_cl": True},
}
ALPHA_VARIANTS = {
    "w": {"selftrain_weight": "w"},
    "alpha": {"selftrain_weight": "alpha"},
}


# ---------------------------------------------------------------- config


def _field_types(cls) -> Dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _coerce(raw: str, tp, key: str):
    raw = raw.strip()
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        # Optional[List[float]] for the prior vectors
        if raw.lower() in ("", "none"):
            return None
        return [float(v) for v in raw.replace("[", "").replace("]", "").split(",")]
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


@dataclasses.dataclass
class Resolved:
    scenario: ScenarioSpec
    run: RunConfig

    @property
    def seed(self) -> int:
        return self.run.seed

    def to_dict(self) -> dict:
        return {"seed": self.seed, "scenario": self.scenario.to_dict(), "run": self.run.to_dict()}

    def with_seed(self, seed: int) -> "Resolved":
        return Resolved(self.scenario.replace(seed=seed), self.run.replace(seed=seed))


PRESET_DIR = Path(__file__).parent / "presets"


def preset_names() -> List[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.ini"))


def preset_path(name: str) -> Path:
    p = PRESET_DIR / f"{name}.ini"
    if not p.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return p


def _read_ini(path, values, types) -> None:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys such as H, W, C, D, M are case-sensitive
    try:
        parser.read_string(p.read_text(), source=str(p))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    for section in parser.sections():
        if section not in values:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key, raw in parser.items(section):
            if key not in types[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[section][key] = _coerce(raw, types[section][key], key)


def resolve_config(path: Optional[str], overrides: List[str] = (), preset: Optional[str] = None) -> Resolved:
    """Layer preset, config file and ``key=value`` overrides (later wins), then validate."""
    types = {"scenario": _field_types(ScenarioSpec), "run": _field_types(RunConfig)}
    sc_types, run_types = types["scenario"], types["run"]
    values = {"scenario": {}, "run": {}}
    if preset is not None:
        _read_ini(preset_path(preset), values, types)
    if path is not None:
        _read_ini(path, values, types)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        section = key.split(".", 1)[0] if "." in key else None
        if section is not None:
            key = key.split(".", 1)[1]
        hit = False
        for sec, types in (("scenario", sc_types), ("run", run_types)):
            if key in types and section in (None, sec):
                values[sec][key] = _coerce(raw, types[key], key)
                hit = True
        if not hit:
            raise ConfigError(f"unknown override key {key!r}")

    seeds = {values[s]["seed"] for s in values if "seed" in values[s]}
    if len(seeds) > 1:
        raise ConfigError(f"conflicting seeds {sorted(seeds)}")
    seed = seeds.pop() if seeds else RunConfig.seed
    values["scenario"]["seed"] = values["run"]["seed"] = seed
    # the class count is a property of the scenario; the run follows it
    if "C" in values["scenario"] and "C" in values["run"] and values["scenario"]["C"] != values["run"]["C"]:
        raise ConfigError("scenario and run disagree on C")
    c = values["scenario"].get("C", values["run"].get("C", ScenarioSpec.C))
    values["scenario"]["C"] = values["run"]["C"] = c
    try:
        scenario = ScenarioSpec(**values["scenario"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    run = RunConfig(**values["run"])
    return Resolved(scenario, run)


# ---------------------------------------------------------------- outputs


def write_metrics_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in trace:
            w.writerow([row["iter"]] + [repr(float(row[c])) for c in CSV_COLUMNS[1:]])


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_data(args, resolved: Resolved):
    if getattr(args, "data", None):
        p = Path(args.data)
        if not p.is_file():
            raise ConfigError(f"dataset not found: {args.data}")
        source, target, heldout, c = load_dataset(p)
        if c != resolved.run.C:
            raise ConfigError(f"dataset has {c} classes, config says {resolved.run.C}")
        return source, target, heldout
    return generate(resolved.scenario)


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    resolved = resolve_config(args.config, _overrides(args), args.preset)
    source, target, heldout = generate(resolved.scenario)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, source, target, heldout, resolved.scenario.C, resolved.run,
                 scenario=resolved.scenario.to_dict())
    print(f"wrote {len(source)} source, {len(target)} target, {len(heldout)} held-out scenes to {out}")
    return EXIT_OK


def _train_one(resolved: Resolved, data=None):
    source, target, heldout = data if data is not None else generate(resolved.scenario)
    return train(resolved.run, source, target, heldout)


def cmd_train(args) -> int:
    from .plotting import plot_trace

    resolved = resolve_config(args.config, _overrides(args), args.preset)
    data = _load_data(args, resolved)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = _train_one(resolved, data)
    write_metrics_csv(out / "metrics.csv", result.trace)
    save_checkpoint(out / "checkpoint.ggmk", result.pair, result.bank, result.state,
                    result.rng.bit_generator.state, resolved.to_dict(), resolved.run.iterations)
    summary = {
        "version": __version__,
        "command": "train",
        **resolved.to_dict(),
        "data": str(args.data) if args.data else None,
        "final_eval": result.final_eval,
        "trace": result.trace,
        "files": {"metrics": "metrics.csv", "checkpoint": "checkpoint.ggmk", "curves": "curves.png"},
    }
    _write_json(out / "summary.json", summary)
    if not args.no_plots:
        plot_trace(result.trace, out / "curves.png")
    miou = result.final_eval["miou"] if result.final_eval else float("nan")
    print(f"held-out target mIoU {100 * miou:.2f}  ({out})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = Path(args.checkpoint)
    if not ck.is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    state = load_checkpoint(ck)
    saved = state["config"]
    resolved = Resolved(ScenarioSpec.from_dict(saved["scenario"]), RunConfig.from_dict(saved["run"]))
    if args.config or args.set or args.preset:
        resolved = resolve_config(args.config, _overrides(args), args.preset)
    source, target, heldout = _load_data(args, resolved)
    scenes = {"heldout": heldout, "target": target, "source": source}[args.split]
    model = state["pair"].teacher if args.model == "teacher" else state["pair"].student
    res = evaluate(model, scenes, resolved.run.C)
    report = {"version": __version__, "command": "eval", "checkpoint": str(ck), "split": args.split,
              "model": args.model, **resolved.to_dict(), "eval": res.to_dict()}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text if not args.out else f"mIoU {100 * res.miou:.2f}  ({args.out})")
    return EXIT_OK


def sweep_variants(sweep: str, values: Optional[List[int]]) -> Dict[str, dict]:
    if sweep == "components":
        return dict(COMPONENT_VARIANTS)
    if sweep == "alpha":
        return dict(ALPHA_VARIANTS)
    if sweep == "M":
        return {f"M={m}": {"M": m} for m in (values or [1, 3, 5, 7])}
    raise ConfigError(f"unknown sweep {sweep!r}")


def _ablation_job(job: Tuple[dict, dict, str, int]) -> Tuple[str, int, float]:
    scenario, run, name, seed = job
    resolved = Resolved(ScenarioSpec.from_dict(scenario), RunConfig.from_dict(run))
    result = _train_one(resolved)
    return name, seed, float(result.final_eval["miou"])


def run_ablation(resolved: Resolved, variants: Dict[str, dict], seeds: List[int],
                 jobs: int = 1) -> Dict[str, List[float]]:
    """Train every (variant, seed) pair; returns per-variant mIoU lists in seed order."""
    work = []
    for seed in seeds:
        base = resolved.with_seed(seed)
        for name, change in variants.items():
            work.append((base.scenario.to_dict(), base.run.replace(**change).to_dict(), name, seed))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_ablation_job, work))
    else:
        done = [_ablation_job(w) for w in work]
    out = {name: [] for name in variants}
    for name, seed, miou in sorted(done, key=lambda r: (seeds.index(r[1]), r[0])):
        out[name].append(miou)
    return out


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation

    resolved = resolve_config(args.config, _overrides(args), args.preset)
    values = _int_list(args.values) if args.values else None
    variants = sweep_variants(args.sweep, values)
    seeds = _int_list(args.seeds) if args.seeds else [resolved.seed]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_ablation(resolved, variants, seeds, args.jobs)
    with open(out / f"ablation_{args.sweep}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "target_miou"])
        for name, vals in results.items():
            for seed, v in zip(seeds, vals):
                w.writerow([name, seed, repr(v)])
    table = {name: {"median_miou": float(np.median(v)), "per_seed": v} for name, v in results.items()}
    _write_json(out / f"ablation_{args.sweep}.json", {
        "version": __version__, "command": "ablate", "sweep": args.sweep, "seeds": seeds,
        "variants": variants, **resolved.to_dict(), "results": table,
    })
    if not args.no_plots:
        plot_ablation(results, out / f"ablation_{args.sweep}.png", title=f"sweep: {args.sweep}")
    width = max(len(n) for n in results)
    print(f"{'variant':<{width}}  median mIoU  per seed")
    for name, vals in results.items():
        print(f"{name:<{width}}  {100 * np.median(vals):11.2f}  " + " ".join(f"{100 * v:.2f}" for v in vals))
    return EXIT_OK


def _checkpoint(args):
    ck = Path(args.checkpoint)
    if not ck.is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    return load_checkpoint(ck)


def _emit(args, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def cmd_dump_gmm(args) -> int:
    bank = _checkpoint(args)["bank"]
    classes = []
    for c in range(bank.C):
        classes.append({
            "class": c,
            "initialized": bool(bank.initialized[c]),
            "weights": bank.weights[c].tolist(),
            "means": bank.means[c].tolist(),
            "variances": bank.variances[c].tolist(),
            "queue_size": len(bank.queues[c]),
        })
    _emit(args, {"C": bank.C, "M": bank.M, "D": bank.D, "classes": classes})
    return EXIT_OK


def cmd_dump_priors(args) -> int:
    st = _checkpoint(args)["target"]
    _emit(args, {
        "delta_source": st.delta_source.tolist(),
        "delta_target": st.delta_target.tolist(),
        "ratio": (st.delta_target / st.delta_source).tolist(),
        "prototype_ready": st.proto_ready.tolist(),
    })
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _overrides(args) -> List[str]:
    out = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        out.append(f"seed={args.seed}")
    if getattr(args, "iterations", None) is not None:
        out.append(f"iterations={args.iterations}")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gengmm", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--preset", help=f"named benchmark preset ({', '.join(preset_names())})")
        sp.add_argument("--config", help="key-value config file ([scenario] and [run] sections)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--iterations", type=int)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    with_config(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and write metrics, summary, checkpoint and curves")
    with_config(t)
    t.add_argument("--data", help="dataset from `generate`; default regenerates from the scenario")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--no-plots", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", choices=("heldout", "target", "source"), default="heldout")
    e.add_argument("--model", choices=("teacher", "student"), default="teacher")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation sweep over seeds")
    with_config(a)
    a.add_argument("--sweep", choices=("components", "alpha", "M"), required=True)
    a.add_argument("--values", help="comma-separated values for the M sweep")
    a.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    a.add_argument("--out-dir", required=True)
    a.add_argument("--no-plots", action="store_true")
    a.set_defaults(func=cmd_ablate)

    for name, fn, what in (("dump-gmm", cmd_dump_gmm, "source GMM bank"),
                           ("dump-priors", cmd_dump_priors, "source/target class priors")):
        d = sub.add_parser(name, help=f"print the {what} of a checkpoint as JSON")
        d.add_argument("--checkpoint", required=True)
        d.add_argument("--out")
        d.set_defaults(func=fn)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpecError as exc:
        print(f"infeasible scenario: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except (DivergenceError, NumericalInstability) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        snap = getattr(exc, "snapshot", None)
        if snap:
            print(json.dumps(snap, default=float), file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
