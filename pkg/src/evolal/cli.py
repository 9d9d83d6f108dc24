"""Batch command line interface.

Exit codes: 0 success, 1 invalid data or configuration, 2 a solver hit
its iteration cap, 64 usage errors. All artifacts land under --output.
Config files are JSON mirroring the library config sections; explicit
flags win over file values.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .baselines import DQNConfig, GPConfig
from .edm import EDMConfig
from .errors import ConfigError, ConvergenceError, EvolalError
from .evaluation import (METRIC_NAMES, MethodConfigs, build_method,
                         build_methods, compare_methods, reports_to_csv,
                         reports_to_markdown, run_temporal_cv)
from .hlirl import RegulatorConfig
from .ingest import (Quantizer, parse_dataset, qlg_label, records_to_dataset,
                     write_dataset)
from .core import standardize
from .partition import PartitionConfig
from .policynet import TrainConfig
from .synth import EmitterConfig, write_emitter
from .themes import ThemesConfig, step_posteriors

EXIT_OK = 0
EXIT_DATA = 1
EXIT_CONVERGENCE = 2
EXIT_USAGE = 64

ALL_METHODS = ("bc", "gp-dqn", "edm", "em-edm", "themes0", "themes1",
               "themes")
THEMES_METHODS = ("themes0", "themes1", "themes")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config files

def _section(cls, doc: dict, path: str):
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"config section {path!r}: {exc}") from exc


def _train_section(doc: dict, path: str) -> TrainConfig:
    return _section(TrainConfig, doc, path)


def _edm_section(doc: dict, path: str) -> EDMConfig:
    doc = dict(doc)
    train = _train_section(doc.pop("train", {}), f"{path}.train")
    kwargs = {**doc, "train": train}
    return _section(EDMConfig, kwargs, path)


def _themes_section(doc: dict) -> ThemesConfig:
    doc = dict(doc)
    part = _section(PartitionConfig, doc.pop("partition", {}),
                    "themes.partition")
    edm = _edm_section(doc.pop("edm", {}), "themes.edm")
    reg = _section(RegulatorConfig, doc.pop("regulator", {}),
                   "themes.regulator")
    return _section(ThemesConfig,
                    {**doc, "partition": part, "edm": edm, "regulator": reg},
                    "themes")


RUN_KEYS = ("methods", "seeds", "expert_filter", "metric", "alpha",
            "bc", "bc_loss", "edm", "gp", "dqn", "themes")


def load_run_config(path) -> dict:
    """Parse the JSON run config into {settings, configs} with unknown
    keys rejected."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON "
                              f"({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    unknown = doc.keys() - set(RUN_KEYS)
    if unknown:
        raise ConfigError(
            f"config file {path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    if "bc" in doc:
        kwargs["bc"] = _train_section(doc["bc"], "bc")
    if "bc_loss" in doc:
        kwargs["bc_loss"] = str(doc["bc_loss"])
    if "edm" in doc:
        kwargs["edm"] = _edm_section(doc["edm"], "edm")
    if "gp" in doc:
        kwargs["gp"] = _section(GPConfig, doc["gp"], "gp")
    if "dqn" in doc:
        dqn = dict(doc["dqn"])
        train = _train_section(dqn.pop("train", {}), "dqn.train")
        kwargs["dqn"] = _section(DQNConfig, {**dqn, "train": train}, "dqn")
    if "themes" in doc:
        kwargs["themes"] = _themes_section(doc["themes"])
    settings = {k: doc[k] for k in ("methods", "seeds", "expert_filter",
                                    "metric", "alpha") if k in doc}
    return {"settings": settings, "configs": MethodConfigs(**kwargs)}


def default_run_config() -> MethodConfigs:
    """Library defaults: six partition clusters over width-2 windows at
    lambda 1e-3 and switch penalty 4, three intent clusters, ten outer
    iterations."""
    return MethodConfigs()


def _configs_for(args) -> tuple[MethodConfigs, dict]:
    if getattr(args, "config", None):
        loaded = load_run_config(args.config)
        return loaded["configs"], loaded["settings"]
    return default_run_config(), {}


# ---------------------------------------------------------------------------
# helpers

def _outdir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolve_jobs(value: int | None) -> int:
    if value is None:
        value = int(os.environ.get("EVOLAL_JOBS", "1"))
    if value < 1:
        raise ConfigError(f"jobs must be >= 1, got {value}")
    return value


def _infer_n_actions(records) -> int:
    peak = 0
    for rec in records:
        acts = rec.trajectory.actions
        if len(acts):
            peak = max(peak, int(acts.max()))
    return max(peak + 1, 2)


def _seed_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc


def _method_list(text: str) -> list[str]:
    names = [v for v in text.split(",") if v != ""]
    for name in names:
        if name not in ALL_METHODS:
            raise ConfigError(f"unknown method {name!r}; choose from "
                              f"{', '.join(ALL_METHODS)}")
    return names


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    out = _outdir(args)
    cfg = EmitterConfig(
        n_students=args.n_students, n_steps=args.n_steps,
        m_s=args.state_dim, q_true=args.q_true, k_true=args.k_true,
        separation=args.separation, intent_p=args.intent_p,
        intent_cue=args.intent_cue,
        semesters=tuple(args.semesters.split(",")), seed=args.seed)
    records, _ = write_emitter(cfg, out / "synth.jsonl", out / "truth.json")
    print(f"wrote {len(records)} records to {out / 'synth.jsonl'} "
          f"(ground truth in truth.json)")
    return EXIT_OK


def cmd_ingest(args) -> int:
    records = parse_dataset(args.input, strict=args.strict)
    out = _outdir(args)
    write_dataset(out / "ingested.jsonl", records)
    counts: dict[str, int] = {}
    for rec in records:
        counts[rec.semester] = counts.get(rec.semester, 0) + 1
    for sem in counts:
        print(f"{sem}: {counts[sem]} records")
    print(f"wrote {len(records)} records to {out / 'ingested.jsonl'}")
    return EXIT_OK


def cmd_filter_experts(args) -> int:
    records = parse_dataset(args.input, strict=args.strict)
    quantizer = Quantizer.tertiles(records)
    kept = [r for r in records
            if qlg_label(r, quantizer).label == "High"]
    out = _outdir(args)
    write_dataset(out / "experts.jsonl", kept)
    print(f"kept {len(kept)} of {len(records)} records "
          f"(boundaries {quantizer.low_cut:.4f}/{quantizer.high_cut:.4f})")
    return EXIT_OK


def _fit_single(args, records):
    cfgs, _ = _configs_for(args)
    n_actions = _infer_n_actions(records)
    data = records_to_dataset(records)
    data_std, stats = standardize(data)
    method = build_method(args.method, cfgs, n_actions)
    state = method.fit(data_std, args.seed)
    doc = {"method": args.method, "seed": args.seed,
           "n_actions": n_actions,
           "stats": {"mean": stats.mean.tolist(),
                     "std": stats.std.tolist()},
           "model": method.save(state)}
    return state, doc


def cmd_train(args) -> int:
    records = parse_dataset(args.input)
    _, doc = _fit_single(args, records)
    out = _outdir(args)
    path = out / "model.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
    print(f"trained {args.method} on {len(records)} records -> {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    records = parse_dataset(args.input)
    cfgs, settings = _configs_for(args)
    jobs = resolve_jobs(args.jobs)
    methods = _method_list(args.methods) if args.methods \
        else settings.get("methods", list(ALL_METHODS))
    seeds = _seed_list(args.seeds) if args.seeds \
        else [int(s) for s in settings.get("seeds", [0])]
    expert_filter = settings.get("expert_filter", True)
    if args.no_expert_filter:
        expert_filter = False
    built = build_methods(methods, cfgs, _infer_n_actions(records))
    reports = run_temporal_cv(records, built, seeds=tuple(seeds),
                              expert_filter=expert_filter)
    out = _outdir(args)
    csv_text = reports_to_csv(reports)
    md_text = reports_to_markdown(reports)
    (out / "reports.csv").write_text(csv_text, encoding="utf-8")
    (out / "table.md").write_text(md_text, encoding="utf-8")
    print(f"jobs={jobs} methods={','.join(methods)} "
          f"seeds={','.join(map(str, seeds))}")
    print(md_text, end="")
    print(f"wrote {out / 'reports.csv'} and {out / 'table.md'}")
    return EXIT_OK


def _matrix_from_csv(path, metric: str):
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != "method,seed,fold,metric,value":
        raise ConfigError(f"{path} is not a reports csv")
    cells: dict[str, list[float]] = {}
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise ConfigError(f"{path}: malformed row at line {ln}")
        method, _, fold, name, value = parts
        if fold in ("mean", "std") or name != metric:
            continue
        cells.setdefault(method, []).append(float(value))
    if not cells:
        raise ConfigError(f"{path}: no rows for metric {metric!r}")
    names = list(cells)
    lengths = {len(v) for v in cells.values()}
    if len(lengths) != 1:
        raise ConfigError(f"{path}: methods cover different cells")
    return np.array([cells[n] for n in names]).T, names


def cmd_compare(args) -> int:
    matrix, names = _matrix_from_csv(args.input, args.metric)
    cmp = compare_methods(matrix, names, alpha=args.alpha)
    out = _outdir(args)
    path = out / "comparison.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cmp.to_dict(), fh, sort_keys=True)
    print(f"friedman chi2={cmp.friedman_stat:.4f} p={cmp.friedman_p:.6f}")
    for name, rank in sorted(zip(cmp.names, cmp.mean_ranks),
                             key=lambda nr: nr[1]):
        print(f"  {name}: mean rank {rank:.3f}")
    for g, group in enumerate(cmp.groups):
        print(f"group {g}: {', '.join(group)}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_export(args) -> int:
    records = parse_dataset(args.input)
    state, doc = _fit_single(args, records)
    out = _outdir(args)
    with open(out / "model.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
    posts = step_posteriors(state)
    lines = ["traj_id,step,label," + ",".join(
        f"p{o}" for o in range(state.mixture.n_clusters))]
    for j, (lab, post) in enumerate(zip(state.step_label_seqs, posts)):
        traj_id = records[j].student_id
        for t in range(post.shape[0]):
            cols = ",".join(f"{v:.6f}" for v in post[t])
            lines.append(f"{traj_id},{t + 1},{int(lab[t])},{cols}")
    (out / "posteriors.csv").write_text("\n".join(lines) + "\n",
                                        encoding="utf-8")
    print(f"wrote {out / 'model.json'} and {out / 'posteriors.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(
        prog="evolal",
        description="Strictly offline apprenticeship-learning toolkit: "
                    "time-aware partitioning, policy mixtures, and a "
                    "high-level reward regulator.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(
            name, help=help_text,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(handler=fn)
        p.add_argument("--output", "-o", default="evolal-out",
                       help="directory for artifacts")
        return p

    p = add("synth", cmd_synth, "generate a synthetic trajectory corpus")
    p.add_argument("--n-students", type=int, default=30)
    p.add_argument("--n-steps", type=int, default=20)
    p.add_argument("--state-dim", type=int, default=10)
    p.add_argument("--q-true", type=int, default=3)
    p.add_argument("--k-true", type=int, default=3)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--intent-p", type=float, default=1.0)
    p.add_argument("--intent-cue", type=float, default=0.0)
    p.add_argument("--semesters", default="S1,S2,S3,S4")
    p.add_argument("--seed", type=int, default=0)

    p = add("ingest", cmd_ingest, "validate and normalize a JSONL corpus")
    p.add_argument("input")
    p.add_argument("--strict", action="store_true",
                   help="reject unknown fields")

    p = add("filter-experts", cmd_filter_experts,
            "keep the demonstrators with high quantized learning gain")
    p.add_argument("input")
    p.add_argument("--strict", action="store_true")

    p = add("train", cmd_train, "fit one method on a full corpus")
    p.add_argument("input")
    p.add_argument("--method", choices=ALL_METHODS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON run config")

    p = add("evaluate", cmd_evaluate,
            "temporal cross-validation benchmark")
    p.add_argument("input")
    p.add_argument("--methods", default=None,
                   help="comma list (default: all methods)")
    p.add_argument("--seeds", default=None, help="comma list of seeds")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--no-expert-filter", action="store_true",
                   help="train on every student, not just experts")
    p.add_argument("--jobs", type=int, default=None,
                   help="scheduling hint; falls back to EVOLAL_JOBS")

    p = add("compare", cmd_compare,
            "rank methods from a reports.csv with Friedman/Conover")
    p.add_argument("input")
    p.add_argument("--metric", choices=METRIC_NAMES, default="accuracy")
    p.add_argument("--alpha", type=float, default=0.05)

    p = add("export", cmd_export,
            "fit a pipeline variant and dump model + step posteriors")
    p.add_argument("input")
    p.add_argument("--method", choices=THEMES_METHODS, default="themes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON run config")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (EvolalError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
