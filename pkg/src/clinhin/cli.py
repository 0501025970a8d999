"""Command-line entry points: ingest, train, ablate, predict, evaluate, synth.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 leakage error.
Every command that writes artifacts also writes a ``manifest.json`` next to
them recording the configuration, input digests, seed and wall-clock time.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .embedding import EmbeddingModel
from .evaluate import (
    ColdPatient,
    LeakageError,
    compose_patient,
    degree_ranker,
    evaluate_ranking,
    format_prediction,
    predict_cohorts,
    rank_diagnoses,
)
from .events import NodeType
from .graph import CANDIDATE_METAPATHS, SchemaError, build_graph
from .ingest import (
    ConfigError,
    DataError,
    collapse_to_cohorts,
    load_cohort_table,
    load_tables,
    read_stays,
    split,
    write_stays,
)
from .synth import InfeasibleSpec, SynthSpec, generate, write_tables
from .trainer import TREATMENT_ABBREVS, TrainConfig, coerce_config, fit, network_stays, parse_list, read_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_LEAKAGE = 4

logger = logging.getLogger("clinhin")


@dataclass
class RunManifest:
    command: str
    seed: Optional[int]
    config: Dict[str, object] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def add_input(self, path: Path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_artifact(self, name: str, path: Path) -> None:
        self.artifacts[name] = str(path)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- config plumbing


def _parse_treatment(text: str) -> tuple:
    if text.strip().lower() == "all":
        return TREATMENT_ABBREVS
    return parse_list(text)


def build_config(args: argparse.Namespace) -> TrainConfig:
    """Config file values, then command-line overrides."""
    config = read_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides: Dict[str, object] = {}
    for flag, key in (("seed", "seed"), ("dim", "dim"), ("omega", "omega"), ("margin", "margin"),
                      ("lam", "lam"), ("epochs", "epochs"), ("deterministic", "deterministic")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "schemas", None) is not None:
        overrides["schemas"] = parse_list(args.schemas)
    if getattr(args, "treatment", None) is not None:
        overrides["treatment"] = _parse_treatment(args.treatment)
    return coerce_config(overrides, config) if overrides else config


def _parse_ks(text: str) -> List[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"--k expects integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError("--k values must be >= 1")
    return ks


def _dataset_files(dataset: Path) -> tuple:
    train, test = dataset / "train.jsonl", dataset / "test.jsonl"
    for p in (train, test):
        if not p.is_file():
            raise DataError(f"dataset file not found: {p}")
    return train, test


def _is_cohort_model(model: EmbeddingModel, table) -> bool:
    canonical = {table.canonical_code(label) for label in table.labels}
    diag = model.nodes_of_type(NodeType.DIAGNOSIS)
    return len(diag) > 0 and all(model.keys[n].identity in canonical for n in diag)


# ---------------------------------------------------------------- commands


def cmd_ingest(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    data_dir = Path(args.data_dir)
    spec = Path(args.table_spec) if args.table_spec else data_dir / "table_spec.ini"
    if not spec.is_file():
        spec = None
    stays, report = load_tables(data_dir, spec, default_lab_flag=args.default_lab_flag)
    if len(stays) < 2:
        raise DataError(f"only {len(stays)} usable stays in {data_dir}")
    train, test = split(stays, args.test_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_stays(out / "train.jsonl", train)
    write_stays(out / "test.jsonl", test)
    lines = [f"stays={len(stays)}", f"train={len(train)}", f"test={len(test)}"] + report.as_lines()
    (out / "counts.txt").write_text("\n".join(lines) + "\n")

    manifest = RunManifest("ingest", args.seed, {"test_fraction": args.test_fraction,
                                                 "default_lab_flag": args.default_lab_flag})
    for name in sorted(p.name for p in data_dir.glob("*.csv")):
        manifest.add_input(data_dir / name)
    if spec is not None:
        manifest.add_input(spec)
    for name in ("train.jsonl", "test.jsonl", "counts.txt"):
        manifest.add_artifact(name, out / name)
    manifest.wall_clock_seconds = time.perf_counter() - t0
    manifest.write(out / "manifest.json")
    print("\n".join(lines))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    config = build_config(args)
    train_path, _ = _dataset_files(Path(args.dataset))
    stays = read_stays(train_path)
    if args.cohorts:
        stays = collapse_to_cohorts(stays, load_cohort_table(args.cohort_table))
    g, model, stats = fit(stays, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save_text(out / "model.txt")
    model.save_binary(out / "model.bin")

    manifest = RunManifest("train", config.seed, dict(config.to_dict(), cohorts=bool(args.cohorts)))
    manifest.add_input(train_path)
    manifest.add_artifact("model_text", out / "model.txt")
    manifest.add_artifact("model_binary", out / "model.bin")
    manifest.wall_clock_seconds = time.perf_counter() - t0
    manifest.write(out / "manifest.json")
    print(f"nodes={len(g)}")
    print(f"edges={g.num_edges}")
    print(f"steps={stats.steps}")
    print(f"unsup_steps={stats.unsup_steps}")
    print(f"sup_steps={stats.sup_steps}")
    print(f"schemas={','.join(stats.active_schemas)}")
    return EXIT_OK


def _ablation_row(section: str, label: str, report) -> str:
    metrics = "\t".join(f"map@{k}={report.map[k]:.6f}" for k in report.ks)
    return f"{section}\t{label}\t{metrics}"


def run_ablation(train: Sequence, test: Sequence, base: TrainConfig, ks: Sequence[int]) -> List[str]:
    """Treatment-subset rows, single-metapath rows and cumulative rows.

    Treatment subsets run without metapaths. Single metapaths run with every
    treatment type; the cumulative rows add them in descending single-path
    MAP at the first ``k``.
    """
    def score(config):
        _, model, _ = fit(train, config)
        return evaluate_ranking(model, test, ks)

    lines = []
    for r in range(len(TREATMENT_ABBREVS) + 1):
        for subset in combinations(TREATMENT_ABBREVS, r):
            config = dataclasses.replace(base, treatment=subset, schemas=())
            lines.append(_ablation_row("treatment", "+".join(subset) or "none", score(config)))

    full = dataclasses.replace(base, treatment=TREATMENT_ABBREVS)
    lines.append(_ablation_row("single", "none", score(dataclasses.replace(full, schemas=()))))
    singles = []
    for path in CANDIDATE_METAPATHS:
        report = score(dataclasses.replace(full, schemas=(path.label,)))
        singles.append((path.label, report))
    singles.sort(key=lambda item: -item[1].map[ks[0]])
    lines += [_ablation_row("single", label, rep) for label, rep in singles]
    chosen: List[str] = []
    for label, _ in singles:
        chosen.append(label)
        report = score(dataclasses.replace(full, schemas=tuple(chosen)))
        lines.append(_ablation_row("cumulative", "+".join(chosen), report))
    return lines


def cmd_ablate(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    base = build_config(args)
    ks = _parse_ks(args.k)
    train_path, test_path = _dataset_files(Path(args.dataset))
    lines = run_ablation(read_stays(train_path), read_stays(test_path), base, ks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    manifest = RunManifest("ablate", base.seed, base.to_dict())
    manifest.add_input(train_path)
    manifest.add_input(test_path)
    manifest.add_artifact("report", out)
    manifest.wall_clock_seconds = time.perf_counter() - t0
    manifest.write(out.with_name(out.stem + ".manifest.json"))
    print("\n".join(lines))
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    ks = _parse_ks(args.k)
    if len(ks) != 1:
        raise ConfigError("predict takes a single --k")
    model = EmbeddingModel.load(args.model)
    stays = read_stays(args.patients)
    lines = []
    for stay in stays:
        try:
            vec = compose_patient(model, stay.events)
        except ColdPatient:
            print(f"{stay.stay_id}: no known events, skipped", file=sys.stderr)
            continue
        pred = rank_diagnoses(model, None, vec, ks[0], stay.stay_id)
        lines.append(format_prediction(model, pred))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    ks = _parse_ks(args.k)
    model = EmbeddingModel.load(args.model)
    dataset = Path(args.dataset)
    test_path = dataset / "test.jsonl" if dataset.is_dir() else dataset
    test = read_stays(test_path)
    table = load_cohort_table(args.cohort_table)
    cohort_model = _is_cohort_model(model, table)
    if cohort_model:
        test = collapse_to_cohorts(test, table)
    report = evaluate_ranking(model, test, ks, cohort_table=table, denominator=args.denominator)
    lines = report.as_lines()
    if args.baseline:
        train_path = dataset / "train.jsonl"
        if not train_path.is_file():
            raise DataError(f"--baseline needs {train_path}")
        train = read_stays(train_path)
        if cohort_model:
            train = collapse_to_cohorts(train, table)
        g = build_graph(network_stays(train, ()))
        base = evaluate_ranking(model, test, ks, denominator=args.denominator, ranker=degree_ranker(g))
        lines += [f"baseline.degree.map@{k}={base.map[k]:.6f}" for k in ks]
    if cohort_model:
        lines += predict_cohorts(model, None, test, table).as_lines()
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(n_patients=args.patients, n_clusters=args.clusters, beta=args.beta, seed=args.seed)
    dataset = generate(spec)
    out = write_tables(dataset, args.out)
    print(f"patients={len(dataset.stays)}")
    print(f"clusters={spec.n_clusters}")
    print(f"out={out}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with a [train] section")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--schemas", help="comma-separated metapath labels, or 'none'")
    p.add_argument("--treatment", help="comma-separated subset of pres,proc,diag; 'all' or 'none'")
    p.add_argument("--dim", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clinhin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load clinical tables and split train/test")
    p.add_argument("data_dir")
    p.add_argument("--table-spec")
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--default-lab-flag", default="normal", choices=["normal", "abnormal"])
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train node embeddings on an ingested dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cohorts", action="store_true", help="collapse diagnoses to cohort labels first")
    p.add_argument("--cohort-table")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="treatment-subset and metapath ablation report")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--k", default="3,5,10")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="rank diagnoses for patients in a stays file")
    p.add_argument("model")
    p.add_argument("patients", help="JSON-lines stays file with diagnostic events only")
    p.add_argument("--k", default="10")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="MAP@k (and cohort AUROC) on a held-out set")
    p.add_argument("model")
    p.add_argument("dataset", help="dataset directory or a test stays file")
    p.add_argument("--k", default="3,5,10")
    p.add_argument("--denominator", default="hits", choices=["hits", "min"])
    p.add_argument("--cohort-table")
    p.add_argument("--baseline", action="store_true", help="also report the degree-ranked baseline")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic dataset in ingest format")
    p.add_argument("out")
    p.add_argument("--patients", type=int, default=5000)
    p.add_argument("--clusters", type=int, default=20)
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LeakageError as exc:
        print(f"leakage error: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except (ConfigError, SchemaError, InfeasibleSpec) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
