"""Command-line entry point: ``tdvcl run <config.json>`` and ``tdvcl check <suite>``.

Exit codes: 0 success, 1 failed check or runtime failure, 2 usage or
configuration error. Relative dataset paths resolve against
``$TDVCL_DATA_ROOT`` when set, else ``./data``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .checks import SUITES
from .evalreport import emit_report, table_rows
from .numcore import ContractError, NumericError, SeededRng
from .objectives import KINDS, ObjectiveSpec
from .oracle import kl_trajectory, make_conjugate_stream, write_kl_csv
from .tasks import (TaskDataset, load_idx, make_permuted_stream, make_split_stream,
                    make_synthetic_stream)
from .trainer import ContinualConfig, TrainConfig, run_continual

log = logging.getLogger("tdvcl")

DATA_ROOT_ENV = "TDVCL_DATA_ROOT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

_POS_INT = {"type": "integer", "minimum": 1}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["benchmark", "seeds", "output_dir"],
    "additionalProperties": False,
    "properties": {
        "benchmark": {"enum": ["permuted", "split", "synthetic", "oracle"]},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "output_dir": {"type": "string"},
        "tasks": _POS_INT,
        "head": {"enum": ["single", "multi"]},
        "pairs": {"type": "array", "items": {"type": "array", "items": {"type": "integer"},
                                             "minItems": 2, "maxItems": 2}},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train_images": {"type": "string"}, "train_labels": {"type": "string"},
                "test_images": {"type": "string"}, "test_labels": {"type": "string"},
                "n_train": _POS_INT, "n_test": _POS_INT, "split_seed": {"type": "integer"},
            },
            "required": ["train_images", "train_labels"],
        },
        "synthetic": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n_train": _POS_INT, "n_test": _POS_INT, "dim": _POS_INT,
                           "classes": {"type": "integer", "minimum": 2}, "spread": _POS_NUM},
        },
        "methods": {"type": "array", "minItems": 1, "items": {"$ref": "#/$defs/method"}},
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": _POS_INT, "max_epochs": _POS_INT, "learning_rate": _POS_NUM,
                "patience": _POS_NUM, "train_mc_samples": _POS_INT,
                "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
                "kl_dataset_scaling": {"type": "boolean"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "array", "items": _POS_INT},
                "prior_variance": _POS_NUM,
                "init_mean_scale": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "eval_samples": _POS_INT,
                "coreset_epochs": _POS_INT,
            },
        },
        "replay": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"tasks": {"type": "integer", "minimum": 0},
                           "per_task": {"type": "integer", "minimum": 0}},
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dim": _POS_INT, "n_per_task": _POS_INT, "noise_var": _POS_NUM,
                "prior_var": _POS_NUM, "noise_scale": {"type": "number", "minimum": 0},
                "modes": {"type": "array", "minItems": 1,
                          "items": {"type": "string", "pattern": r"^(single_step|n_step\(\d+\))$"}},
            },
        },
    },
    "allOf": [
        {"if": {"properties": {"benchmark": {"const": "oracle"}}},
         "then": {"required": ["oracle"]},
         "else": {"required": ["methods"]}},
        {"if": {"properties": {"benchmark": {"enum": ["permuted", "split"]}}},
         "then": {"required": ["data"]}},
        {"if": {"properties": {"benchmark": {"const": "split"}}},
         "then": {"required": ["pairs"]}},
    ],
    "$defs": {
        "method": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(KINDS)},
                "n": _POS_INT,
                "lambda": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta": _POS_NUM,
            },
            "allOf": [
                {"if": {"properties": {"kind": {"const": "TDLambda"}}},
                 "then": {"required": ["n", "lambda", "beta"]}},
                {"if": {"properties": {"kind": {"const": "NStepKL"}}},
                 "then": {"required": ["n", "beta"]}},
                {"if": {"properties": {"kind": {"enum": ["VCL", "VCLCoreSet"]}}},
                 "then": {"required": ["beta"]}},
            ],
        },
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


@dataclass
class ExperimentConfig:
    """A validated experiment document; ``raw`` keeps the fields as written."""

    benchmark: str
    seeds: list
    output_dir: str
    raw: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    def section(self, name):
        return dict(self.raw.get(name, {}))

    def methods(self):
        specs = []
        for m in self.raw.get("methods", []):
            specs.append(ObjectiveSpec(m["kind"], n=m.get("n", 1), lam=m.get("lambda"),
                                       beta=m.get("beta", 1.0),
                                       train_mc_samples=self.section("train").get("train_mc_samples", 5)))
        return specs

    def continual_config(self, seed):
        train = TrainConfig(seed=seed, **self.section("train"))
        model = self.section("model")
        replay = self.section("replay")
        return ContinualConfig(
            train=train,
            hidden=tuple(model.get("hidden", (100, 100))),
            prior_variance=model.get("prior_variance", 1e-5),
            replay_tasks=replay.get("tasks", 2),
            replay_per_task=replay.get("per_task", 200),
            eval_samples=model.get("eval_samples", 100),
            coreset_epochs=model.get("coreset_epochs", 20),
            init_mean_scale=model.get("init_mean_scale"),
        )

    def data_path(self, key):
        return resolve_data_path(self.raw["data"][key], self.base_dir)


def serialize(config):
    """Inverse of :func:`parse_config` on the document level."""
    return json.loads(json.dumps(config.raw))


def resolve_data_path(path, base_dir=None):
    p = Path(path)
    if p.is_absolute():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) / p if root else Path(base_dir or Path.cwd()) / "data" / p


def _field_path(error):
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        missing = error.message.split("'")[1]
        return ".".join(parts + [missing]) or missing, "required field is missing"
    if error.validator == "additionalProperties":
        return ".".join(parts) or "<root>", error.message
    return ".".join(parts) or "<root>", error.message


def validate_document(doc):
    """Raise :class:`ConfigError` for the first schema violation, naming its field."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), e.message))
    if errors:
        leaf = _deepest(errors[0])
        path, message = _field_path(leaf)
        raise ConfigError(f"config field '{path}': {message}")


def _deepest(error):
    # if/then failures carry the useful detail in their context
    while error.context:
        error = min(error.context, key=lambda e: -len(e.absolute_path))
    return error


def parse_config(source, base_dir=None, check_paths=True):
    """Load and validate a config from a path or an already-parsed dict."""
    if isinstance(source, dict):
        doc = json.loads(json.dumps(source))
    else:
        path = Path(source)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    validate_document(doc)
    config = ExperimentConfig(doc["benchmark"], list(doc["seeds"]), doc["output_dir"], doc,
                              Path(base_dir) if base_dir else Path.cwd())
    if check_paths and "data" in doc:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key in doc["data"] and not config.data_path(key).exists():
                raise ConfigError(f"config field 'data.{key}': file {config.data_path(key)} does not exist")
    return config


def build_stream(config, seed):
    """Task stream for ``config``; permutations depend on ``seed``."""
    rng = SeededRng(seed).child(7)
    T = config.raw.get("tasks", 5)
    if config.benchmark == "synthetic":
        return make_synthetic_stream(T, rng, **config.section("synthetic"))
    train, test = load_base(config)
    if config.benchmark == "permuted":
        return make_permuted_stream(train, test, T, rng)
    pairs = [tuple(p) for p in config.raw["pairs"]]
    return make_split_stream(train, test, pairs, multi_head=config.raw.get("head", "single") == "multi")


def load_base(config):
    data = config.raw["data"]
    x, y = load_idx(config.data_path("train_images"), config.data_path("train_labels"))
    if "test_images" in data:
        xt, yt = load_idx(config.data_path("test_images"), config.data_path("test_labels"))
        n_train, n_test = data.get("n_train", len(y)), data.get("n_test", len(yt))
        train_idx, test_idx = np.arange(min(n_train, len(y))), np.arange(min(n_test, len(yt)))
    else:
        # one file: draw disjoint train and test subsets with a fixed permutation
        order = np.random.default_rng(data.get("split_seed", 0)).permutation(len(y))
        n_train = data.get("n_train", len(y) // 2)
        n_test = data.get("n_test", len(y) - n_train)
        if n_train + n_test > len(y):
            raise ConfigError(f"config field 'data': n_train + n_test exceeds {len(y)} examples")
        train_idx, test_idx = order[:n_train], order[len(y) - n_test:]
        xt, yt = x, y
    classes = int(max(y.max(), yt.max())) + 1
    return (TaskDataset(x[train_idx], y[train_idx], 1, classes),
            TaskDataset(xt[test_idx], yt[test_idx], 1, classes))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_experiment(config, out_dir=None, seeds=None, stdout=None):
    """Run every (method, seed) pair of ``config`` and write the reports."""
    stdout = stdout or sys.stdout
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds if seeds is not None else config.seeds)
    resolved = serialize(config)
    resolved["seeds"] = seeds
    resolved["output_dir"] = str(out)
    _write_json(out / "config.resolved.json", resolved)
    if config.benchmark == "oracle":
        return _run_oracle(config, out, seeds, stdout)
    matrices = []
    with open(out / "log.jsonl", "w") as logf:
        for seed in seeds:
            stream = build_stream(config, seed)
            for spec in config.methods():
                started = time.time()
                result = run_continual(stream, spec, config.continual_config(seed))
                result.matrix.run_id = f"{spec.kind}-s{seed}"
                matrices.append(result.matrix)
                for rec in result.logs:
                    logf.write(json.dumps({"seed": seed, "method": spec.kind, **rec}) + "\n")
                log.info("%s seed %d finished in %.1fs", spec.kind, seed, time.time() - started)
    paths = emit_report(matrices, out)
    agg = json.loads(paths["json"].read_text())["rows"]
    for line in table_rows(agg):
        print(line, file=stdout)
    return matrices


def _run_oracle(config, out, seeds, stdout):
    o = config.section("oracle")
    modes = o.pop("modes", ["single_step", "n_step(3)"])
    noise_scale = o.pop("noise_scale", 0.1)
    T = config.raw.get("tasks", 10)
    records, finals = [], {m: [] for m in modes}
    for seed in seeds:
        rng = SeededRng(seed)
        stream = make_conjugate_stream(T, rng.child(0), **o)
        for j, mode in enumerate(modes):
            kls = kl_trajectory(stream, noise_scale, mode, rng.child(1, j))
            records.append((f"{mode}-s{seed}", seed, mode, kls))
            finals[mode].append(kls[-1])
    write_kl_csv(records, out / "runs.csv")
    summary = {"schema": 1, "rows": [{"method": m, "median_final_kl": float(np.median(v)),
                                      "n_seeds": len(v)} for m, v in finals.items()]}
    _write_json(out / "aggregate.json", summary)
    print("method".ljust(14) + "median final KL".rjust(18), file=stdout)
    for row in summary["rows"]:
        print(row["method"].ljust(14) + f"{row['median_final_kl']:.4f}".rjust(18), file=stdout)
    return summary


def run_check(suite, stdout=None):
    stdout = stdout or sys.stdout
    results = SUITES[suite]()
    passed = all(r.passed for r in results)
    print(json.dumps({"suite": suite, "passed": passed,
                      "results": [r.to_dict() for r in results]}, indent=2), file=stdout)
    return EXIT_OK if passed else EXIT_FAIL


def build_parser():
    parser = argparse.ArgumentParser(prog="tdvcl", description="TD-style variational continual learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--seed-override", type=int, help="run only this seed")
    check = sub.add_parser("check", help="run an invariant suite")
    check.add_argument("suite", choices=sorted(SUITES))
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "check":
        return run_check(args.suite)
    try:
        config = parse_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    seeds = [args.seed_override] if args.seed_override is not None else None
    try:
        run_experiment(config, args.out, seeds)
    except (NumericError, ContractError, OSError, ValueError) as exc:
        log.error("run failed: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
