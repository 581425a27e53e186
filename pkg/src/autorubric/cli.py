"""Command-line entry point: ``autorubric <subcommand> --config run.yaml [--set key=value ...]``."""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bt, evaluator, gradcheck, prompts, rpo, rubrics
from .judge import Gateway, JudgeError, OracleBackend, OracleConfig, Order, RemoteBackend
from .preference import PreferenceError, load_dataset

logger = logging.getLogger("autorubric")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_BACKEND = 4
EXIT_OPERATION = 5

DEFAULTS: dict = {
    "seed": 0,
    "backend": {
        "kind": "oracle",
        "weight_vector": [1.0, 1.0, 1.0, 1.0],
        "position_bias": 0.0,
        "noise_rate": 0.0,
        "base_url": None,
        "model": None,
        "timeout_s": 60.0,
        "retry_limit": 3,
        "concurrency_bound": 4,
        "temperature": 0.0,
        "max_output_units": 1024,
    },
    "judge_backend": None,
    "pipeline": {"t_max": 5, "store_path": None},
    "eval": {
        "orders": ["forward", "reverse"],
        "cardinality_k": 5,
        "bootstrap_resamples": 1000,
        "ks": [1, 5, 10, 20],
        "guide_path": None,
    },
    "bt": {"learning_rate": 0.1, "epochs": 500, "l2": 0.0},
    "rpo": {
        "iterations": 500,
        "batch_size": 32,
        "lam": 1.0,
        "gamma": 0.1,
        "clip_eps": 0.2,
        "kl_beta": 0.01,
        "learning_rate": 0.05,
        "T": 8,
        "d": 2,
        "sigma": 0.3,
        "grad_clip": 1.0,
        "inner_epochs": 1,
        "prompt_scale": 1.0,
        "judge": "oracle",
    },
    "gradcheck": {"trials": 50, "tolerance": 1e-4},
    "paths": {"dataset": None, "tuning_set": None, "store": None, "rubric": None, "out_dir": "out"},
}

SUBCOMMANDS = ("rubric-gen", "eval", "bias-ablate", "cardinality", "select", "bt-train", "rpo-train", "gradcheck")


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# -- config -------------------------------------------------------------------


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def _apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key.path=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            if p in node and node[p] is None and p == "judge_backend":
                node[p] = copy.deepcopy(DEFAULTS["backend"])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise InputError(f"config file not found: {p}")
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        if data.get("judge_backend") is not None:
            data["judge_backend"] = _merge(DEFAULTS["backend"], data["judge_backend"], "judge_backend.")
            cfg["judge_backend"] = data.pop("judge_backend")
        cfg = _merge(cfg, data)
    for assignment in overrides:
        _apply_override(cfg, assignment)
    _check_ranges(cfg)
    return cfg


def _check_ranges(cfg: dict) -> None:
    for section in ("backend", "judge_backend"):
        b = cfg.get(section)
        if b is None:
            continue
        if b["kind"] not in ("oracle", "remote"):
            raise ConfigError(f"{section}.kind must be 'oracle' or 'remote'")
        if b["kind"] == "remote" and not (b.get("base_url") and b.get("model")):
            raise ConfigError(f"{section}: remote backend needs base_url and model")
        if int(b["retry_limit"]) < 0 or int(b["concurrency_bound"]) < 1 or float(b["temperature"]) < 0:
            raise ConfigError(f"{section}: retry_limit >= 0, concurrency_bound >= 1, temperature >= 0 required")
    if int(cfg["pipeline"]["t_max"]) < 1:
        raise ConfigError("pipeline.t_max must be >= 1")
    if int(cfg["eval"]["cardinality_k"]) < 1:
        raise ConfigError("eval.cardinality_k must be >= 1")
    if int(cfg["seed"]) < 0:
        raise ConfigError("seed must be unsigned")
    for o in cfg["eval"]["orders"]:
        if o not in ("forward", "reverse"):
            raise ConfigError(f"eval.orders: unknown order {o!r}")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def build_backend(section: dict, seed: int) -> Gateway:
    if section["kind"] == "oracle":
        backend = OracleBackend(
            OracleConfig(
                weight_vector=tuple(section["weight_vector"]),
                position_bias=float(section["position_bias"]),
                noise_rate=float(section["noise_rate"]),
                seed=seed,
            )
        )
    else:
        backend = RemoteBackend(section["base_url"], section["model"], timeout_s=float(section["timeout_s"]))
    return Gateway(
        backend,
        retry_limit=int(section["retry_limit"]),
        concurrency_bound=int(section["concurrency_bound"]),
        temperature=float(section["temperature"]),
        max_output_units=int(section["max_output_units"]),
        jitter_seed=seed,
    )


# -- run context ----------------------------------------------------------------


class Run:
    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.out_dir = Path(cfg["paths"]["out_dir"])
        self.outputs: list[str] = []
        self.backend_ids: list[str] = []
        self._backend = None
        self._judge = None

    @property
    def backend(self) -> Gateway:
        if self._backend is None:
            self._backend = build_backend(self.cfg["backend"], self.seed)
            self.backend_ids.append(self._backend.backend_id)
        return self._backend

    @property
    def judge(self) -> Gateway:
        """Evaluation judge; differs from the rubric backend for cross-model transfer runs."""
        if self.cfg.get("judge_backend") is None:
            return self.backend
        if self._judge is None:
            self._judge = build_backend(self.cfg["judge_backend"], self.seed)
            self.backend_ids.append(self._judge.backend_id)
        return self._judge

    def path(self, key: str, required: bool = True) -> Path | None:
        value = self.cfg["paths"].get(key)
        if value is None:
            if required:
                raise ConfigError(f"paths.{key} is required for {self.command}")
            return None
        p = Path(value)
        if not p.exists():
            raise InputError(f"paths.{key} not found: {p}")
        return p

    def output(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / name
        self.outputs.append(name)
        return p

    def write_manifest(self, extra: dict | None = None) -> None:
        manifest = {
            "command": self.command,
            "config_hash": config_hash(self.cfg),
            "config": self.cfg,
            "seed": self.seed,
            "template_version": prompts.TEMPLATE_VERSION,
            "template_hashes": prompts.template_hashes(),
            "backend_ids": self.backend_ids,
            "outputs": self.outputs,
            **(extra or {}),
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / f"manifest.{self.command}.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n"
        )


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _protocol(run: Run) -> evaluator.EvalProtocol:
    e = run.cfg["eval"]
    return evaluator.EvalProtocol(
        orders=tuple(Order(o) for o in e["orders"]),
        cardinality_k=int(e["cardinality_k"]),
        bootstrap_resamples=int(e["bootstrap_resamples"]),
        seed=run.seed,
    )


def _guide(run: Run) -> str:
    p = run.cfg["eval"].get("guide_path")
    if not p:
        return ""
    if not Path(p).exists():
        raise InputError(f"eval.guide_path not found: {p}")
    return Path(p).read_text(encoding="utf-8")


def _rubric(run: Run) -> rubrics.StructuredRubric | None:
    p = run.path("rubric", required=False)
    return rubrics.load_structured(p) if p is not None else None


# -- subcommands -----------------------------------------------------------------


def cmd_rubric_gen(run: Run) -> int:
    data = load_dataset(run.path("dataset"))
    store_path = Path(run.cfg["pipeline"]["store_path"]) if run.cfg["pipeline"]["store_path"] else run.output("store.jsonl")
    pcfg = rubrics.PipelineConfig(
        t_max=int(run.cfg["pipeline"]["t_max"]),
        concurrency_bound=int(run.cfg["backend"]["concurrency_bound"]),
        store_path=store_path,
    )
    store = rubrics.run_pipeline(data, pcfg, run.backend)
    structured = rubrics.structure_rubrics(store, run.backend)
    rubric_path = run.output("rubric.txt")
    rubrics.save_structured(structured, rubric_path)
    run.outputs.append("rubric.txt.provenance.json")
    s = store.stats
    summary = (
        f"generated {s.generated}\nverified_first_try {s.verified_first_try}\n"
        f"refined_then_verified {s.refined_then_verified}\ndiscarded {s.discarded}\n"
        f"dimensions {len(structured.dimensions)}\n"
    )
    _write(run.output("rubric_gen_summary.txt"), summary)
    print(summary, end="")
    return EXIT_OK


def cmd_eval(run: Run) -> int:
    data = load_dataset(run.path("dataset"))
    report = evaluator.evaluate_dataset(data, _rubric(run), _protocol(run), run.judge, guide=_guide(run))
    evaluator.write_report(report, run.output("eval_report.jsonl"))
    line = f"accuracy {100 * report.accuracy:.1f} ± {100 * report.accuracy_std:.1f} (judged {report.judged}, errored {report.errored})\n"
    _write(run.output("eval_summary.txt"), line)
    print(line, end="")
    return EXIT_OK


def cmd_bias_ablate(run: Run) -> int:
    data = load_dataset(run.path("dataset"))
    rubric = _rubric(run)
    report = evaluator.evaluate_dataset(data, rubric, evaluator.EvalProtocol(bootstrap_resamples=0), run.judge, guide=_guide(run))
    bias = evaluator.bias_from_report(report)
    evaluator.write_report(report, run.output("bias_judgments.jsonl"))
    name = "rubric" if rubric is not None else "direct"
    record = {"method": name, **bias.percent()}
    _write(run.output("bias_report.jsonl"), json.dumps(record) + "\n")
    table = evaluator.format_bias_table([(name, bias)])
    _write(run.output("bias_table.txt"), table)
    print(table, end="")
    return EXIT_OK


def cmd_cardinality(run: Run) -> int:
    data = load_dataset(run.path("dataset"))
    store = rubrics.load_store(run.path("store"))
    points = evaluator.cardinality_sweep(data, store, [int(k) for k in run.cfg["eval"]["ks"]], run.judge, seed=run.seed)
    rows = [json.dumps({"K": p.k, "accuracy": p.accuracy, "provenance": list(p.provenance)}) for p in points]
    _write(run.output("cardinality.jsonl"), "\n".join(rows) + "\n")
    table = evaluator.format_sweep_table(points)
    _write(run.output("cardinality_table.txt"), table)
    print(table, end="")
    return EXIT_OK


def cmd_select(run: Run) -> int:
    store = rubrics.load_store(run.path("store"))
    tuning = load_dataset(run.path("tuning_set", required=False) or run.path("dataset"))
    k = int(run.cfg["eval"]["cardinality_k"])
    rubric = evaluator.select_rubric_subset(store, tuning, k, run.judge, structure_backend=run.backend)
    rubrics.save_structured(rubric, run.output("selected_rubric.txt"))
    run.outputs.append("selected_rubric.txt.provenance.json")
    print(rubric.rendered, end="")
    return EXIT_OK


def cmd_bt_train(run: Run) -> int:
    data = load_dataset(run.path("dataset"))
    b = run.cfg["bt"]
    cfg = bt.BTTrainConfig(float(b["learning_rate"]), int(b["epochs"]), float(b["l2"]), run.seed)
    result = bt.train_bt(data, cfg)
    bt.save_model(result.model, cfg, run.output("bt_model.json"))
    bt.write_loss_curve(result.loss_curve, run.output("bt_loss.jsonl"))
    acc = bt.pairwise_accuracy(result.model, data)
    line = f"final loss {result.loss_curve[-1]:.6f}, training accuracy {100 * acc:.1f}\n"
    _write(run.output("bt_summary.txt"), line)
    print(line, end="")
    return EXIT_OK


def cmd_rpo_train(run: Run) -> int:
    r = dict(run.cfg["rpo"])
    judge_kind = r.pop("judge")
    cfg = rpo.RPOConfig(seed=run.seed, **r)
    dataset_path = run.path("dataset", required=False)
    prompt_source = load_dataset(dataset_path) if dataset_path is not None else None
    if judge_kind == "oracle":
        judge = rpo.ClosenessOracleJudge()
        run.backend_ids.append(judge.backend_id)
    elif judge_kind == "gateway":
        judge = rpo.GatewayTrajectoryJudge(run.judge, _rubric(run))
    else:
        raise ConfigError("rpo.judge must be 'oracle' or 'gateway'")
    state = rpo.rpo_train(cfg, prompt_source, judge)
    rpo.write_metrics(state.metrics, run.output("rpo_metrics.jsonl"))
    rpo.save_policy(state.policy, run.output("rpo_policy.json"), seed=run.seed)
    first, last = state.metrics[0], state.metrics[-1]
    line = (
        f"mean_final_distance {first.mean_final_distance:.4f} -> {last.mean_final_distance:.4f}; "
        f"win_rate_vs_ref {last.win_rate_vs_ref:.3f}; mean_kl {last.mean_kl:.5f}\n"
    )
    _write(run.output("rpo_summary.txt"), line)
    print(line, end="")
    return EXIT_OK


def cmd_gradcheck(run: Run) -> int:
    g = run.cfg["gradcheck"]
    r = {k: v for k, v in run.cfg["rpo"].items() if k != "judge"}
    r.update(T=3, d=2)
    err = gradcheck.finite_diff_check(rpo.RPOConfig(seed=run.seed, **r), int(g["trials"]), run.seed)
    ok = err < float(g["tolerance"])
    _write(run.output("gradcheck.json"), json.dumps({"max_relative_error": err, "tolerance": g["tolerance"], "passed": ok}) + "\n")
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {g['tolerance']})")
    return EXIT_OK if ok else EXIT_OPERATION


COMMANDS = {
    "rubric-gen": cmd_rubric_gen,
    "eval": cmd_eval,
    "bias-ablate": cmd_bias_ablate,
    "cardinality": cmd_cardinality,
    "select": cmd_select,
    "bt-train": cmd_bt_train,
    "rpo-train": cmd_rpo_train,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autorubric", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config leaf, e.g. --set rpo.kl_beta=0.02")
        p.add_argument("--out-dir", help="shorthand for --set paths.out_dir=DIR")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    return parser


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.out_dir:
        overrides.append(f"paths.out_dir={args.out_dir}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
        run = Run(args.command, cfg)
        code = COMMANDS[args.command](run)
        run.write_manifest()
        return code
    except (ConfigError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, FileNotFoundError, PreferenceError, rubrics.StoreFormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except JudgeError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except rubrics.PipelineAborted as exc:
        print(f"pipeline aborted (partial store flushed): {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (rubrics.RubricError, evaluator.EvaluationError, bt.BTError, rpo.RPOError, ValueError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_OPERATION


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
