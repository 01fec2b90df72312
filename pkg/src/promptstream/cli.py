"""Config-driven experiment runner.

Subcommands::

    promptstream pretrain --config cfg.yaml --out DIR    # corpus -> frozen checkpoint
    promptstream run      --config cfg.yaml --out DIR    # method x order x seed grid
    promptstream report   --out DIR                      # comparison table + plot data

One YAML config drives everything; all hyperparameters have named keys with
the reference defaults. Every grid cell owns ``out/{method}/{order}/{seed}/``
and writes rmatrix.csv, metrics.json, and stages.jsonl; ``run`` finishes by
aggregating means and standard deviations across cells into report.json.
Exit codes: 0 success, 1 run failure, 2 config error. Outputs contain no
timestamps, so a rerun under a fixed config is byte-identical.
"""

import argparse
import concurrent.futures
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .config import ModelConfig
from .data import DataError, Vocabulary, load_jsonl, preprocess, split
from .harness import MethodConfig, run_stream
from .kernels import BACKEND_NAME
from .metrics import avg_f1, bwt, fs_f1, fwt
from .model import (
    hypernet_parameter_count,
    load_backbone,
    parameter_counts,
    save_backbone,
)
from .pretrain import held_out_loss, pretrain_backbone
from .synth import SynthStreamConfig, generate_stream
from .training import TrainSettings

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2

CHECKPOINT_NAME = "backbone.cptrd"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainSettings
    methods: list
    orders: list
    seeds: list
    synth: SynthStreamConfig | None
    jsonl: list | None
    pretrain: dict
    checkpoint: str | None


_PRETRAIN_DEFAULTS = {"steps": 1500, "batch_size": 16, "lr": 0.5, "mask_prob": 0.15, "seed": 0}


def load_config(path) -> ExperimentConfig:
    """Parse and exhaustively validate the YAML config before any compute."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc

    def section(name, default=None):
        value = raw.get(name, default)
        if value is None and default is None:
            raise ConfigError(f"{path}: missing required section {name!r}")
        return value

    try:
        model = ModelConfig.from_dict(section("model", {}))
        train = TrainSettings.from_dict(section("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    methods = []
    for i, mdict in enumerate(section("methods")):
        try:
            methods.append(MethodConfig(**mdict))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: methods[{i}]: {exc}") from exc
        if methods[-1].head != model.head:
            raise ConfigError(
                f"{path}: methods[{i}]: head {methods[-1].head!r} does not match "
                f"model head {model.head!r}"
            )
    if len({m.label for m in methods}) != len(methods):
        raise ConfigError(f"{path}: duplicate method labels; set distinct 'name' fields")

    data = section("data")
    synth_cfg = None
    jsonl_paths = None
    if "synth" in data:
        try:
            synth_cfg = SynthStreamConfig.from_dict(data["synth"])
        except (TypeError, DataError) as exc:
            raise ConfigError(f"{path}: data.synth: {exc}") from exc
        if synth_cfg.vocab_size != model.vocab_size:
            raise ConfigError(
                f"{path}: data.synth.vocab_size ({synth_cfg.vocab_size}) must equal "
                f"model.vocab_size ({model.vocab_size})"
            )
    elif "jsonl" in data:
        jsonl_paths = [str(p) for p in data["jsonl"]]
        for p in jsonl_paths:
            if not Path(p).exists():
                raise ConfigError(f"{path}: data.jsonl file not found: {p}")
    else:
        raise ConfigError(f"{path}: data section needs either 'synth' or 'jsonl'")

    seeds = [int(s) for s in section("seeds", [0])]
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError(f"{path}: seeds must be a non-empty list of non-negative ints")

    orders = raw.get("orders")
    if orders is not None:
        orders = [[str(name) for name in order] for order in orders]

    pretrain = dict(_PRETRAIN_DEFAULTS)
    unknown = set(raw.get("pretrain", {})) - set(pretrain)
    if unknown:
        raise ConfigError(f"{path}: unknown pretrain keys {sorted(unknown)}")
    pretrain.update(raw.get("pretrain", {}))

    known = {"model", "train", "methods", "data", "seeds", "orders", "pretrain", "checkpoint"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown top-level sections {sorted(unknown)}")

    return ExperimentConfig(
        model=model,
        train=train,
        methods=methods,
        orders=orders,
        seeds=seeds,
        synth=synth_cfg,
        jsonl=jsonl_paths,
        pretrain=pretrain,
        checkpoint=raw.get("checkpoint"),
    )


def build_data(cfg: ExperimentConfig):
    """Materialize (tasks by name, vocabulary, pretraining corpus, manifest)."""
    if cfg.synth is not None:
        stream = generate_stream(cfg.synth)
        tasks = {t.name: t for t in stream.domains}
        return tasks, stream.vocab, stream.corpus, stream.manifest()
    examples = []
    for p in cfg.jsonl:
        examples.extend(preprocess(ex) for ex in load_jsonl(p))
    by_domain = {}
    for ex in examples:
        by_domain.setdefault(ex.domain, []).append(ex)
    vocab = Vocabulary.build(
        [ex.claim for ex in examples] + [c for ex in examples for c in ex.comments],
        cfg.model.vocab_size,
    )
    tasks = {}
    for name, domain_examples in sorted(by_domain.items()):
        tasks[name] = split(domain_examples, seed=cfg.seeds[0])
    corpus = [
        ids
        for ex in examples
        for ids in (vocab.encode(ex.claim),)
        if len(ids) >= 4
    ]
    manifest = {"source": "jsonl", "files": cfg.jsonl, "domains": sorted(by_domain)}
    return tasks, vocab, corpus, manifest


def resolve_orders(cfg: ExperimentConfig, tasks: dict) -> list:
    if cfg.orders is None:
        return [sorted(tasks)]
    for order in cfg.orders:
        unknown = [name for name in order if name not in tasks]
        if unknown:
            raise ConfigError(f"order references unknown domain(s) {unknown}")
        if len(order) < 2:
            raise ConfigError(f"order {order} needs at least 2 domains")
    return cfg.orders


def params_fraction(method: MethodConfig, model: ModelConfig, settings: TrainSettings) -> float:
    if method.learner == "finetune":
        return 1.0
    backbone_total = sum(parameter_counts(model).values())
    if method.hypernet:
        extra = hypernet_parameter_count(model, settings.hypernet_hidden)
    else:
        extra = int(np.prod(model.prompt_shape()))
    return extra / (backbone_total + extra)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_pretrain(cfg: ExperimentConfig, out: Path) -> int:
    tasks, vocab, corpus, manifest = build_data(cfg)
    if not corpus:
        print("error: pretraining corpus is empty", file=sys.stderr)
        return EXIT_RUN_FAILURE
    out.mkdir(parents=True, exist_ok=True)
    (out / "stream_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    held_out = corpus[: max(1, len(corpus) // 10)]
    train_corpus = corpus[len(held_out):] or corpus
    backbone = pretrain_backbone(
        cfg.model,
        train_corpus,
        steps=cfg.pretrain["steps"],
        batch_size=cfg.pretrain["batch_size"],
        lr=cfg.pretrain["lr"],
        mask_prob=cfg.pretrain["mask_prob"],
        seed=cfg.pretrain["seed"],
        log_every=max(1, cfg.pretrain["steps"] // 10),
    )
    path = out / CHECKPOINT_NAME
    save_backbone(backbone, path)
    loss = held_out_loss(backbone, held_out, mask_prob=cfg.pretrain["mask_prob"])
    print(f"checkpoint written to {path}")
    print(f"digest {backbone.digest()}")
    print(f"held-out masked-token loss {loss:.4f}")
    return EXIT_OK


def _run_cell(args):
    """One (method, order, seed) grid cell; runs in its own process under --jobs."""
    cfg, method_index, order, order_label, seed, out_dir, checkpoint = args
    backbone = load_backbone(checkpoint)
    tasks, vocab, _, _ = build_data(cfg)
    method = cfg.methods[method_index]
    result = run_stream(
        backbone, [tasks[name] for name in order], method, cfg.train, seed, vocab
    )
    cell = Path(out_dir) / method.label / order_label / str(seed)
    cell.mkdir(parents=True, exist_ok=True)
    result.matrix.to_csv(cell / "rmatrix.csv")
    with open(cell / "stages.jsonl", "w") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    metrics = {
        "method": method.label,
        "seed": seed,
        "order": list(order),
        "avg_f1": avg_f1(result.matrix),
        "fwt": None if method.mtl else fwt(result.matrix),
        "bwt": None if method.mtl else bwt(result.matrix),
        "fs_f1": {str(k): fs_f1(result.records, k) for k in cfg.train.fewshot_k}
        if not method.mtl
        else {},
        "params_fraction": params_fraction(method, cfg.model, cfg.train),
        "kernel_backend": BACKEND_NAME,
        "digests_ok": result.digests_ok,
    }
    with open(cell / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not result.digests_ok:
        raise RuntimeError(f"frozen-backbone digest changed during {method.label}/{order_label}/{seed}")
    return metrics


def cmd_run(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    checkpoint = Path(cfg.checkpoint) if cfg.checkpoint else out / CHECKPOINT_NAME
    if not checkpoint.exists():
        print(
            f"error: checkpoint {checkpoint} not found (run `promptstream pretrain` first "
            "or set `checkpoint:` in the config)",
            file=sys.stderr,
        )
        return EXIT_CONFIG_ERROR
    tasks, _, _, _ = build_data(cfg)
    orders = resolve_orders(cfg, tasks)
    cells = [
        (cfg, mi, order, f"order{oi + 1}", seed, str(out), str(checkpoint))
        for mi in range(len(cfg.methods))
        for oi, order in enumerate(orders)
        for seed in cfg.seeds
    ]
    results = []
    failures = 0
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, cell) for cell in cells]
            for cell, fut in zip(cells, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - report and keep going
                    failures += 1
                    print(f"run failed for {cell[1:5]}: {exc}", file=sys.stderr)
    else:
        for cell in cells:
            try:
                results.append(_run_cell(cell))
            except Exception as exc:  # noqa: BLE001
                failures += 1
                print(f"run failed for {cell[1:5]}: {exc}", file=sys.stderr)

    aggregate = {}
    for m in results:
        aggregate.setdefault(m["method"], []).append(m)
    report = {}
    for label, ms in sorted(aggregate.items()):
        avg = [m["avg_f1"] for m in ms]
        report[label] = {
            "runs": len(ms),
            "avg_f1_mean": float(np.mean(avg)),
            "avg_f1_std": float(np.std(avg)),
            "fwt_mean": _mean_or_none([m["fwt"] for m in ms]),
            "bwt_mean": _mean_or_none([m["bwt"] for m in ms]),
            "fs_f1_mean": {
                k: float(np.mean([m["fs_f1"][k] for m in ms]))
                for k in (ms[0]["fs_f1"] or {})
            },
            "params_fraction": ms[0]["params_fraction"],
        }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{len(results)} run(s) completed, {failures} failed; report in {out / 'report.json'}")
    return EXIT_OK if failures == 0 else EXIT_RUN_FAILURE


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def cmd_report(out: Path) -> int:
    metric_files = sorted(out.glob("*/*/*/metrics.json"))
    if not metric_files:
        print(f"error: no completed runs under {out}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    runs = [json.loads(p.read_text()) for p in metric_files]
    by_method = {}
    for m in runs:
        by_method.setdefault(m["method"], []).append(m)

    header = f"{'method':<34} {'Avg.F1':>14} {'FWT':>7} {'BWT':>7} {'fs.F1':>7} {'params':>9}"
    lines = [header, "-" * len(header)]
    for label, ms in sorted(by_method.items()):
        avg = [m["avg_f1"] for m in ms]
        fwt_m = _mean_or_none([m["fwt"] for m in ms])
        bwt_m = _mean_or_none([m["bwt"] for m in ms])
        ks = sorted(ms[0]["fs_f1"], key=int) if ms[0]["fs_f1"] else []
        fs_m = float(np.mean([m["fs_f1"][ks[-1]] for m in ms])) if ks else None
        lines.append(
            f"{label:<34} {np.mean(avg):7.2f} ±{np.std(avg):5.2f} "
            f"{_fmt(fwt_m):>7} {_fmt(bwt_m):>7} {_fmt(fs_m):>7} "
            f"{100 * ms[0]['params_fraction']:8.4f}%"
        )
    table = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(table)
    print(table, end="")

    # Few-shot curves: one row per (method, task index), one column per k.
    stage_files = sorted(out.glob("*/*/*/stages.jsonl"))
    curves = {}
    all_ks = set()
    for p in stage_files:
        method = p.parts[-4]
        for line in p.read_text().splitlines():
            rec = json.loads(line)
            for k, v in rec.get("few_shot_f1", {}).items():
                curves.setdefault((method, rec["task_id"]), {}).setdefault(k, []).append(v)
                all_ks.add(k)
    ks = sorted(all_ks, key=int)
    with open(out / "fs_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "task_index"] + [f"fs_f1_k{k}" for k in ks])
        for (method, task_id), per_k in sorted(curves.items()):
            row = [method, task_id]
            for k in ks:
                vals = per_k.get(k)
                row.append(f"{np.mean(vals):.6f}" if vals else "")
            writer.writerow(row)
    print(f"plot data in {out / 'fs_curves.csv'}")
    return EXIT_OK


def _fmt(value):
    return "-" if value is None else f"{value:.2f}"


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="promptstream",
        description="Continual prompt-tuning experiments over a domain-task stream.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_pre = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    p_pre.add_argument("--config", required=True)
    p_pre.add_argument("--out", required=True)
    p_pre.add_argument("--seed", type=int, default=None, help="override pretrain seed")

    p_run = sub.add_parser("run", help="execute the method x order x seed grid")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, nargs="*", default=None, help="override seed list")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel grid cells")

    p_rep = sub.add_parser("report", help="aggregate completed runs into a table")
    p_rep.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.command == "report":
        return cmd_report(Path(args.out))

    try:
        cfg = load_config(args.config)
        if args.command == "pretrain" and args.seed is not None:
            cfg.pretrain["seed"] = args.seed
        if args.command == "run" and args.seed:
            cfg.seeds = list(args.seed)
        if args.command == "run":
            tasks, _, _, _ = build_data(cfg)
            resolve_orders(cfg, tasks)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    if args.command == "pretrain":
        return cmd_pretrain(cfg, Path(args.out))
    return cmd_run(cfg, Path(args.out), jobs=max(1, args.jobs))


if __name__ == "__main__":
    sys.exit(main())
