"""Command-line entry points: synth, train, eval, gradcheck.

Exit codes: 0 ok, 1 numeric failure, 2 data/config error, 3 checkpoint
compatibility error. Every command is reproducible: (config, seed,
deterministic=true) fully determines all outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import (ConfigError, load_run_config, override_run_config)
from .dataio import (DataError, GenConfig, assemble_dataset, dataset_hash,
                     load_dataset, synthesize_records, write_interactions,
                     write_manifest, write_relations)
from .model import ModelContext, batch_loss, forward
from .numerics import NumericError, finite_difference_gradcheck
from .trainer import (CompatibilityError, check_compatible, epoch_ranking_triples,
                      epoch_relation_triples, fit, init_params, load_checkpoint,
                      save_fit_checkpoint)
from .evaluator import evaluate, interest_center_distance

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_DATA = 2
EXIT_COMPAT = 3

GRADCHECK_TOLERANCE = 1e-4


def _parse_bool_flag(value: str) -> bool:
    v = value.lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ckml",
        description="multi-behavior multi-interest recommender experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (("synth", "generate a synthetic dataset"),
                      ("train", "train a model from a config"),
                      ("eval", "evaluate a checkpoint"),
                      ("gradcheck", "finite-difference gradient audit")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="run config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--deterministic", type=_parse_bool_flag, default=None)
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--n", type=int, default=None, help="metric cutoff N")
        if name == "gradcheck":
            p.add_argument("--corrupt-grad", default=None,
                           help="test hook: scale one parameter's gradient by 2")
            p.add_argument("--epsilon", type=float, default=1e-5,
                           help="central-difference step")
    return parser


def _load_config(args):
    cfg = load_run_config(args.config)
    cfg = override_run_config(
        cfg, seed=args.seed, workers=args.workers,
        deterministic=args.deterministic, top_n=getattr(args, "n", None),
        out_dir=args.out)
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    cfg.validate()
    out = _out_dir(cfg)
    s = cfg.synth
    gen = GenConfig(num_users=s.users, num_items=s.items, num_behaviors=s.behaviors,
                    relation_count=s.relations, shared_prototypes=s.shared_prototypes,
                    specific_prototypes=s.specific_prototypes,
                    interactions_per_user=s.interactions_per_user,
                    correlation=s.correlation, relation_degree=s.relation_degree)
    seed = cfg.hyper.seed
    records, rel_records, ground_truth = synthesize_records(gen, seed)
    write_interactions(out / "interactions.tsv", records)
    write_relations(out / "relations.tsv", rel_records)
    (out / "ground_truth.json").write_text(
        json.dumps(ground_truth, sort_keys=True), encoding="utf-8")
    write_manifest(out / "manifest.txt", num_users=s.users, num_items=s.items,
                   num_behaviors=s.behaviors, relation_count=s.relations,
                   target_behavior=s.behaviors - 1, seed=seed,
                   interactions="interactions.tsv", relations="relations.tsv",
                   ground_truth="ground_truth.json")
    ds = assemble_dataset(records, rel_records, s.users, s.items, s.behaviors,
                          s.relations, s.behaviors - 1, seed,
                          ground_truth=ground_truth)
    print(f"wrote {out / 'manifest.txt'}")
    print(f"dataset_hash={dataset_hash(ds)}")
    return EXIT_OK


def _jsonl_writer(path):
    fh = open(path, "w", encoding="utf-8")

    def write(record):
        fh.write(json.dumps(record) + "\n")
        fh.flush()
    return fh, write


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not cfg.manifest:
        raise ConfigError("config has no data.manifest to train on")
    dataset = load_dataset(cfg.manifest)
    cfg.validate(dataset.num_behaviors)
    out = _out_dir(cfg)
    fh, write = _jsonl_writer(out / "metrics.jsonl")
    try:
        result = fit(dataset, cfg.hyper, top_n=cfg.top_n,
                     eval_all_behaviors=cfg.eval_all_behaviors, log=write)
    finally:
        fh.close()
    ckpt_path = out / "model.ckml"
    save_fit_checkpoint(ckpt_path, result, dataset, cfg.hyper)
    print(f"best epoch {result.best_epoch} ndcg@{cfg.top_n} {result.best_ndcg:.6f}")
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if not cfg.manifest:
        raise ConfigError("config has no data.manifest to evaluate on")
    dataset = load_dataset(cfg.manifest)
    ckpt = load_checkpoint(args.checkpoint)
    check_compatible(ckpt, dataset)
    hyper = ckpt.hyper()
    params = ckpt.model_params()
    ctx = ModelContext(dataset, hyper)
    report = evaluate(params, ctx, hyper, cfg.top_n,
                      all_behaviors=cfg.eval_all_behaviors)
    out = _out_dir(cfg)
    with open(out / "eval.jsonl", "w", encoding="utf-8") as fh:
        epoch = int(ckpt.config.get("epoch", -1))
        for k, (hr, ndcg, users) in report.per_behavior.items():
            record = {"epoch": epoch, "behavior": int(k), "hr": hr, "ndcg": ndcg,
                      "users": users}
            fh.write(json.dumps(record) + "\n")
            print(f"behavior {k}: HR@{cfg.top_n}={hr:.6f} NDCG@{cfg.top_n}={ndcg:.6f} "
                  f"({users} users)")
        s_spe, s_sha, _ = hyper.interest_structure()
        if s_spe + s_sha >= 2:
            fwd = forward({k: ad.Tensor(v) for k, v in params.items()}, ctx, hyper)
            stacks = fwd.item_interest_stacks[dataset.target_behavior].data
            dist = interest_center_distance(stacks)
            fh.write(json.dumps({"metric": "interest_distance",
                                 "mean": dist["mean"], "p10": dist["p10"],
                                 "p50": dist["p50"], "p90": dist["p90"]}) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    if not cfg.manifest:
        raise ConfigError("config has no data.manifest for the gradient audit")
    dataset = load_dataset(cfg.manifest)
    cfg.validate(dataset.num_behaviors)
    hyper = cfg.hyper
    ctx = ModelContext(dataset, hyper)
    params = init_params(hyper, dataset)
    rng = np.random.default_rng(hyper.seed + 1)
    rank_batches = []
    for k in range(dataset.num_behaviors):
        triples = epoch_ranking_triples(dataset.behavior_graphs[k], rng)
        rank_batches.append(triples)
    rel_batches = [epoch_relation_triples(g, rng) for g in dataset.relation_graphs]

    def loss_fn(tensors):
        total, _, _ = batch_loss(tensors, ctx, hyper, rank_batches, rel_batches)
        return total

    hook = None
    if args.corrupt_grad is not None:
        target = args.corrupt_grad

        def hook(name, grad):
            return grad * 2.0 if name == target else grad

    report = finite_difference_gradcheck(loss_fn, params, epsilon=args.epsilon,
                                         grad_hook=hook)
    for name, err in report.per_parameter.items():
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{status:4s} {name:32s} max_rel_err={err:.3e}")
    print(f"overall max_rel_err={report.overall:.3e} "
          f"(tolerance {GRADCHECK_TOLERANCE:.0e})")
    if report.overall >= GRADCHECK_TOLERANCE:
        print(f"worst parameter group: {report.worst()}")
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
                "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
