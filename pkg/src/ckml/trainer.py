"""Initialization, optimization loop, checkpointing, deterministic execution.

One rng drives everything in order: parameter init, then per-epoch
negative sampling and batch shuffling. Its state is checkpointed, so a
run is a pure function of (config, seed) in deterministic mode.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .config import HyperConfig
from .dataio import Dataset
from .evaluator import MetricsReport, evaluate
from .model import ModelContext, batch_loss, param_specs
from .numerics import NumericError
from .objective import LossBreakdown

CHECKPOINT_MAGIC = b"CKML"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {1: np.dtype(np.float32), 2: np.dtype(np.float64)}


class CompatibilityError(RuntimeError):
    """Checkpoint and dataset/config disagree on shapes."""


def init_params(hyper: HyperConfig, dataset: Dataset, seed: int | None = None,
                rng: np.random.Generator | None = None) -> OrderedDict:
    """Xavier-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero-init
    time offsets; deterministic in registration order for a given seed."""
    if rng is None:
        rng = np.random.default_rng(hyper.seed if seed is None else seed)
    dtype = np.float64 if hyper.precision == "f64" else np.float32
    params = OrderedDict()
    for name, spec in param_specs(hyper, dataset).items():
        if spec.init == "zero":
            params[name] = np.zeros(spec.shape, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / (spec.fan_in + spec.fan_out))
            params[name] = rng.uniform(-bound, bound, size=spec.shape).astype(dtype)
    return params


class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, params: OrderedDict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
        self.v = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())

    def step(self, params: OrderedDict, grads: dict, lr: float):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------ sampling

def _negative_for(rng, num_items, banned):
    q = int(rng.integers(0, num_items))
    while q in banned:
        q = int(rng.integers(0, num_items))
    return q


def epoch_ranking_triples(graph, rng):
    """One negative per observed edge: (users, positives, negatives)."""
    E = graph.edge_count
    if E == 0:
        return None
    users = graph.edges[:, 0]
    positives = graph.edges[:, 1]
    negatives = np.empty(E, dtype=np.int64)
    pos_sets = {}
    for e in range(E):
        u = int(users[e])
        if u not in pos_sets:
            pos_sets[u] = set(graph.user_items(u).tolist())
        if len(pos_sets[u]) >= graph.num_items:
            negatives[e] = -1
            continue
        negatives[e] = _negative_for(rng, graph.num_items, pos_sets[u])
    keep = negatives >= 0
    return users[keep].copy(), positives[keep].copy(), negatives[keep]


def epoch_relation_triples(rel_graph, rng):
    """One negative per undirected relation edge, anchored at the lower id."""
    und = rel_graph.undirected_edges()
    if len(und) == 0:
        return None
    anchors = und[:, 0]
    positives = und[:, 1]
    negatives = np.empty(len(und), dtype=np.int64)
    adj = rel_graph.adj.matrix
    related = {}
    for e in range(len(und)):
        a = int(anchors[e])
        if a not in related:
            row = set(adj.indices[adj.indptr[a]:adj.indptr[a + 1]].tolist())
            row.add(a)
            related[a] = row
        if len(related[a]) >= rel_graph.num_items:
            negatives[e] = -1
            continue
        negatives[e] = _negative_for(rng, rel_graph.num_items, related[a])
    keep = negatives >= 0
    return anchors[keep].copy(), positives[keep].copy(), negatives[keep]


def train_epoch(params: OrderedDict, ctx: ModelContext, hyper: HyperConfig,
                adam: Adam, rng: np.random.Generator, epoch: int) -> LossBreakdown:
    """One pass over every behavior edge (fresh negatives) and every
    relation edge, in shuffled batches; Adam steps at lr * decay^epoch."""
    ds = ctx.dataset
    K = ds.num_behaviors
    rank_all = []  # (behavior, u, p, q) concatenated
    for k in range(K):
        triples = epoch_ranking_triples(ds.behavior_graphs[k], rng)
        if triples is None:
            continue
        u, p, q = triples
        rank_all.append((np.full(len(u), k), u, p, q))
    if rank_all:
        beh = np.concatenate([t[0] for t in rank_all])
        users = np.concatenate([t[1] for t in rank_all])
        pos = np.concatenate([t[2] for t in rank_all])
        neg = np.concatenate([t[3] for t in rank_all])
        perm = rng.permutation(len(beh))
        beh, users, pos, neg = beh[perm], users[perm], pos[perm], neg[perm]
    else:
        beh = np.zeros(0, dtype=np.int64)
        users = pos = neg = beh

    rel_all = []
    for r in range(ds.relation_count):
        triples = epoch_relation_triples(ds.relation_graphs[r], rng)
        if triples is None:
            continue
        a, p, q = triples
        rel_all.append((np.full(len(a), r), a, p, q))
    if rel_all:
        rel_ids = np.concatenate([t[0] for t in rel_all])
        rel_a = np.concatenate([t[1] for t in rel_all])
        rel_p = np.concatenate([t[2] for t in rel_all])
        rel_q = np.concatenate([t[3] for t in rel_all])
        perm = rng.permutation(len(rel_ids))
        rel_ids, rel_a, rel_p, rel_q = rel_ids[perm], rel_a[perm], rel_p[perm], rel_q[perm]
    else:
        rel_ids = np.zeros(0, dtype=np.int64)
        rel_a = rel_p = rel_q = rel_ids

    steps = max(1, -(-len(beh) // hyper.batch_size))
    rel_chunk = -(-len(rel_ids) // steps) if len(rel_ids) else 0
    lr = hyper.learning_rate * (hyper.decay_rate ** epoch)

    totals = LossBreakdown([0.0] * K, 0.0, 0.0, 0.0)
    for s in range(steps):
        lo, hi = s * hyper.batch_size, (s + 1) * hyper.batch_size
        rank_batches = []
        for k in range(K):
            m = (beh[lo:hi] == k)
            rank_batches.append((users[lo:hi][m], pos[lo:hi][m], neg[lo:hi][m])
                                if m.any() else None)
        rel_batches = []
        rlo, rhi = s * rel_chunk, (s + 1) * rel_chunk
        for r in range(ds.relation_count):
            m = (rel_ids[rlo:rhi] == r)
            rel_batches.append((rel_a[rlo:rhi][m], rel_p[rlo:rhi][m], rel_q[rlo:rhi][m])
                               if m.any() else None)
        tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
        total, breakdown, _ = batch_loss(tensors, ctx, hyper, rank_batches, rel_batches)
        if not np.isfinite(total.data):
            raise NumericError(
                f"non-finite loss at epoch {epoch} step {s}: "
                f"ranking={breakdown.ranking_per_behavior} relation={breakdown.relation}")
        total.backward()
        grads = {name: t.grad for name, t in tensors.items() if t.grad is not None}
        adam.step(params, grads, lr)
        for k in range(K):
            totals.ranking_per_behavior[k] += breakdown.ranking_per_behavior[k]
        totals.relation += breakdown.relation
        totals.regularization = breakdown.regularization  # last step's snapshot
        totals.total += breakdown.total
    return totals


# ---------------------------------------------------------- checkpointing

@dataclass
class Checkpoint:
    version: int
    config: dict           # flat string map: hyper snapshot, dims, epoch, rng
    arrays: OrderedDict    # name -> ndarray (params and "opt/" entries)

    def hyper(self) -> HyperConfig:
        kwargs = {}
        for f_ in HyperConfig.__dataclass_fields__.values():
            raw = self.config.get(f"hyper.{f_.name}")
            if raw is None:
                continue
            if f_.name == "alpha":
                kwargs[f_.name] = tuple(json.loads(raw))
            elif f_.type in ("int", int):
                kwargs[f_.name] = int(raw)
            elif f_.type in ("float", float):
                kwargs[f_.name] = float(raw)
            elif f_.type in ("bool", bool):
                kwargs[f_.name] = raw == "True"
            else:
                kwargs[f_.name] = raw
        return HyperConfig(**kwargs)

    def model_params(self) -> OrderedDict:
        return OrderedDict((k, v) for k, v in self.arrays.items()
                           if not k.startswith("opt/"))


def _config_block(hyper: HyperConfig, dataset: Dataset, epoch: int,
                  adam: Adam | None, rng_state: dict | None) -> dict:
    block = {f"hyper.{k}": (json.dumps(list(v)) if k == "alpha" else str(v))
             for k, v in asdict(hyper).items()}
    block.update({
        "dims.users": str(dataset.num_users),
        "dims.items": str(dataset.num_items),
        "dims.behaviors": str(dataset.num_behaviors),
        "dims.relations": str(dataset.relation_count),
        "dims.target_behavior": str(dataset.target_behavior),
        "epoch": str(epoch),
    })
    if adam is not None:
        block["opt.step"] = str(adam.step_count)
    if rng_state is not None:
        block["rng.state"] = json.dumps(rng_state, sort_keys=True)
    return block


def save_checkpoint(path, params: OrderedDict, config_block: dict,
                    adam: Adam | None = None):
    arrays = OrderedDict(params)
    if adam is not None:
        for name, arr in adam.m.items():
            arrays[f"opt/{name}/m"] = arr
        for name, arr in adam.v.items():
            arrays[f"opt/{name}/v"] = arr
    lines = "".join(f"{k}={v}\n" for k, v in config_block.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(lines)))
        fh.write(lines)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            tag = _DTYPE_TAGS[np.dtype(arr.dtype)]
            fh.write(struct.pack("<B", tag))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CompatibilityError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise CompatibilityError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", fh.read(4))
        config = {}
        for line in fh.read(clen).decode("utf-8").splitlines():
            if "=" in line:
                key, value = line.split("=", 1)
                config[key] = value
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
            (tag,) = struct.unpack("<B", fh.read(1))
            dtype = _TAG_DTYPES[tag]
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * dtype.itemsize)
            arrays[name] = np.frombuffer(buf, dtype=dtype.newbyteorder("<")).astype(
                dtype).reshape(shape)
        return Checkpoint(version, config, arrays)


def check_compatible(ckpt: Checkpoint, dataset: Dataset):
    pairs = [("dims.users", dataset.num_users), ("dims.items", dataset.num_items),
             ("dims.behaviors", dataset.num_behaviors),
             ("dims.relations", dataset.relation_count)]
    for key, expected in pairs:
        got = int(ckpt.config.get(key, -1))
        if got != expected:
            raise CompatibilityError(
                f"checkpoint {key}={got} does not match dataset value {expected}")


# ------------------------------------------------------------------- fit

@dataclass
class FitResult:
    params: OrderedDict
    adam: Adam
    best_epoch: int
    best_ndcg: float
    history: list = field(default_factory=list)  # JSONL-ready dicts
    best_snapshot: tuple | None = None  # (params, m, v, step, epoch, rng_state)


def _metrics_records(report: MetricsReport, epoch: int) -> list:
    records = []
    for k, (hr, ndcg, users) in report.per_behavior.items():
        records.append({"epoch": epoch, "behavior": int(k), "hr": hr,
                        "ndcg": ndcg, "users": int(users)})
    return records


def fit(dataset: Dataset, hyper: HyperConfig, top_n: int = 10,
        eval_all_behaviors: bool = False, log=None) -> FitResult:
    """Run the optimization loop with per-epoch evaluation.

    Epoch 0 is evaluated before any update; the best snapshot by target
    NDCG is kept (first best wins ties) with early stopping on `patience`.
    """
    hyper.validate(dataset.num_behaviors)
    ctx = ModelContext(dataset, hyper)
    rng = np.random.default_rng(hyper.seed)
    params = init_params(hyper, dataset, rng=rng)
    adam = Adam(params)
    result = FitResult(params, adam, best_epoch=0, best_ndcg=-1.0)

    def emit(record):
        result.history.append(record)
        if log is not None:
            log(record)

    def snapshot(epoch):
        return (OrderedDict((k, v.copy()) for k, v in params.items()),
                OrderedDict((k, v.copy()) for k, v in adam.m.items()),
                OrderedDict((k, v.copy()) for k, v in adam.v.items()),
                adam.step_count, epoch, rng.bit_generator.state)

    def run_eval(epoch):
        report = evaluate(params, ctx, hyper, top_n,
                          all_behaviors=eval_all_behaviors)
        for rec in _metrics_records(report, epoch):
            emit(rec)
        dist = report.diagnostics.get("interest_distance")
        if dist is not None:
            emit({"metric": "interest_distance", "epoch": epoch,
                  "mean": dist["mean"], "p10": dist["p10"], "p50": dist["p50"],
                  "p90": dist["p90"]})
        return report

    report = run_eval(0)
    best = report.per_behavior[dataset.target_behavior][1]
    result.best_ndcg = best
    result.best_snapshot = snapshot(0)
    stale = 0
    for epoch in range(hyper.epochs):
        losses = train_epoch(params, ctx, hyper, adam, rng, epoch)
        emit({"metric": "loss", "epoch": epoch + 1,
              "ranking": losses.ranking,
              "ranking_per_behavior": losses.ranking_per_behavior,
              "relation": losses.relation, "regularization": losses.regularization,
              "total": losses.total})
        report = run_eval(epoch + 1)
        ndcg = report.per_behavior[dataset.target_behavior][1]
        if ndcg > result.best_ndcg:
            result.best_ndcg = ndcg
            result.best_epoch = epoch + 1
            result.best_snapshot = snapshot(epoch + 1)
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                emit({"metric": "early_stop", "epoch": epoch + 1,
                      "patience": hyper.patience})
                break
    return result


def save_fit_checkpoint(path, result: FitResult, dataset: Dataset,
                        hyper: HyperConfig, use_best: bool = True):
    if use_best and result.best_snapshot is not None:
        params, m, v, step, epoch, rng_state = result.best_snapshot
        adam = Adam(params)
        adam.m, adam.v, adam.step_count = m, v, step
    else:
        params, adam, epoch = result.params, result.adam, result.best_epoch
        rng_state = None
    block = _config_block(hyper, dataset, epoch, adam, rng_state)
    save_checkpoint(path, params, block, adam)
