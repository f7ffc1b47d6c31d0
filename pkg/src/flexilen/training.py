"""Training loops for the multi-branch model and the conventional baselines.

Strategies:
  fln       one-time training over all three lengths with distillation
  isolated  one model per single observation length
  mixed     one model, per-iteration length sampled from probabilities
  finetune  train at the long length, then adapt to a target length
  joint     dataset expanded with every length, one model per eval length

All strategies are bit-reproducible under a fixed seed in single-threaded
execution; random draws come from named streams so that degenerate settings
reduce exactly to their baselines (mixed with rho=(0,0,1) consumes its
length-draw stream without disturbing batch shuffling).
"""
from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from .autodiff import Tensor, backward, zero_grad
from .backbone import FlnParams
from .config import RunConfig
from .data import (
    DatasetSplit,
    Normalizer,
    ObservationBundle,
    TrajectoryScene,
)
from .evaluation import evaluate
from .fln import fln_loss
from .mixture import nll

VAL_SCENE_CAP = 64  # per-epoch validation subset (deterministic prefix by id)

# named rng stream ids (hashed together with the run seed); parameter init
# namespaces itself with a trailing 0 inside init_params
STREAM_SHUFFLE = 1
STREAM_LENGTH = 2
STREAM_DATA = 3


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """First/second-moment update with bias correction; grad-less parameters
    are left untouched."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for name, tensor in params.items():
        grad = tensor.grad
        if grad is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * grad if m is None else beta1 * m + (1.0 - beta1) * grad
        v = (1.0 - beta2) * grad * grad if v is None else beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        tensor.data = tensor.data - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


# ------------------------------------------------------------------ batching


@dataclass
class PreparedScene:
    scene_id: str
    obs: np.ndarray     # (N, obs_len, 2) normalized
    future: np.ndarray  # (N, T, 2) normalized


def prepare_scenes(
    scenes: list[TrajectoryScene], normalizer: Normalizer, horizon: int
) -> list[PreparedScene]:
    prepared = []
    for scene in sorted(scenes, key=lambda s: s.scene_id):
        normalized, _ = normalizer.transform(scene)
        prepared.append(
            PreparedScene(
                scene.scene_id,
                normalized.positions[:, :-horizon, :],
                normalized.positions[:, -horizon:, :],
            )
        )
    return prepared


@dataclass
class Batch:
    obs: np.ndarray     # (B, N, obs_len, 2)
    future: np.ndarray  # (B, N, T, 2)
    tag: object = None  # strategy-specific payload (e.g. joint's length)


def _make_batches(
    items: list[tuple[PreparedScene, object]],
    batch_size: int,
    rng: np.random.Generator,
) -> list[Batch]:
    """Group scenes with equal agent counts (and equal tags) into shuffled
    batches; the attention core stays mask-free."""
    groups: dict[tuple, list[tuple[PreparedScene, object]]] = {}
    for scene, tag in items:
        groups.setdefault((scene.obs.shape[0], tag), []).append((scene, tag))
    batches: list[Batch] = []
    for key in sorted(groups, key=lambda k: (k[0], repr(k[1]))):
        members = groups[key]
        order = rng.permutation(len(members))
        for start in range(0, len(members), batch_size):
            chunk = [members[i] for i in order[start : start + batch_size]]
            batches.append(
                Batch(
                    obs=np.stack([c[0].obs for c in chunk]),
                    future=np.stack([c[0].future for c in chunk]),
                    tag=key[1],
                )
            )
    final_order = rng.permutation(len(batches))
    return [batches[i] for i in final_order]


# ------------------------------------------------------------------- logging


@dataclass
class EpochRecord:
    epoch: int
    total: float
    reg: float
    kl: float
    seconds: float
    val: dict[int, tuple[float, float]] = field(default_factory=dict)


@dataclass
class TrainLog:
    strategy: str
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        lengths = sorted({h for record in self.records for h in record.val})
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            header = ["epoch", "total", "reg", "kl", "seconds"]
            for h in lengths:
                header += [f"val_ade@{h}", f"val_fde@{h}"]
            writer.writerow(header)
            for record in self.records:
                row = [
                    record.epoch,
                    f"{record.total:.12g}",
                    f"{record.reg:.12g}",
                    f"{record.kl:.12g}",
                    f"{record.seconds:.3f}",
                ]
                for h in lengths:
                    ade_fde = record.val.get(h)
                    row += [f"{ade_fde[0]:.9f}", f"{ade_fde[1]:.9f}"] if ade_fde else ["", ""]
                writer.writerow(row)

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "strategy": self.strategy,
            "epochs": len(self.records),
            "final_total": last.total if last else None,
            "final_reg": last.reg if last else None,
            "final_kl": last.kl if last else None,
            "final_val": {str(h): list(v) for h, v in (last.val.items() if last else [])},
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True), encoding="utf-8")


# ------------------------------------------------------------ shared helpers


def _val_metrics(
    params: FlnParams,
    val_scenes: list[TrajectoryScene],
    lengths: list[int],
    normalizer: Normalizer,
    cfg: RunConfig,
) -> dict[int, tuple[float, float]]:
    if not val_scenes:
        return {}
    subset = sorted(val_scenes, key=lambda s: s.scene_id)[:VAL_SCENE_CAP]
    k = min(cfg.eval.samples, cfg.backbone.modes)
    out = {}
    for h in lengths:
        metrics = evaluate(params, subset, h, k, normalizer, sampling="mode-means")
        out[h] = (metrics.ade, metrics.fde)
    return out


def _epoch_log(records, epoch, sums, n_batches, started, val):
    records.append(
        EpochRecord(
            epoch=epoch,
            total=sums[0] / n_batches,
            reg=sums[1] / n_batches,
            kl=sums[2] / n_batches,
            seconds=time.perf_counter() - started,
            val=val,
        )
    )


def fit_normalizer(split: DatasetSplit, horizon: int) -> Normalizer:
    return Normalizer(horizon=horizon).fit(split.train)


# ---------------------------------------------------------------- strategies


def train_fln(
    split: DatasetSplit,
    cfg: RunConfig,
    normalizer: Normalizer | None = None,
    epoch_hook=None,
) -> tuple[FlnParams, TrainLog]:
    """One-time training of all three branches with the combined loss.

    ``epoch_hook(params, epoch)`` runs after every completed epoch (the CLI
    uses it for atomic per-epoch checkpoints)."""
    branches = cfg.branches
    normalizer = normalizer or fit_normalizer(split, cfg.data.horizon)
    prepared = prepare_scenes(split.train, normalizer, cfg.data.horizon)
    params = bb.init_params(
        cfg.backbone,
        branches.lengths,
        cfg.seed,
        weight_sharing=branches.weight_sharing,
        independent_pe=branches.independent_pe,
        specialized_ln=branches.specialized_ln,
    )
    state = AdamState()
    shuffle_rng = np.random.default_rng([cfg.seed, STREAM_SHUFFLE])
    log = TrainLog("fln")
    lengths = branches.lengths
    for epoch in range(cfg.train.epochs):
        started = time.perf_counter()
        sums = [0.0, 0.0, 0.0]
        batches = _make_batches([(p, None) for p in prepared], cfg.train.batch_size, shuffle_rng)
        for batch in batches:
            bundle = ObservationBundle(
                {b: batch.obs[:, :, -h:, :] for b, h in lengths.items()},
                {b: batch.future for b in lengths},
                "truncation",
            )
            loss = fln_loss(bundle, batch.future, params, branches)
            zero_grad(params.tensors)
            backward(loss.total)
            adam_step(params.tensors, state, cfg.train.lr)
            sums[0] += loss.total.item()
            sums[1] += loss.reg.item()
            sums[2] += loss.kl.item()
        val = _val_metrics(params, split.val, list(lengths.values()), normalizer, cfg)
        _epoch_log(log.records, epoch, sums, len(batches), started, val)
        if epoch_hook is not None:
            epoch_hook(params, epoch)
    return params, log


def _train_single(
    split: DatasetSplit,
    cfg: RunConfig,
    h_train: int,
    normalizer: Normalizer,
    length_rho: tuple[float, float, float] | None = None,
    seed: int | tuple = None,
    epochs: int | None = None,
    params: FlnParams | None = None,
    state: AdamState | None = None,
    shuffle_rng: np.random.Generator | None = None,
    strategy: str = "isolated",
    epoch_hook=None,
) -> tuple[FlnParams, TrainLog, AdamState, np.random.Generator]:
    """Shared single-model loop; `length_rho` switches per-batch lengths."""
    seed = cfg.seed if seed is None else seed
    prepared = prepare_scenes(split.train, normalizer, cfg.data.horizon)
    if params is None:
        params = bb.init_single_params(cfg.backbone, h_train, seed)
    state = state or AdamState()
    shuffle_rng = shuffle_rng or np.random.default_rng([*_seed_tuple(seed), STREAM_SHUFFLE])
    length_rng = np.random.default_rng([*_seed_tuple(seed), STREAM_LENGTH])
    candidates = [cfg.branches.h_short, cfg.branches.h_medium, cfg.branches.h_long]
    probs = None
    if length_rho is not None:
        probs = np.asarray(length_rho, dtype=np.float64)
        probs = probs / probs.sum()
    log = TrainLog(strategy)
    for epoch in range(epochs if epochs is not None else cfg.train.epochs):
        started = time.perf_counter()
        sums = [0.0, 0.0, 0.0]
        batches = _make_batches([(p, None) for p in prepared], cfg.train.batch_size, shuffle_rng)
        for batch in batches:
            h = h_train if probs is None else candidates[int(length_rng.choice(3, p=probs))]
            loss = nll(bb.forward_single(batch.obs[:, :, -h:, :], params), batch.future)
            zero_grad(params.tensors)
            backward(loss)
            adam_step(params.tensors, state, cfg.train.lr)
            sums[0] += loss.item()
            sums[1] += loss.item()
        val = _val_metrics(params, split.val, [h_train], normalizer, cfg)
        _epoch_log(log.records, epoch, sums, len(batches), started, val)
        if epoch_hook is not None:
            epoch_hook(params, epoch)
    return params, log, state, shuffle_rng


def _seed_tuple(seed) -> tuple[int, ...]:
    return (seed,) if isinstance(seed, int) else tuple(seed)


def train_isolated(
    split: DatasetSplit,
    cfg: RunConfig,
    h_train: int,
    normalizer: Normalizer | None = None,
    seed: int | tuple = None,
    epoch_hook=None,
) -> tuple[FlnParams, TrainLog]:
    """Conventional training at a single observation length."""
    normalizer = normalizer or fit_normalizer(split, cfg.data.horizon)
    params, log, _, _ = _train_single(
        split, cfg, h_train, normalizer, seed=seed, epoch_hook=epoch_hook
    )
    return params, log


def train_mixed(
    split: DatasetSplit,
    cfg: RunConfig,
    normalizer: Normalizer | None = None,
    epoch_hook=None,
) -> tuple[FlnParams, TrainLog]:
    """One model; each iteration trains at a length drawn from the
    (renormalized) probabilities rho."""
    normalizer = normalizer or fit_normalizer(split, cfg.data.horizon)
    rho = (cfg.train.rho_short, cfg.train.rho_medium, cfg.train.rho_long)
    params, log, _, _ = _train_single(
        split, cfg, cfg.branches.h_long, normalizer, length_rho=rho, strategy="mixed",
        epoch_hook=epoch_hook,
    )
    return params, log


def train_finetune(
    split: DatasetSplit, cfg: RunConfig, normalizer: Normalizer | None = None
) -> tuple[FlnParams, TrainLog, FlnParams]:
    """Train at the long length, then continue at the target length until the
    validation ADE plateaus; the pre-finetune checkpoint is preserved."""
    normalizer = normalizer or fit_normalizer(split, cfg.data.horizon)
    target = cfg.train.finetune_target
    params, log, state, shuffle_rng = _train_single(
        split, cfg, cfg.branches.h_long, normalizer, strategy="finetune"
    )
    pre = copy.deepcopy(params)
    best = np.inf
    stale = 0
    for extra in range(cfg.train.finetune_max_epochs):
        params, phase_log, state, shuffle_rng = _train_single(
            split,
            cfg,
            target,
            normalizer,
            epochs=1,
            params=params,
            state=state,
            shuffle_rng=shuffle_rng,
            strategy="finetune",
        )
        record = phase_log.records[0]
        record.epoch = len(log.records)
        log.records.append(record)
        current = record.val.get(target, (np.inf, np.inf))[0] if record.val else np.inf
        if current < best - 1e-12:
            best = current
            stale = 0
        else:
            stale += 1
            if stale >= cfg.train.finetune_patience:
                break
    return params, log, pre


def train_joint(
    split: DatasetSplit, cfg: RunConfig, normalizer: Normalizer | None = None
) -> dict[int, tuple[FlnParams, TrainLog]]:
    """Expand the training set with every length; train one model per
    evaluation length on the expanded set."""
    normalizer = normalizer or fit_normalizer(split, cfg.data.horizon)
    prepared = prepare_scenes(split.train, normalizer, cfg.data.horizon)
    lengths = [cfg.branches.h_short, cfg.branches.h_medium, cfg.branches.h_long]
    out: dict[int, tuple[FlnParams, TrainLog]] = {}
    for index, h_eval in enumerate(lengths):
        seed = (cfg.seed, 7, index)
        params = bb.init_single_params(cfg.backbone, cfg.branches.h_long, seed)
        state = AdamState()
        shuffle_rng = np.random.default_rng([*seed, STREAM_SHUFFLE])
        log = TrainLog("joint")
        expanded = [(p, h) for p in prepared for h in lengths]
        for epoch in range(cfg.train.epochs):
            started = time.perf_counter()
            sums = [0.0, 0.0, 0.0]
            batches = _make_batches(expanded, cfg.train.batch_size, shuffle_rng)
            for batch in batches:
                h = batch.tag
                loss = nll(bb.forward_single(batch.obs[:, :, -h:, :], params), batch.future)
                zero_grad(params.tensors)
                backward(loss)
                adam_step(params.tensors, state, cfg.train.lr)
                sums[0] += loss.item()
                sums[1] += loss.item()
            val = _val_metrics(params, split.val, [h_eval], normalizer, cfg)
            _epoch_log(log.records, epoch, sums, len(batches), started, val)
        out[h_eval] = (params, log)
    return out
