"""AdamW, the warmup / inverse-sqrt schedule, cross-entropy and the training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import score_probe
from .blocks import Model
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .diagnostics import MemorySnapshot, attention_entropy, save_snapshot
from .errors import InputError, NumericError, UsageError
from .nn import Parameter
from .tasks import Dataset, Task
from .tensor import Tensor


def lr_at(step: int, cfg: TrainConfig) -> float:
    """``base_lr * min(1, step / warmup) / sqrt(max(step, warmup))``."""
    warmup = cfg.warmup_steps
    return cfg.base_lr * min(1.0, step / warmup) / math.sqrt(max(step, warmup))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer class targets."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if targets.shape[0] != batch:
        raise InputError(f"{targets.shape[0]} targets for a batch of {batch}")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise InputError(f"targets must lie in [0, {classes})")
    onehot = np.zeros((batch, classes), dtype=logits.dtype)
    onehot[np.arange(batch), targets] = 1.0
    return -(T.log_softmax(logits, axis=-1) * onehot).sum() * (1.0 / batch)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, Parameter],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Parameters with ``decay=False`` (norm gains/biases, biases, tau) skip decay.
    """
    for name in params:
        if grads.get(name) is None:
            raise UsageError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2, t = cfg.beta1, cfg.beta2, state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if p.decay and cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)


class AdamW:
    def __init__(self, model: Model, cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.params = {name: p for name, p in model.named_parameters() if p.requires_grad}
        self.state = OptimizerState()

    def step(self, lr: float) -> None:
        # Parameters the loss never reaches (e.g. the last block's token path
        # under memory-average pooling) have no gradient and are left alone.
        live = {name: p for name, p in self.params.items() if p.grad is not None}
        grads = {name: p.grad for name, p in live.items()}
        if self.cfg.grad_clip:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
            if norm > self.cfg.grad_clip:
                scale = self.cfg.grad_clip / norm
                grads = {k: None if g is None else g * scale for k, g in grads.items()}
        adamw_step(live, grads, self.state, lr, self.cfg)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.state.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.state.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.state = OptimizerState(
            {k[len("adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")},
            {k[len("adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")},
            t,
        )


# ---------------------------------------------------------------------------
# Metric log
# ---------------------------------------------------------------------------


class MetricLog:
    """Line-delimited JSON records ``{step, split, metric, value, wall_time}``."""

    def __init__(self, path: Path | None, record_wall_time: bool = False, append: bool = False) -> None:
        self.path = path
        self.records: list[dict] = []
        self.record_wall_time = record_wall_time
        self._start = time.perf_counter()
        if path is not None and not append:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def add(self, step: int, split: str, metric: str, value) -> None:
        wall = round(time.perf_counter() - self._start, 6) if self.record_wall_time else None
        record = {"step": step, "split": split, "metric": metric, "value": value, "wall_time": wall}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    run_dir: Path | None
    metrics_path: Path | None
    snapshot_paths: list[Path]
    final_checkpoint: Path | None
    best_checkpoint: Path | None
    report_path: Path | None
    records: list[dict]
    final_state: dict[str, np.ndarray]
    best_state: dict[str, np.ndarray]
    final_val_accuracy: float | None
    best_val_accuracy: float | None


def _trim(ids: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop trailing all-padding columns."""
    valid = np.flatnonzero(mask.any(axis=0))
    width = int(valid[-1]) + 1 if valid.size else 1
    return ids[:, :width], mask[:, :width]


def _forward(model: Model, batch: dict) -> Tensor:
    ids, mask, ids_b, mask_b = batch["ids"], batch["mask"], batch.get("ids_b"), batch.get("mask_b")
    # Trailing padding only changes results through strided filter windows.
    cfg = model.cfg
    if not cfg.rescaled or cfg.filter.kind == "identity" or cfg.filter.stride == 1:
        ids, mask = _trim(ids, mask)
        if ids_b is not None:
            ids_b, mask_b = _trim(ids_b, mask_b)
    return model(ids, mask, ids_b, mask_b)


def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a whole dataset."""
    model.eval()
    total_loss = 0.0
    correct = 0
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            batch = data.batch(slice(start, start + batch_size))
            logits = _forward(model, batch)
            n = len(batch["labels"])
            total_loss += cross_entropy(logits, batch["labels"]).item() * n
            correct += int((logits.data.argmax(axis=-1) == batch["labels"]).sum())
    model.train()
    return total_loss / max(len(data), 1), correct / max(len(data), 1)


def packing_entropy(model: Model, batch: dict) -> dict[int, float]:
    """Normalised entropy of each block's input-memory (or self) attention."""
    model.eval()
    with T.no_grad(), score_probe(keep_scores=True) as probe:
        _forward(model, batch)
    model.train()
    suffix = "attn" if model.cfg.arch == "vanilla" else "pack"
    out = {}
    for i in range(len(model.blocks)):
        scores = probe.scores(f"block{i}.{suffix}")
        if scores:
            out[i] = attention_entropy(scores[0])
    return out


def _memory_snapshots(model: Model, step: int) -> list[MemorySnapshot]:
    if model.memory is None:
        return []
    snaps = [MemorySnapshot(step, 0, model.memory.data.astype(np.float64), "value")]
    if model.memory.grad is not None:
        snaps.append(MemorySnapshot(step, 0, model.memory.grad.astype(np.float64), "gradient"))
    return snaps


def _state_meta(step: int, batch_rng: np.random.Generator, model: Model, opt: AdamW, best: float | None) -> dict:
    return {
        "step": step,
        "optimizer_t": opt.state.t,
        "batch_rng": batch_rng.bit_generator.state,
        "dropout_rng": model.rng.rng.bit_generator.state,
        "best_val_accuracy": best,
    }


def train(
    model: Model,
    task: Task,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    resume: bool = False,
) -> RunArtifacts:
    """Optimise ``model`` on ``task.train`` for ``cfg.total_steps`` steps.

    With a ``run_dir`` the metric log, memory snapshots and checkpoints are
    written under it; ``resume=True`` continues from ``checkpoints/state.ckpt``.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_dir = run_dir / "checkpoints" if run_dir else None
    snap_dir = run_dir / "snapshots" if run_dir else None
    metrics_path = run_dir / "metrics.jsonl" if run_dir else None

    batch_rng = np.random.default_rng([cfg.seed, 1])
    model.rng.reseed([cfg.seed, 2])
    opt = AdamW(model, cfg)
    start_step = 0
    best_acc: float | None = None
    if resume:
        if ckpt_dir is None or not (ckpt_dir / "state.ckpt").exists():
            raise UsageError("nothing to resume: checkpoints/state.ckpt is missing")
        arrays, meta = load_checkpoint(ckpt_dir / "state.ckpt")
        model.load_state_dict({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
        opt.load_arrays(arrays, meta["optimizer_t"])
        batch_rng.bit_generator.state = meta["batch_rng"]
        model.rng.rng.bit_generator.state = meta["dropout_rng"]
        start_step = meta["step"]
        best_acc = meta["best_val_accuracy"]
    log = MetricLog(metrics_path, cfg.record_wall_time, append=resume)

    model.train()
    snapshot_paths: list[Path] = []
    best_state = model.state_dict()
    if ckpt_dir is not None and not resume:
        save_checkpoint(ckpt_dir / "init.ckpt", model.state_dict(), {"step": 0})
    probe_batch = task.val.batch(slice(0, min(64, len(task.val))))
    n_train = len(task.train)
    if cfg.total_steps > start_step and n_train == 0:
        raise InputError("training set is empty")

    final_acc: float | None = None
    window_loss: list[float] = []
    window_correct = window_count = 0
    for step in range(start_step + 1, cfg.total_steps + 1):
        index = batch_rng.integers(0, n_train, size=cfg.batch_size)
        batch = task.train.batch(index)
        is_eval = step % cfg.eval_every == 0 or step == cfg.total_steps
        try:
            with T.count_flops() as flops:
                logits = _forward(model, batch)
            loss = cross_entropy(logits, batch["labels"])
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericError("non-finite loss")
        except NumericError as exc:
            log.add(step, "train", "nan_abort", None)
            raise NumericError(f"{exc} at step {step}") from exc
        model.zero_grad()
        loss.backward()
        if step % cfg.snapshot_every == 0:
            for snap in _memory_snapshots(model, step):
                if snap_dir is not None:
                    snapshot_paths.append(save_snapshot(snap, snap_dir / f"step{step:07d}_{snap.tag}.ckpt"))
        lr = lr_at(step, cfg)
        opt.step(lr)

        window_loss.append(loss_value)
        window_correct += int((logits.data.argmax(axis=-1) == batch["labels"]).sum())
        window_count += len(batch["labels"])
        if is_eval:
            val_loss, val_acc = evaluate(model, task.val)
            final_acc = val_acc
            log.add(step, "train", "loss", float(np.mean(window_loss)))
            log.add(step, "train", "accuracy", window_correct / window_count)
            log.add(step, "train", "lr", lr)
            log.add(step, "train", "flops", flops.total)
            for name, tau in model.taus().items():
                log.add(step, "train", f"tau/{name}", tau)
            log.add(step, "val", "loss", val_loss)
            log.add(step, "val", "accuracy", val_acc)
            for block, ent in packing_entropy(model, probe_batch).items():
                log.add(step, "val", f"attention_entropy/block{block}", ent)
            window_loss, window_correct, window_count = [], 0, 0
            if best_acc is None or val_acc > best_acc:
                best_acc = val_acc
                best_state = model.state_dict()
                if ckpt_dir is not None:
                    save_checkpoint(ckpt_dir / "best.ckpt", best_state, {"step": step, "val_accuracy": val_acc})

    final_state = model.state_dict()
    final_ckpt = best_ckpt = report_path = None
    if ckpt_dir is not None:
        final_ckpt = save_checkpoint(ckpt_dir / "final.ckpt", final_state, {"step": cfg.total_steps})
        if not (ckpt_dir / "best.ckpt").exists():
            save_checkpoint(ckpt_dir / "best.ckpt", best_state, {"step": cfg.total_steps, "val_accuracy": best_acc})
        best_ckpt = ckpt_dir / "best.ckpt"
        state = {f"param.{k}": v for k, v in final_state.items()}
        state.update(opt.state_arrays())
        save_checkpoint(ckpt_dir / "state.ckpt", state, _state_meta(cfg.total_steps, batch_rng, model, opt, best_acc))
        report_dir = run_dir / "report"
        report_dir.mkdir(parents=True, exist_ok=True)
        report_path = report_dir / "summary.json"
        summary = {
            "total_steps": cfg.total_steps,
            "final_val_accuracy": final_acc,
            "best_val_accuracy": best_acc,
            "parameters": model.num_parameters(),
        }
        report_path.write_text(json.dumps(summary, indent=2) + "\n")
        snapshot_paths = sorted(snap_dir.glob("*.ckpt")) if snap_dir.exists() else []
    return RunArtifacts(
        run_dir, metrics_path, snapshot_paths, final_ckpt, best_ckpt, report_path,
        log.records, final_state, best_state, final_acc, best_acc,
    )

