# FILE: pcno/training.py

import csv
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .dataset_io import Batch, pad_and_batch
from .error_utils import PCNOError, not_found_error, version_error
from .geometry import PointCloudSample, bounding_box
from .model import ModelParams, NormStats, compute_norm_stats, init_params, model_forward
from .pydantic_models import (EpochRecord, EvalReport, ModelConfig, OptimizerConfig, RunConfig, RunHistory,
                              ScheduleConfig)

CHECKPOINT_MAGIC = b"PCNOCKPT"
CHECKPOINT_FORMAT = "pcno-checkpoint"
CHECKPOINT_VERSION = 1
LENGTH_PARAM_SUFFIX = "fourier.log_length"


# --- OBJECTIVE ---

def relative_l2_loss(pred: tc.Tensor, ref: np.ndarray, mask: np.ndarray, n_samples: int) -> Tuple[tc.Tensor, np.ndarray]:
    """
    Mean over samples of ||pred - ref|| / ||ref||, norms over unmasked rows and
    all channels. pred and ref are (B*N, c) with rows grouped per sample.

    Returns:
        (scalar loss tensor, per-sample relative errors)
    """
    pred = tc.as_tensor(pred)
    ref = np.asarray(ref, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != ref.shape or mask.shape != ref.shape[:1] or ref.shape[0] % n_samples:
        raise PCNOError("SHAPE_MISMATCH", f"loss: pred {pred.shape}, ref {ref.shape}, mask {mask.shape}, {n_samples} samples")
    rows_per_sample = ref.shape[0] // n_samples
    sample_of_row = np.repeat(np.arange(n_samples), rows_per_sample)

    ref_masked = np.where(mask[:, None], ref, 0.0)
    ref_norm = np.sqrt(np.bincount(sample_of_row, weights=(ref_masked ** 2).sum(axis=1), minlength=n_samples))
    zero = np.flatnonzero(ref_norm == 0.0)
    if zero.size:
        raise PCNOError("ZERO_REFERENCE", f"reference is identically zero for sample {int(zero[0])}",
                        {"sample_index": int(zero[0])})

    mask_f = tc.Tensor(mask.astype(np.float64))
    diff = tc.scale_rows(tc.sub(pred, tc.Tensor(ref_masked.astype(pred.dtype))), mask_f)
    row_sq = tc.matmul(tc.mul(diff, diff), tc.Tensor(np.ones((ref.shape[1], 1))))
    per_sample = tc.reshape(tc.segment_sum(row_sq, sample_of_row, n_samples), (n_samples,))
    rel = tc.scale_rows(tc.sqrt(per_sample), tc.Tensor(1.0 / ref_norm))
    loss = tc.scale(tc.sum_all(rel), 1.0 / n_samples)
    return loss, rel.numpy().astype(np.float64)


# --- SCHEDULE ---

def lr_at(schedule: ScheduleConfig, step: int) -> float:
    """One-cycle: linear warm-up from base/start_div to base, cosine decay to base/final_div."""
    total = schedule.total_steps
    step = min(max(step, 0), total)
    base = schedule.base_lr
    warm = schedule.warm_frac * total
    if step <= warm:
        start = base / schedule.start_div
        return start + (base - start) * (step / warm if warm > 0 else 1.0)
    final = base / schedule.final_div
    progress = (step - warm) / (total - warm)
    return final + (base - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- OPTIMIZER ---

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def adam_step(params: Mapping[str, tc.Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float,
              config: Optional[OptimizerConfig] = None, lr_scales: Optional[Mapping[str, float]] = None,
              decay_exempt: Iterable[str] = ()) -> bool:
    """
    Adam with decoupled weight decay, in place. Returns False (and leaves
    parameters and moments untouched) when any gradient is non-finite.
    """
    config = config or OptimizerConfig()
    lr_scales = lr_scales or {}
    decay_exempt = set(decay_exempt)
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        state.skipped += 1
        logging.warning(f"Skipping optimizer step {state.step + 1}: non-finite gradient in {bad[:3]}")
        return False

    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, param in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        step_lr = lr * lr_scales.get(name, 1.0)
        value = param.data.astype(np.float64)
        if name not in decay_exempt and config.weight_decay > 0:
            value = value - step_lr * config.weight_decay * value
        value = value - step_lr * m_hat / (np.sqrt(v_hat) + config.eps)
        param.data = value.astype(param.dtype)
    return True


def parameter_groups(model: ModelParams, schedule: ScheduleConfig) -> Tuple[Dict[str, float], List[str]]:
    """Learning-rate multipliers and weight-decay exemptions: the length scales form their own group."""
    lengths = [name for name in model.named_parameters() if name.endswith(LENGTH_PARAM_SUFFIX)]
    return {name: schedule.length_lr_scale for name in lengths}, lengths


# --- EVALUATION ---

def _targets(batch: Batch) -> np.ndarray:
    if batch.u is None:
        raise PCNOError("MISSING_FEATURES", "samples carry no reference output u")
    return batch.u.reshape(-1, batch.u.shape[2])


def evaluate(model: ModelParams, samples: Sequence[PointCloudSample], batch_size: int = 8) -> np.ndarray:
    """Per-sample relative L2 errors, in sample order."""
    errors = []
    for start in range(0, len(samples), batch_size):
        batch = pad_and_batch(samples[start:start + batch_size])
        pred = model_forward(model, batch)
        _, per_sample = relative_l2_loss(pred, _targets(batch), batch.flat_mask, batch.batch_size)
        errors.append(per_sample)
    return np.concatenate(errors) if errors else np.zeros(0)


def summarize_errors(errors: np.ndarray, labels: Sequence[str]) -> EvalReport:
    if errors.size == 0:
        raise PCNOError("EMPTY_DATASET", "no samples evaluated")
    per_group, counts = {}, {}
    for label in sorted(set(labels)):
        sel = np.array([l == label for l in labels])
        per_group[label or "all"] = float(errors[sel].mean())
        counts[label or "all"] = int(sel.sum())
    return EvalReport(n_samples=int(errors.size), mean_rel_l2=float(errors.mean()),
                      median_rel_l2=float(np.median(errors)), worst_rel_l2=float(errors.max()),
                      per_group=per_group, per_group_counts=counts)


# --- TRAINING LOOP ---

@dataclass
class TrainResult:
    best_model: ModelParams
    final_model: ModelParams
    history: RunHistory


def _check_dataset(samples: Sequence[PointCloudSample], name: str) -> None:
    for i, s in enumerate(samples):
        if s.features is None or s.gradient is None:
            raise PCNOError("MISSING_FEATURES", f"{name} sample {i} has not been preprocessed", {"sample_index": i})
        if s.u is None:
            raise PCNOError("MISSING_FEATURES", f"{name} sample {i} has no reference output", {"sample_index": i})


def initial_length_scales(samples: Sequence[PointCloudSample]) -> np.ndarray:
    lo, hi = bounding_box(samples)
    extent = hi - lo
    return np.where(extent > 0, extent, 1.0)


def train(config: RunConfig, train_set: Sequence[PointCloudSample], test_set: Sequence[PointCloudSample],
          seed: int = 0) -> TrainResult:
    """
    Mini-batch training with a one-cycle schedule. The model with the lowest
    test error (train error when there is no test set) is kept as best.
    """
    train_set, test_set = list(train_set), list(test_set)
    if not train_set:
        raise PCNOError("EMPTY_DATASET", "training set is empty")
    _check_dataset(train_set, "training")
    _check_dataset(test_set, "test")

    tcfg = config.train
    length_init = config.model.length_init if config.model.length_init is not None else initial_length_scales(train_set)
    model = init_params(config.model, seed, length_init)
    model.norm_stats = compute_norm_stats(train_set)
    params = model.named_parameters()

    n_batches = math.ceil(len(train_set) / tcfg.batch_size)
    schedule = tcfg.schedule.model_copy(update={"total_steps": tcfg.epochs * n_batches})
    lr_scales, decay_exempt = parameter_groups(model, schedule)
    state = OptimizerState()
    history = RunHistory()
    rng = np.random.default_rng(seed)
    best_model, best_score = model.copy(), math.inf
    initial_loss = None
    global_step = 0
    logging.info(f"Training {model.n_parameters} parameters on {len(train_set)} samples "
                 f"({n_batches} batches x {tcfg.epochs} epochs), test set {len(test_set)}")

    for epoch in range(tcfg.epochs):
        started = time.perf_counter()
        order = rng.permutation(len(train_set))
        epoch_errors = []
        lr = lr_at(schedule, global_step)
        for start in range(0, len(order), tcfg.batch_size):
            batch = pad_and_batch([train_set[i] for i in order[start:start + tcfg.batch_size]])
            lr = lr_at(schedule, global_step)
            global_step += 1
            with tc.Tape() as tape:
                pred = model_forward(model, batch)
                loss, per_sample = relative_l2_loss(pred, _targets(batch), batch.flat_mask, batch.batch_size)
                grads = tape.backward(loss, params)
            value = float(loss.item())
            epoch_errors.append(per_sample)
            if initial_loss is None:
                initial_loss = value
            if not np.isfinite(value) or (initial_loss > 0 and value > tcfg.divergence_factor * initial_loss):
                history.status = "diverged"
                history.skipped_steps = state.skipped
                logging.error(f"Training diverged at epoch {epoch}: loss {value:.4e} vs initial {initial_loss:.4e}")
                return TrainResult(best_model=best_model, final_model=model, history=history)
            adam_step(params, grads, state, lr, tcfg.optimizer, lr_scales, decay_exempt)

        train_err = float(np.concatenate(epoch_errors).mean())
        test_err = float(evaluate(model, test_set, tcfg.eval_batch_size).mean()) if test_set else None
        score = test_err if test_err is not None else train_err
        if score < best_score:
            best_score, best_model = score, model.copy()
            history.best_epoch, history.best_test_rel_l2 = epoch, test_err
        history.epochs.append(EpochRecord(epoch=epoch, train_rel_l2=train_err, test_rel_l2=test_err, lr=lr,
                                          wall_time=time.perf_counter() - started))
        logging.info(f"Epoch {epoch}: train rel-L2 {train_err:.4e}"
                     + (f", test rel-L2 {test_err:.4e}" if test_err is not None else "") + f", lr {lr:.3e}")

    history.status = "completed"
    history.skipped_steps = state.skipped
    return TrainResult(best_model=best_model, final_model=model, history=history)


def write_history_csv(history: RunHistory, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_rel_l2", "test_rel_l2", "lr", "wall_time"])
        for rec in history.epochs:
            writer.writerow([rec.epoch, repr(rec.train_rel_l2), "" if rec.test_rel_l2 is None else repr(rec.test_rel_l2),
                             repr(rec.lr), repr(rec.wall_time)])


# --- CHECKPOINTS ---

def save_checkpoint(model: ModelParams, path: str, run_config: Optional[RunConfig] = None) -> None:
    """
    Single file: magic, uint64 header length, JSON header (format tag,
    version, config echo, normalization, parameter manifest), then every
    parameter as little-endian float64.
    """
    manifest, blobs, offset = [], [], 0
    for name, tensor in model.named_parameters().items():
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.model_dump(),
        "run_config": run_config.model_dump() if run_config is not None else None,
        "norm_stats": model.norm_stats.to_dict() if model.norm_stats is not None else None,
        "params": manifest,
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)
    logging.info(f"Saved checkpoint with {len(manifest)} tensors to {path}")


def load_checkpoint(path: str) -> ModelParams:
    if not os.path.isfile(path):
        raise not_found_error(f"Checkpoint not found: {path}")
    with open(path, "rb") as fh:
        payload = fh.read()
    if payload[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise version_error(CHECKPOINT_FORMAT, "unknown", "checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", payload, pos)
    pos += 8
    header = json.loads(payload[pos:pos + header_len].decode("utf-8"))
    pos += header_len
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise version_error(f"{CHECKPOINT_FORMAT}/{CHECKPOINT_VERSION}",
                            f"{header.get('format')}/{header.get('version')}", "checkpoint")

    model = init_params(ModelConfig(**header["model_config"]), seed=0)
    arrays = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=count,
                                              offset=pos + entry["offset"]).reshape(entry["shape"])
    model.load_state(arrays)
    if header.get("norm_stats") is not None:
        model.norm_stats = NormStats.from_dict(header["norm_stats"])
    logging.info(f"Loaded checkpoint from {path}")
    return model
