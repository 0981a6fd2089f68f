"""
Training loop for HPRN.

Adam with polynomial learning-rate decay, per-step CSV logging, per-epoch
validation on MRAE with best/last checkpoints, bit-exact resume in 64-bit
mode, and a finite-difference gradient check.

Run layout (train_cfg.run_dir):
    config.txt         resolved model and training config
    train_log.csv      step,epoch,lr,l1,sopc,total,val_mrae
    best.ckpt          HPRNCKPT of the lowest validation MRAE
    last.ckpt          HPRNCKPT after the latest epoch
    last_state.npz     full-precision parameters, Adam moments and step
    diagnostics.json   only written when a loss goes non-finite
"""

import csv
import json
import math
import os
import queue
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from checkpoint import (
    load_checkpoint,
    load_training_state,
    save_checkpoint,
    save_training_state,
)
from data_synth_io import ScenePair, crop_window, gen_hsi, gen_sensitivity, project_rgb
from hprn_config import HPRNConfig, TrainConfig, format_config
from hprn_errors import ContractError, DimensionError, NonFiniteLossError
from hprn_model import HPRN, hprn_forward, semantic_prior
from log_utils import log
from loss_sopc import batch_loss, total_loss
from metrics_suite import MetricsReport, evaluate
from slic_segmenter import LabelMap
from tensor_engine import Tensor, diagnostics, record_kinks, resolve_dtype

LOG_COLUMNS = ["step", "epoch", "lr", "l1", "sopc", "total", "val_mrae"]
SLIC_CACHE_SIZE = 4096
PREFETCH_POLL_SECONDS = 0.1


# ========================================
# Optimizer
# ========================================
@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, named_params: Sequence[Tuple[str, Tensor]]) -> "OptimizerState":
        return cls({n: np.zeros_like(p.data) for n, p in named_params},
                   {n: np.zeros_like(p.data) for n, p in named_params}, 0)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> OptimizerState:
    """Bias-corrected Adam update, in place on params and state."""
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape or state.m[name].shape != param.shape:
            raise DimensionError(f"adam_step: '{name}' has shape {param.shape}, gradient {grad.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * grad
        v = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data = (param.data - update).astype(param.dtype)
    return state


def poly_lr(t: int, total: int, lr0: float, power: float) -> float:
    """lr0 * (1 - t/T)^power, clamped to 0 past T."""
    if total < 1:
        raise ContractError(f"total steps must be >= 1, got {total}")
    if t < 0:
        raise ContractError(f"step must be >= 0, got {t}")
    if t >= total:
        return 0.0
    return lr0 * (1.0 - t / total) ** power


# ========================================
# Data
# ========================================
@dataclass
class TrainingPatch:
    scene_id: str
    rgb: np.ndarray
    hsi: np.ndarray
    label_maps: List[LabelMap]


class PatchSampler:
    """Batches are a pure function of (seed, step); SLIC maps are cached per scene window."""

    def __init__(self, scenes: Sequence[ScenePair], model_cfg: HPRNConfig, train_cfg: TrainConfig):
        if not scenes:
            raise ContractError("training split is empty")
        smallest = min(min(s.cube.height, s.cube.width) for s in scenes)
        if train_cfg.patch_size > smallest:
            raise ContractError(f"patch size {train_cfg.patch_size} exceeds the smallest scene ({smallest} px)")
        self.scenes = list(scenes)
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self._cache: "OrderedDict[tuple, List[LabelMap]]" = OrderedDict()
        self._lock = threading.Lock()

    def _labels(self, key: tuple, rgb: np.ndarray) -> List[LabelMap]:
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        labels = semantic_prior(rgb, self.model_cfg)
        with self._lock:
            self._cache[key] = labels
            if len(self._cache) > SLIC_CACHE_SIZE:
                self._cache.popitem(last=False)
        return labels

    def sample(self, step: int) -> List[TrainingPatch]:
        rng = np.random.default_rng([self.model_cfg.seed, step])
        size = self.train_cfg.patch_size
        batch = []
        for _ in range(self.train_cfg.batch_size):
            scene = self.scenes[int(rng.integers(len(self.scenes)))]
            top = int(rng.integers(0, scene.cube.height - size + 1))
            left = int(rng.integers(0, scene.cube.width - size + 1))
            rgb = crop_window(scene.rgb, top, left, size)
            hsi = crop_window(scene.cube.values, top, left, size)
            batch.append(TrainingPatch(scene.scene_id, rgb, hsi,
                                       self._labels((scene.scene_id, top, left), rgb)))
        return batch


class PrefetchLoader:
    """Produces batches for steps [start, stop) on a background thread through a bounded queue."""

    def __init__(self, sampler: PatchSampler, start: int, stop: int, depth: int):
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(1, depth))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, args=(sampler, start, stop), daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=PREFETCH_POLL_SECONDS)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self, sampler: PatchSampler, start: int, stop: int):
        for step in range(start, stop):
            if self._stop.is_set():
                return
            try:
                item = (step, sampler.sample(step), None)
            except Exception as e:
                self._put((step, None, e))
                return
            if not self._put(item):
                return

    def get(self, step: int) -> List[TrainingPatch]:
        produced, batch, error = self._queue.get()
        if error is not None:
            raise error
        if produced != step:
            raise ContractError(f"prefetch out of order: expected step {step}, got {produced}")
        return batch

    @property
    def running(self) -> bool:
        return self._thread.is_alive()

    def close(self):
        """Stop the producer and drop queued batches."""
        self._stop.set()
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        self._thread.join()


# ========================================
# Model persistence and evaluation
# ========================================
def save_model(model: HPRN, path: str):
    save_checkpoint(path, model.state_dict().items())


def load_model(path: str, model_cfg: HPRNConfig, precision: str = "float32") -> HPRN:
    """Build HPRN from a config and fill it from an HPRNCKPT file; mismatches name the parameter."""
    model = HPRN(model_cfg, resolve_dtype(precision))
    model.load_state_dict(load_checkpoint(path))
    return model


def evaluate_scenes(model: HPRN, scenes: Sequence[ScenePair], psnr_formula: str = "standard",
                    label_cache: Optional[Dict[str, List[LabelMap]]] = None) -> List[Tuple[str, MetricsReport]]:
    """Full-scene inference and metrics for every scene."""
    results = []
    for scene in scenes:
        labels = None
        if label_cache is not None:
            if scene.scene_id not in label_cache:
                label_cache[scene.scene_id] = semantic_prior(scene.rgb, model.cfg)
            labels = label_cache[scene.scene_id]
        pred = hprn_forward(scene.rgb, labels, model)
        results.append((scene.scene_id, evaluate(pred, scene.cube, psnr_formula=psnr_formula)))
    return results


# ========================================
# Training loop
# ========================================
@dataclass
class TrainResult:
    steps: int
    best_val_mrae: float
    last_val_mrae: float
    losses: List[float]
    run_dir: str

    @property
    def log_path(self) -> str:
        return os.path.join(self.run_dir, "train_log.csv")

    @property
    def best_checkpoint(self) -> str:
        return os.path.join(self.run_dir, "best.ckpt")

    @property
    def last_checkpoint(self) -> str:
        return os.path.join(self.run_dir, "last.ckpt")


def _dump_diagnostics(run_dir: str, info: dict):
    path = os.path.join(run_dir, "diagnostics.json")
    with open(path, "w") as f:
        json.dump(info, f, indent=2)
    return path


def _restore(model: HPRN, state_path: str) -> Tuple[OptimizerState, int, float]:
    saved = load_training_state(state_path)
    model.load_state_dict(saved["params"])
    opt = OptimizerState({k: np.asarray(v) for k, v in saved["m"].items()},
                         {k: np.asarray(v) for k, v in saved["v"].items()}, saved["step"])
    return opt, saved["step"], saved["best_val_mrae"]


def train_loop(model: HPRN, train_scenes: Sequence[ScenePair], val_scenes: Sequence[ScenePair],
               model_cfg: HPRNConfig, train_cfg: TrainConfig, resume: bool = False,
               max_steps: Optional[int] = None, show_progress: bool = True) -> TrainResult:
    """
    Train model in place.

    Args:
        model: HPRN built from model_cfg in the train precision
        train_scenes: Scenes to sample patches from
        val_scenes: Scenes for per-epoch MRAE validation (may be empty)
        model_cfg, train_cfg: Resolved configs
        resume: Continue from run_dir/last_state.npz
        max_steps: Stop early after this global step (the schedule still spans total_steps)
        show_progress: Display a tqdm bar

    Returns:
        TrainResult
    """
    train_cfg.validate()
    run_dir = train_cfg.run_dir
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.txt"), "w") as f:
        f.write(format_config(model_cfg) + format_config(train_cfg))

    named = model.named_parameters()
    params = OrderedDict(named)
    state_path = os.path.join(run_dir, "last_state.npz")
    log_path = os.path.join(run_dir, "train_log.csv")
    opt, start, best = OptimizerState.zeros(named), 0, math.inf
    if resume:
        opt, start, best = _restore(model, state_path)
        log(f"Resumed {run_dir} at step {start} (best val MRAE {best:.6f})")

    total = train_cfg.total_steps
    stop = total if max_steps is None else min(total, max_steps)
    sampler = PatchSampler(train_scenes, model_cfg, train_cfg)
    loader = PrefetchLoader(sampler, start, stop, train_cfg.prefetch) if train_cfg.prefetch > 0 else None
    dtype = model.dtype
    val_labels: Dict[str, List[LabelMap]] = {}
    losses: List[float] = []
    last_val = math.nan

    try:
        new_log = not resume or not os.path.exists(log_path)
        with open(log_path, "w" if new_log else "a", newline="") as log_file:
            writer = csv.writer(log_file)
            if new_log:
                writer.writerow(LOG_COLUMNS)
            progress = tqdm(range(start, stop), initial=start, total=stop, desc="Training", disable=not show_progress)
            for step in progress:
                lr = poly_lr(step, total, train_cfg.lr0, train_cfg.decay_power)
                batch = loader.get(step) if loader else sampler.sample(step)

                diagnostics.reset()
                model.zero_grad()
                preds = [model(Tensor(p.rgb, dtype=dtype), p.label_maps) for p in batch]
                targets = [Tensor(p.hsi, dtype=dtype) for p in batch]
                loss = batch_loss(preds, targets, model_cfg.sopc_tau)
                parts = loss.as_floats()
                if not all(math.isfinite(v) for v in parts.values()):
                    info = {"step": step, "lr": lr, **parts, **diagnostics.snapshot()}
                    path = _dump_diagnostics(run_dir, info)
                    log(f"Non-finite loss at step {step}; diagnostics written to {path}", "ERROR")
                    raise NonFiniteLossError(f"non-finite loss at step {step}: {parts}", info)

                loss.total.backward()
                adam_step(params, {n: p.grad for n, p in params.items()}, opt, lr,
                          train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
                losses.append(parts["total"])

                done = step + 1
                epoch = (done - 1) // train_cfg.steps_per_epoch + 1
                val_cell = ""
                if done % train_cfg.steps_per_epoch == 0 or done == stop:
                    if val_scenes:
                        reports = evaluate_scenes(model, val_scenes, train_cfg.psnr_formula, val_labels)
                        last_val = float(np.mean([r.mrae for _, r in reports]))
                        val_cell = repr(last_val)
                    else:
                        last_val = parts["total"]
                    if last_val < best:
                        best = last_val
                        save_model(model, os.path.join(run_dir, "best.ckpt"))
                    save_model(model, os.path.join(run_dir, "last.ckpt"))
                    save_training_state(state_path, {n: p.data for n, p in params.items()}, opt.m, opt.v,
                                        done, epoch, best)
                    log_file.flush()

                writer.writerow([step, epoch, repr(lr), repr(parts["l1"]), repr(parts["sopc"]),
                                 repr(parts["total"]), val_cell])
                progress.set_postfix(lr=f"{lr:.2e}", l1=f"{parts['l1']:.4f}", sopc=f"{parts['sopc']:.4f}",
                                     total=f"{parts['total']:.4f}")
    finally:
        if loader is not None:
            loader.close()

    log(f"Trained {stop - start} steps; best val MRAE {best:.6f}")
    return TrainResult(stop, best, last_val, losses, run_dir)


# ========================================
# Gradient check
# ========================================
@dataclass
class GradCheckEntry:
    parameter: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry]
    excluded: int
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def worst(self) -> Optional[GradCheckEntry]:
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        worst = self.worst
        where = f" at {worst.parameter}[{worst.index}]" if worst else ""
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: max relative error {self.max_rel_error:.3e}{where} over "
                f"{len(self.entries)} entries ({self.excluded} excluded at kinks), tolerance {self.tolerance:g}")


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def grad_check(model_cfg: HPRNConfig, n_params: int = 100, patch: int = 16, tol: float = 1e-4,
               epsilon: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """
    Compare analytic and central-difference gradients of the total loss in 64-bit mode.

    Entries whose perturbation flips the sign pattern of any PReLU or abs input are
    excluded and replaced by a fresh sample. Failures are reported, not raised.
    """
    model = HPRN(model_cfg, np.float64)
    cube = gen_hsi(patch, patch, model_cfg.bands, seed)
    rgb = project_rgb(cube, gen_sensitivity(model_cfg.bands, seed))
    labels = semantic_prior(rgb, model_cfg)
    rgb_t, target = Tensor(rgb, dtype=np.float64), Tensor(cube.values, dtype=np.float64)

    def loss_value() -> Tensor:
        return total_loss(model(rgb_t, labels), target, model_cfg.sopc_tau).total

    model.zero_grad()
    with record_kinks() as base:
        loss_value().backward()
    named = model.named_parameters()
    analytic = {n: p.grad.copy() for n, p in named}
    sizes = np.array([p.numel() for _, p in named])

    rng = np.random.default_rng(seed)
    entries: List[GradCheckEntry] = []
    excluded = 0
    attempts = 0
    while len(entries) < n_params and attempts < 20 * n_params:
        attempts += 1
        which = int(rng.choice(len(named), p=sizes / sizes.sum()))
        name, param = named[which]
        index = int(rng.integers(param.numel()))
        original = param.data.flat[index]
        param.data.flat[index] = original + epsilon
        with record_kinks() as plus:
            loss_plus = loss_value().item()
        param.data.flat[index] = original - epsilon
        with record_kinks() as minus:
            loss_minus = loss_value().item()
        param.data.flat[index] = original
        if not (plus.matches(base) and minus.matches(base)):
            excluded += 1
            continue
        a = float(analytic[name].reshape(-1)[index])
        n = (loss_plus - loss_minus) / (2.0 * epsilon)
        entries.append(GradCheckEntry(name, index, a, n, relative_error(a, n)))

    report = GradCheckReport(entries, excluded, tol)
    log(report.summary(), "INFO" if report.passed else "WARNING")
    return report
