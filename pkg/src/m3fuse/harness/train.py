"""Training loop: one-cycle schedule, scene-parallel gradient
accumulation, per-step loss CSV, and resumable checkpointing.

Scene order, learning rate, and every random draw are pure functions of
(config, step index), so a run resumed from a mid-run checkpoint is
bitwise identical to an uninterrupted one, and the worker count never
changes results (per-scene gradients are summed in batch order).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..losses import LossReport
from ..numerics import Adam, Graph, NumericAbort, load_blocks, save_blocks
from .config import PipelineConfig
from .model import Detector
from .scenes import Scene

LOSS_CSV_HEADER = "step,l_cls,l_reg,l_iou,l_ref,total"


def one_cycle_lr(step: int, total_steps: int, peak: float, warmup_frac: float = 0.3) -> float:
    """Linear warmup from peak/10 to peak, then cosine decay to peak/100."""
    warm = max(1, int(round(warmup_frac * total_steps)))
    if step < warm:
        return peak * (0.1 + 0.9 * (step + 1) / warm)
    t = (step - warm) / max(1, total_steps - warm)
    return peak * (0.01 + 0.99 * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0))))


def epoch_order(seed: int, epoch: int, n_scenes: int) -> np.ndarray:
    rng = np.random.default_rng([seed, epoch, 0x5CE
])
    return rng.permutation(n_scenes)


@dataclass
class TrainResult:
    steps_run: int
    reports: List[LossReport]
    checkpoint_path: Optional[Path]


def _scene_gradients(model: Detector, scene: Scene) -> tuple[Dict[str, np.ndarray], LossReport]:
    """Forward + backward of one scene on its own tape; grads returned by
    name instead of being accumulated (workers stay isolated)."""
    with Graph() as g:
        loss, report, _ = model.loss_scene(scene)
        g.backward(loss)
    grads: Dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        if p.grad is not None:
            grads[name] = p.grad
            p.grad = None
    return grads, report


def run_training(
    cfg: PipelineConfig,
    scenes: Sequence[Scene],
    out_dir,
    max_steps: Optional[int] = None,
    resume_from: Optional[str] = None,
    workers: Optional[int] = None,
    model: Optional[Detector] = None,
    log=None,
) -> TrainResult:
    """Train a detector on the given scenes.

    Writes ``loss.csv`` (one row per optimizer step), a final parameter
    checkpoint ``checkpoint.bin``, and a resumable state pair
    ``state.params.bin`` / ``state.optim.bin``.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = workers if workers is not None else cfg.train_workers

    model = model if model is not None else Detector(cfg)
    adam = Adam(
        model.params,
        lr=cfg.optim_lr_peak,
        beta1=cfg.optim_beta1,
        beta2=cfg.optim_beta2,
        eps=cfg.optim_eps,
        weight_decay=cfg.optim_weight_decay,
    )
    start_step = 0
    if resume_from is not None:
        model.params.load_arrays(load_blocks(f"{resume_from}.params.bin"))
        state = load_blocks(f"{resume_from}.optim.bin")
        adam.load_state_arrays(state)
        start_step = adam.t

    steps_per_epoch = math.ceil(len(scenes) / cfg.train_batch_size)
    total_steps = cfg.train_epochs * steps_per_epoch
    end_step = total_steps if max_steps is None else min(total_steps, max_steps)

    csv_path = out / "loss.csv"
    csv_mode = "a" if (resume_from is not None and csv_path.exists()) else "w"
    reports: List[LossReport] = []
    with open(csv_path, csv_mode) as csv:
        if csv_mode == "w":
            csv.write(LOSS_CSV_HEADER + "\n")
        for step in range(start_step, end_step):
            epoch = step // steps_per_epoch
            bi = step % steps_per_epoch
            order = epoch_order(cfg.seed, epoch, len(scenes))
            batch_ids = order[bi * cfg.train_batch_size : (bi + 1) * cfg.train_batch_size]
            batch = [scenes[i] for i in batch_ids]

            model.params.zero_grads()
            try:
                if workers > 1 and len(batch) > 1:
                    with ThreadPoolExecutor(max_workers=workers) as pool:
                        results = list(pool.map(lambda s: _scene_gradients(model, s), batch))
                else:
                    results = [_scene_gradients(model, s) for s in batch]
            except NumericAbort as e:
                raise NumericAbort(f"step {step}: {e}") from e

            for grads, _ in results:  # fixed batch order keeps sums deterministic
                model.params.accumulate(grads)
            batch_reports = [r for _, r in results]
            mean = LossReport(
                l_cls=float(np.mean([r.l_cls for r in batch_reports])),
                l_reg=float(np.mean([r.l_reg for r in batch_reports])),
                l_iou=float(np.mean([r.l_iou for r in batch_reports])),
                l_ref=float(np.mean([r.l_ref for r in batch_reports])),
                total=float(np.mean([r.total for r in batch_reports])),
                n_positive=int(sum(r.n_positive for r in batch_reports)),
            )
            reports.append(mean)
            csv.write(mean.csv_row(step) + "\n")

            lr = one_cycle_lr(step, total_steps, cfg.optim_lr_peak, cfg.optim_warmup_frac)
            try:
                adam.step(lr=lr)
            except NumericAbort as e:
                raise NumericAbort(f"step {step}: {e}") from e
            if log is not None and (step + 1) % 50 == 0:
                log(f"step {step + 1}/{end_step}  total={mean.total:.4f}")

    ckpt = out / "checkpoint.bin"
    save_blocks(ckpt, model.params.arrays())
    save_blocks(out / "state.params.bin", model.params.arrays())
    save_blocks(out / "state.optim.bin", adam.state_arrays())
    return TrainResult(steps_run=end_step - start_step, reports=reports, checkpoint_path=ckpt)
