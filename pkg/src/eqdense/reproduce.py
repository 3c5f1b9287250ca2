"""Desk-scale comparison of a D4 model with its parameter-matched planar baseline.

Both models get the same training budget on the same synthetic data; the
comparison reports test accuracy and the mean instability score of heat
maps predicted under sub-90 degree rotations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from eqdense.data import DatasetSplit, generate_region
from eqdense.evaluation import metrics, model_heatmap_fn, stability_map
from eqdense.model import PRESETS, DenseNet, ModelConfig, match_baseline_growth, param_count
from eqdense.training import TrainSchedule, images_to_input, predict, run_training, schedule_for


@dataclass
class ArmResult:
    name: str
    params: int
    best_epoch: int
    val_accuracy: float
    test: dict
    instability: float
    seconds: float


def desk_schedule(dataset: DatasetSplit, seed: int) -> TrainSchedule:
    """The desk profile, with the validation subset capped at the split size."""
    base = schedule_for("desk", seed=seed)
    return replace(base, val_size=min(base.val_size, len(dataset.valid)))


def stability_regions(seed: int, n: int = 2, size: int = 352) -> list[np.ndarray]:
    regions = []
    for i in range(n):
        img, _, _ = generate_region(seed * 1000 + i, size, n_lesions=1)
        regions.append(images_to_input(img[None])[0])
    return regions


def train_arm(name: str, config: ModelConfig, dataset: DatasetSplit, schedule: TrainSchedule,
              regions: list[np.ndarray], n_angles: int = 32) -> ArmResult:
    t0 = time.perf_counter()
    model = DenseNet(config)
    store = model.init_params()
    res = run_training(model, store, dataset, schedule)
    best = res.best_store
    val_probs = predict(model, best, dataset.valid.images, schedule.eval_batch_size)
    val_acc = float(((val_probs >= 0.5) == dataset.valid.labels).mean())
    test = metrics(predict(model, best, dataset.test.images, schedule.eval_batch_size), dataset.test.labels)
    fn = model_heatmap_fn(model, best)
    inst = float(np.mean([stability_map(fn, r, n_angles).instability for r in regions]))
    return ArmResult(name, param_count(best), res.best_epoch, val_acc, test, inst,
                     time.perf_counter() - t0)


def desk_comparison(dataset: DatasetSplit, seed: int, equivariant: ModelConfig | None = None,
                    n_angles: int = 32, n_regions: int = 2) -> tuple[ArmResult, ArmResult]:
    """Train the D4 preset and its matched baseline with one seed; returns both arms."""
    eq_cfg = replace(equivariant or PRESETS["desk-p4m"], seed=seed)
    base_cfg = match_baseline_growth(eq_cfg)
    schedule = desk_schedule(dataset, seed)
    regions = stability_regions(seed, n_regions)
    eq = train_arm("d4", eq_cfg, dataset, schedule, regions, n_angles)
    base = train_arm("baseline", base_cfg, dataset, schedule, regions, n_angles)
    return eq, base
