"""Layerwise and end-to-end equivariance measurement for a built model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from eqdense.groups import elements
from eqdense.layers import transform_feature_map
from eqdense.model import DenseNet, ParamStore


@dataclass
class EquivarianceReport:
    # deviations[layer][element repr] = max |L(T_g x) - Pi_g L(x)|
    deviations: dict = field(default_factory=dict)
    # scales[layer] = max |L(x)|, for relative comparisons
    scales: dict = field(default_factory=dict)

    def max_layerwise(self) -> float:
        vals = [d for name, per in self.deviations.items() if name != "head" for d in per.values()]
        return max(vals, default=0.0)

    def max_end_to_end(self) -> float:
        return max(self.deviations.get("head", {}).values(), default=0.0)

    def max_relative(self) -> float:
        return max((max(per.values()) / max(self.scales[name], 1e-30)
                    for name, per in self.deviations.items()), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for name, per in self.deviations.items():
            worst = max(per.values())
            cells = " ".join(f"{g}={d:.2e}" for g, d in per.items())
            out.append(f"{name}\tmax={worst:.3e}\t{cells}")
        return out


def measure_equivariance(model: DenseNet, store: ParamStore, x: np.ndarray, group: str = "D4",
                         train: bool | None = None) -> EquivarianceReport:
    """Compare every tapped layer on ``T_g x`` with the transformed layer output on ``x``.

    Batch-norm uses batch moments (without touching running state) when
    ``train`` is true, which is the default for a model that has never
    been trained.
    """
    if train is None:
        train = any(s.running_mean is None for s in store.bn.values())
    base: dict = {}
    model(store, x, train=train, update_stats=False, taps=base)
    report = EquivarianceReport({name: {} for name in base},
                                {name: float(np.abs(ref).max()) for name, ref in base.items()})
    for g in elements(group):
        taps: dict = {}
        model(store, transform_feature_map(x, g), train=train, update_stats=False, taps=taps)
        for name, ref in base.items():
            expected = transform_feature_map(ref, g)
            report.deviations[name][repr(g).strip("<>").split()[-1]] = float(
                np.abs(taps[name] - expected).max()
            )
    return report
