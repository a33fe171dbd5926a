"""Data-regime sweeps: test Dice for several groups over shrinking training sets.

The default settings are sized for a single CPU core: 33x33 images with four
pentominoes each, a depth-2 network and 300 Adam steps per run.  A full
3-seed grid takes about 40 minutes.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as D
from .model import ArchitectureConfig, build
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

REGIMES = (1.0, 0.5, 0.25, 0.125)


@dataclass(frozen=True)
class TrendConfig:
    # 500 images split 8:1:1 gives a 400-image training set
    task: D.SyntheticTaskConfig = field(default_factory=lambda: D.SyntheticTaskConfig(
        image_size=33, shapes_per_image=4, cell_size=2, num_images=500, model_depth=2))
    depth: int = 2
    base_width: int = 8
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30, batches_per_epoch=10, batch_size=16))
    seeds: tuple[int, ...] = (0, 1, 2)
    # (group, regimes) pairs
    runs: tuple = (("p1", REGIMES), ("p4m", REGIMES), ("p4", (1.0,)))


@dataclass
class TrendResult:
    # rows of {"group", "fraction", "seed", "dsc", "best_epoch", "seconds"}
    rows: list[dict] = field(default_factory=list)

    def mean(self, group: str, fraction: float) -> float:
        vals = [r["dsc"] for r in self.rows if r["group"] == group and r["fraction"] == fraction]
        return float(np.mean(vals)) if vals else float("nan")

    def gap(self, fraction: float, a: str = "p4m", b: str = "p1") -> float:
        return self.mean(a, fraction) - self.mean(b, fraction)

    def table(self) -> str:
        """Group x regime grid of mean test DSC (in percent)."""
        groups = list(dict.fromkeys(r["group"] for r in self.rows))
        fracs = sorted({r["fraction"] for r in self.rows}, reverse=True)
        head = "model  " + "".join(f"{_frac_label(f):>8}" for f in fracs)
        lines = [head]
        for g in groups:
            cells = []
            for f in fracs:
                m = self.mean(g, f)
                cells.append(f"{100 * m:8.1f}" if not np.isnan(m) else f"{'-':>8}")
            lines.append(f"{g:<7}" + "".join(cells))
        return "\n".join(lines)


def _frac_label(f: float) -> str:
    return "1" if f == 1 else f"1/{round(1 / f)}"


def run_trend(config: TrendConfig | None = None, progress=None) -> TrendResult:
    """Train every (group, regime, seed) combination and record test DSC.

    The dataset is generated once; seeds change the initialisation, the batch
    order and which images each regime keeps.  ``progress`` is called with each
    finished row.
    """
    config = config or TrendConfig()
    synth = D.generate_synthetic(config.task)
    train_set, val_set, test_set = (synth.split(s) for s in D.SPLITS)
    result = TrendResult()
    for group, fractions in config.runs:
        for fraction in fractions:
            for seed in config.seeds:
                arch = ArchitectureConfig(group=group, depth=config.depth, base_width=config.base_width)
                model = build(arch, seed=seed)
                tc = replace(config.train, seed=seed, data_regime_fraction=fraction)
                t0 = time.perf_counter()
                res = train(model, train_set, val_set, tc)
                row = {"group": group, "fraction": fraction, "seed": seed,
                       "dsc": evaluate(model, test_set)["dsc"], "best_epoch": res.best_epoch,
                       "seconds": time.perf_counter() - t0}
                log.info("%s %s seed %d: dsc %.3f", group, _frac_label(fraction), seed, row["dsc"])
                result.rows.append(row)
                if progress is not None:
                    progress(row)
    return result
