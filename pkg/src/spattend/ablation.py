"""Sum-pooled baseline versus attention model on the synthetic benchmark.

Both models share streams, data, epochs, batch size, early stopping and seeds;
only the pooling path (and, when configured, the step sizes) differ.  Run
seeds are ``base_seed + k``.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import generate_synthetic
from .model import Model
from .training import evaluate, train

MODES = ("baseline", "attention")


def patch_cells(boxes, grid, size):
    """Boolean ``(K, K)`` mask of grid cells overlapped by any ``(top, left, h, w)`` box."""
    mask = np.zeros((grid, grid), dtype=bool)
    for top, left, h, w in boxes:
        r0, r1 = top * grid // size, (top + h - 1) * grid // size
        c0, c1 = left * grid // size, (left + w - 1) * grid // size
        mask[r0:r1 + 1, c0:c1 + 1] = True
    return mask


def localization_ratio(masses, boxes, correct, grid, size):
    """Mean over correctly classified images of (mass on patch cells) / (patch cells / K^2).

    ``masses`` is ``(N, K*K)`` aggregated attention; returns ``nan`` when
    nothing was classified correctly.
    """
    ratios = []
    for m, bx, ok in zip(masses, boxes, correct):
        if not ok:
            continue
        cells = patch_cells(bx, grid, size)
        inside = float(m.reshape(grid, grid)[cells].sum())
        ratios.append(inside / (cells.sum() / (grid * grid)))
    return float(np.mean(ratios)) if ratios else float("nan")


@dataclass
class RunRecord:
    mode: str
    seed: int
    test_accuracy: float
    train_accuracy: float
    svm_accuracy: float
    localization: float = float("nan")
    epochs: int = 0


@dataclass
class AblationResult:
    seeds: list
    runs: list = field(default_factory=list)
    control: list = field(default_factory=list)

    def accuracies(self, mode, control=False):
        return [r.test_accuracy for r in (self.control if control else self.runs) if r.mode == mode]

    def mean(self, mode, control=False):
        acc = self.accuracies(mode, control)
        return float(np.mean(acc)) if acc else float("nan")

    @property
    def gap(self):
        return self.mean("attention") - self.mean("baseline")

    @property
    def localization(self):
        vals = [r.localization for r in self.runs if r.mode == "attention"]
        return float(np.nanmean(vals)) if vals else float("nan")

    def table(self, control=False):
        """TSV: a header line, then one row per model with per-seed accuracies and their mean."""
        runs = self.control if control else self.runs
        seeds = sorted({r.seed for r in runs})
        lines = ["model\t" + "\t".join(f"seed{s}" for s in seeds) + "\tmean"]
        for mode in MODES:
            acc = [r.test_accuracy for s in seeds for r in runs if r.mode == mode and r.seed == s]
            if acc:
                lines.append(mode + "\t" + "\t".join(f"{a:.4f}" for a in acc) + f"\t{np.mean(acc):.4f}")
        return "\n".join(lines) + "\n"

    def summary(self):
        return {
            "seeds": self.seeds,
            "baseline_mean": self.mean("baseline"),
            "attention_mean": self.mean("attention"),
            "gap": self.gap,
            "localization_ratio": self.localization,
            "control_baseline_mean": self.mean("baseline", control=True),
            "control_attention_mean": self.mean("attention", control=True),
            "runs": [r.__dict__ for r in self.runs],
            "control_runs": [r.__dict__ for r in self.control],
        }


def _control_config(cfg):
    return cfg.with_overrides({"data.synthetic.placement": "center", "data.synthetic.clutter": 0.0,
                               "data.synthetic.decoys": 0, "data.synthetic.noise": 0.0})


def _run_one(cfg, mode, seed, data, progress=None):
    overrides = {"model.mode": mode, "run.seed": seed}
    if mode == "baseline":
        for key in ("lr", "head_lr"):
            if cfg[f"baseline.{key}"] is not None:
                overrides[f"train.{key}"] = cfg[f"baseline.{key}"]
    run_cfg = cfg.with_overrides(overrides)
    train_set, test_set = data
    model = Model(run_cfg.model(), seed=seed)
    result = train(model, train_set, run_cfg.schedule(), run_cfg.loss(), run_cfg.svm(),
                   config_hash=run_cfg.hash())
    metrics = evaluate(model, test_set, result.svm, run_cfg.loss())
    rec = RunRecord(mode, seed, metrics.accuracy, result.metrics.accuracy, metrics.svm_accuracy,
                    epochs=len(result.log))
    if mode == "attention":
        correct = metrics.predictions == test_set.labels
        rec.localization = localization_ratio(metrics.masses, test_set.boxes, correct, model.grid,
                                              run_cfg["data.synthetic.image_size"])
    if progress:
        progress(rec)
    return rec


def run_ablation(cfg, seeds=None, control=None, out_dir=None, progress=None):
    """Train both models for every seed; optionally the fixed-centre control too."""
    base = cfg["run.seed"]
    n = cfg["ablate.seeds"] if seeds is None else seeds
    seed_list = [base + k for k in range(n)]
    result = AblationResult(seed_list)
    data = generate_synthetic(cfg.synthetic())
    for s in seed_list:
        for mode in MODES:
            result.runs.append(_run_one(cfg, mode, s, data, progress))
    do_control = cfg["ablate.control"] if control is None else control
    if do_control and cfg["ablate.control_seeds"] > 0:
        ccfg = _control_config(cfg)
        cdata = generate_synthetic(ccfg.synthetic())
        for s in seed_list[:cfg["ablate.control_seeds"]] or [base]:
            for mode in MODES:
                result.control.append(_run_one(ccfg, mode, s, cdata, progress))
    if out_dir:
        write_result(result, out_dir)
    return result


def write_result(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ablation.tsv"), "w") as f:
        f.write(result.table())
    if result.control:
        with open(os.path.join(out_dir, "control.tsv"), "w") as f:
            f.write(result.table(control=True))
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(result.summary(), f, indent=2, sort_keys=True)
