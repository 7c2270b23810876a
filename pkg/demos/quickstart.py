"""Train the desk attention model briefly on synthetic data and render one heatmap.

    python3 demos/quickstart.py [out_dir]

Takes a couple of minutes on a laptop CPU.  Accuracy after so few epochs is
modest; the point is to show the library calls end to end.
"""

import sys

from spattend.config import ExperimentConfig
from spattend.data import generate_synthetic
from spattend.model import Model
from spattend.training import evaluate, train
from spattend.visualize import attention_grids, make_artifact, write_artifact

out = sys.argv[1] if len(sys.argv) > 1 else "runs/quickstart"
cfg = ExperimentConfig.load("configs/desk.cfg", {
    "data.synthetic.n_train": 64, "data.synthetic.n_test": 32,
    "train.phase1_epochs": 1, "train.phase2_epochs": 4, "run.out": out,
})
train_set, test_set = generate_synthetic(cfg.synthetic())
model = Model(cfg.model(), seed=cfg["run.seed"])
result = train(model, train_set, cfg.schedule(), cfg.loss(), cfg.svm(), out_dir=out,
               log_stream=lambda rec: print(rec.tsv()))
metrics = evaluate(model, test_set, result.svm, cfg.loss())
print(f"test accuracy {metrics.accuracy:.3f} (svm {metrics.svm_accuracy:.3f})")

(grid,) = attention_grids(model, test_set.images[0])
art = write_artifact(make_artifact(test_set.images[0], grid, model.grid), out, "test0")
print("heatmap cell", tuple(int(i) for i in art.argmax_cell()), "->", ", ".join(art.paths))
