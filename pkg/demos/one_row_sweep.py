"""A 1 x N grid makes the spatial sweep an ordinary left-to-right LSTM.

With a single row the "up" neighbour is always the boundary state, so the
cell reduces to a 1-D LSTM fed by attended input.  The printed maps show
the causal-prefix support growing by one cell per step; the test suite
checks the hidden states against a plain 1-D LSTM to 1e-12.

    python3 demos/one_row_sweep.py
"""

import numpy as np

from spattend.attention import AttentionParams, InitMlp, SpatialLstmLayer, Support, sweep
from spattend.tensor import ParameterStore

N, D, H = 5, 3, 4
rng = np.random.default_rng(0)
store = ParameterStore()
layer = SpatialLstmLayer(store, "l0", D, H, rng)
params = AttentionParams(store, "att", (1, N), H, rng)
mlps = InitMlp(store, "init", D, H, 5, rng)
seq = rng.standard_normal((1, 1, N, D))

out = sweep(seq, [layer], params, mlps, Support("causal_prefix"))
np.set_printoptions(precision=4, suppress=True)
print("hidden states along the row:\n", out.hidden.data[0, 0])
print("attention maps (rows are steps, columns are cells):\n", np.stack([m.data[0] for m in out.maps]))
