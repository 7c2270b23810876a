import numpy as np
import pytest

from spattend.data import SyntheticSpec, generate_synthetic
from spattend.model import Model, ModelConfig
from spattend.streams import StreamConfig, act, conv, pool


def tiny_config(mode="attention", classes=2, **kw):
    """16px input, 4x4 grids, hidden 4: fast enough for many training runs per test."""
    sa = StreamConfig([conv(3, 3, 1, 1), pool(2), act("relu"), conv(4, 3, 1, 1), pool(2), act("relu")],
                      16, 1, 4, 4, name="stream_a")
    sb = StreamConfig([conv(2, 3, 1, 1), pool(2), act("relu"), conv(3, 3, 1, 1), pool(2), act("tanh")],
                      16, 1, 4, 3, name="stream_b")
    base = dict(stream_a=sa, stream_b=sb, mode=mode, num_classes=classes, hidden=4, layers=1, init_width=4)
    base.update(kw)
    return ModelConfig(**base)


def tiny_data(classes=2, n_train=16, n_test=16, seed=0):
    return generate_synthetic(SyntheticSpec(image_size=16, patch_size=4, num_classes=classes, n_train=n_train,
                                            n_test=n_test, seed=seed))


@pytest.fixture
def tiny_model():
    return Model(tiny_config(), seed=0)


@pytest.fixture
def tiny_sets():
    return tiny_data()


def assert_stores_equal(a, b):
    assert a.names() == b.names()
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)


TINY_CFG = """\
# 16px synthetic images, 4x4 grids: a CLI-sized experiment that runs in seconds
run.seed = 0
model.classes = 2
model.hidden = 4
model.layers = 1
model.init_width = 4
stream_a.preset = custom
stream_a.layers = conv(3,3,1,1) pool(2,2) relu conv(4,3,1,1) pool(2,2) relu
stream_a.input_size = 16
stream_b.preset = custom
stream_b.layers = conv(2,3,1,1) pool(2,2) relu conv(3,3,1,1) pool(2,2) tanh
stream_b.input_size = 16
data.synthetic.image_size = 16
data.synthetic.patch_size = 4
data.synthetic.classes = 2
data.synthetic.n_train = 16
data.synthetic.n_test = 8
train.phase1_epochs = 1
train.phase2_epochs = 2
train.batch_size = 8
train.val_fraction = 0
train.lr = 0.01
"""


@pytest.fixture
def tiny_cfg_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


# acceptance criteria report one line each; collected here and echoed in the terminal summary
ACCEPTANCE_LINES = []


def report_criterion(number, title, passed, detail):
    line = f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
