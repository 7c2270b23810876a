"""Finite-difference verification of every differentiable op.

Each case builds a scalar function of some float64 input arrays.  Non-scalar
op outputs are contracted with a fixed random projection so every output
element contributes.  The analytic gradient (one reverse sweep) is compared
with central differences per checked entry using

    err = |analytic - numeric| / max(|analytic|, |numeric|, FLOOR)

and the case reports the largest ``err`` over all checked entries.  The floor
keeps entries whose true gradient is zero from turning rounding noise into
huge relative errors.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T

STEP = 1e-6
FLOOR = 1e-6
OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class Case:
    """``build(rng) -> (fn, inputs)``; ``fn(*tensors)`` returns a Tensor."""
    name: str
    build: object
    tolerance: float = OP_TOLERANCE
    max_entries: int = 0          # 0 checks every entry of every input


@dataclass
class CheckResult:
    name: str
    seed: int
    max_error: float
    tolerance: float
    entries: int

    @property
    def passed(self):
        return bool(self.max_error <= self.tolerance)


def _project(out, rng_seed):
    """Scalar ``sum(out * R)`` with ``R`` fixed per case and seed."""
    if out.ndim == 0:
        return out
    r = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return T.sum_(T.mul(out, r))


def check(case, seed=0, step=STEP, floor=FLOOR):
    rng = np.random.default_rng([seed, 0x6C])
    fn, arrays = case.build(rng)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    proj_seed = [seed, 0x9E]

    def scalar(values):
        with T.Tape():
            ts = [T.Tensor(v, requires_grad=False) for v in values]
            return float(_project(fn(*ts), proj_seed).data)

    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = _project(fn(*tensors), proj_seed)
    tape.backward(loss)
    worst, count = 0.0, 0
    pick = np.random.default_rng([seed, 0x51])
    for k, a in enumerate(arrays):
        analytic = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(a)
        flat = np.arange(a.size)
        if case.max_entries and a.size > case.max_entries:
            flat = np.sort(pick.choice(a.size, case.max_entries, replace=False))
        for e in flat:
            idx = np.unravel_index(e, a.shape)
            plus = [v.copy() for v in arrays]
            minus = [v.copy() for v in arrays]
            plus[k][idx] += step
            minus[k][idx] -= step
            numeric = (scalar(plus) - scalar(minus)) / (2.0 * step)
            an = float(analytic[idx])
            err = abs(an - numeric) / max(abs(an), abs(numeric), floor)
            worst = max(worst, err)
            count += 1
    return CheckResult(case.name, seed, worst, case.tolerance, count)


# case construction helpers -----------------------------------------------------

def _away_from(x, points, gap=0.05):
    """Nudge values so none sits within ``gap`` of a kink in ``points``."""
    x = np.array(x)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, gap, -gap) * 2
    return x


def _distinct(rng, shape, spacing=0.05):
    """Values with pairwise gaps >= ``spacing`` (no ties for max-pooling)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def _unary(name, fn, lo=-2.0, hi=2.0, kinks=(), shape=(3, 4)):
    def build(rng):
        x = _away_from(rng.uniform(lo, hi, shape), kinks)
        return fn, [x]
    return Case(name, build)


def _tiny_model_case():
    from .attention import Support
    from .model import Model, ModelConfig
    from .objective import LossConfig, loss, onehot
    from .streams import StreamConfig, act, conv, pool

    def build(rng):
        sa = StreamConfig([conv(3, 3, 1, 1), pool(2), act("tanh")], 8, 1, 4, 3, name="stream_a")
        sb = StreamConfig([conv(2, 3, 1, 1), pool(2), act("tanh")], 8, 1, 4, 2, name="stream_b")
        cfg = ModelConfig(stream_a=sa, stream_b=sb, num_classes=3, hidden=3, layers=2, init_width=4,
                          support=Support("causal_prefix"), dropout=0.0)
        model = Model(cfg, seed=int(rng.integers(1 << 30)))
        images = rng.uniform(0.0, 1.0, (2, 8, 8, 1))
        y = onehot(rng.integers(0, 3, 2), 3)
        names = list(model.store)
        lcfg = LossConfig(lam=1.0, gamma=1e-5)

        def fn(*values):
            for name, v in zip(names, values):
                model.store.replace(name, v)
            out = model.forward(images)
            return loss(out.probs, y, out.maps, model.store, lcfg, grid=model.grid).total

        return fn, [model.store[n].data.copy() for n in names]

    return Case("model", build, tolerance=MODEL_TOLERANCE, max_entries=6)


def _cases():
    from . import attention as A
    from . import objective as O
    from .bilinear import bilinear, normalize_signed_sqrt_l2, sum_pool_baseline

    cases = [
        Case("add", lambda r: (T.add, [r.standard_normal((3, 4)), r.standard_normal((4,))])),
        Case("sub", lambda r: (T.sub, [r.standard_normal((3, 4)), r.standard_normal((3, 1))])),
        Case("mul", lambda r: (T.mul, [r.standard_normal((3, 4)), r.standard_normal((1, 4))])),
        _unary("scale", lambda x: T.scale(x, -1.7)),
        _unary("square", T.square),
        _unary("clamp_min", lambda x: T.clamp_min(x, 0.3), kinks=(0.3,)),
        _unary("log", T.log, lo=0.2, hi=3.0),
        _unary("relu", T.relu, kinks=(0.0,)),
        _unary("tanh", T.tanh),
        _unary("sigmoid", T.sigmoid, lo=-6.0, hi=6.0),
        _unary("sum", lambda x: T.sum_(x, axis=1), shape=(2, 3, 4)),
        _unary("mean", lambda x: T.mean(x, axis=(0, 2)), shape=(2, 3, 4)),
        _unary("reshape", lambda x: T.reshape(x, (4, 6)), shape=(2, 3, 4)),
        _unary("transpose", lambda x: T.transpose(x, (2, 0, 1)), shape=(2, 3, 4)),
        _unary("getitem", lambda x: T.getitem(x, (slice(None), np.array([2, 0, 2]))), shape=(3, 4)),
        Case("concat", lambda r: (lambda a, b: T.concat([a, b], axis=1),
                                  [r.standard_normal((2, 3)), r.standard_normal((2, 2))])),
        Case("stack", lambda r: (lambda a, b: T.stack([a, b], axis=1),
                                 [r.standard_normal((2, 3)), r.standard_normal((2, 3))])),
        Case("matmul", lambda r: (T.matmul, [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))])),
        Case("weighted_sum", lambda r: (T.weighted_sum, [r.standard_normal((2, 5, 3)), r.random((2, 5))])),
        _unary("softmax", lambda x: T.softmax(x, axis=-1), shape=(3, 5)),
        _unary("softmax_masked", lambda x: T.softmax(x, axis=-1, mask=np.array([1, 0, 1, 1, 0], bool)),
               shape=(3, 5)),
        Case("conv2d", lambda r: (lambda x, k: T.conv2d(x, k, stride=2, padding=1),
                                  [r.standard_normal((2, 5, 5, 2)), r.standard_normal((3, 3, 2, 3))])),
        Case("maxpool2d", lambda r: (lambda x: T.maxpool2d(x, 2), [_distinct(r, (2, 4, 4, 2))])),
        _unary("lrn", lambda x: T.lrn(x, 2, 0.1, 0.75, 1.0), shape=(2, 2, 2, 5)),
        Case("dropout", lambda r: (lambda x: T.dropout(x, 0.5, np.random.default_rng(3), True),
                                   [r.standard_normal((3, 4))])),
        _unary("signed_sqrt", T.signed_sqrt, kinks=(0.0,)),
        _unary("l2_normalize", lambda x: T.l2_normalize(x, axis=-1)),
        Case("bilinear", lambda r: (bilinear, [r.standard_normal((2, 2, 2, 3)), r.standard_normal((2, 2, 2, 2))])),
        Case("bilinear_normalize", lambda r: (normalize_signed_sqrt_l2,
                                              [_away_from(r.standard_normal((2, 6)), (0.0,), 0.1)])),
        Case("sum_pool", lambda r: (sum_pool_baseline, [r.standard_normal((2, 3, 3, 4))])),
        Case("attend", lambda r: (A.attend, [r.standard_normal((2, 2, 2, 3)), r.random((2, 4))])),
        Case("nll", lambda r: (lambda p: O.nll(p, O.onehot([0, 2, 1], 3)), [r.uniform(0.1, 1.0, (3, 3))])),
        Case("penalty", lambda r: (lambda m: O.attention_penalty(m, 0.25), [r.random((3, 4))])),
        _lstm_step_case(),
        _location_softmax_case(),
        _sweep_case(),
        _tiny_model_case(),
    ]
    return {c.name: c for c in cases}


def _lstm_step_case():
    from .attention import SpatialLstmLayer, step

    def build(rng):
        store = T.ParameterStore(np.float64)
        layer = SpatialLstmLayer(store, "l", 3, 2, rng)
        names = list(store)

        def fn(x, hl, hu, cl, cu, *ws):
            for n, w in zip(names, ws):
                store.replace(n, w)
            return T.concat(list(step(layer, x, hl, hu, cl, cu)), axis=-1)

        ins = [rng.standard_normal((2, 3))] + [rng.standard_normal((2, 2)) for _ in range(4)]
        return fn, ins + [store[n].data.copy() for n in names]

    return Case("lstm_step", build)


def _location_softmax_case():
    from .attention import AttentionParams, location_softmax

    def build(rng):
        store = T.ParameterStore(np.float64)
        params = AttentionParams(store, "a", 2, 3, rng)
        mask = np.array([True, True, False, True])

        def fn(h, u):
            store.replace("a.U", u)
            return location_softmax(h, params, mask)

        return fn, [rng.standard_normal((2, 3)), store["a.U"].data.copy() * 3]

    return Case("location_softmax", build)


def _sweep_case():
    from .attention import AttentionParams, InitMlp, SpatialLstmLayer, sweep

    def build(rng):
        store = T.ParameterStore(np.float64)
        layers = [SpatialLstmLayer(store, "l1", 4, 3, rng), SpatialLstmLayer(store, "l2", 3, 3, rng)]
        params = AttentionParams(store, "a", 3, 3, rng)
        mlps = InitMlp(store, "i", 4, 3, 4, rng)
        names = list(store)

        def fn(tube, *ws):
            for n, w in zip(names, ws):
                store.replace(n, w)
            res = sweep(tube, layers, params, mlps)
            return T.concat([T.reshape(res.hidden, (res.hidden.shape[0], -1)), res.stacked_maps().reshape(
                res.hidden.shape[0], -1)], axis=1)

        return fn, [rng.standard_normal((2, 3, 3, 4))] + [store[n].data.copy() for n in names]

    return Case("sweep", build, max_entries=8)


_REGISTRY = None


def registry():
    global _REGISTRY
    if _REGISTRY is None:
        _REGISTRY = _cases()
    return dict(_REGISTRY)


def run(names=None, seeds=10, cases=None):
    """Check the named cases (all by default) for seeds ``0..seeds-1``.

    Returns ``{name: [CheckResult per seed]}``; raises ``KeyError`` for an
    unknown op name.
    """
    cases = registry() if cases is None else dict(cases)
    names = list(cases) if names in (None, "all", ["all"]) else list(names)
    unknown = [n for n in names if n not in cases]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}; known: {', '.join(sorted(cases))}")
    return {n: [check(cases[n], s) for s in range(seeds)] for n in names}


def report(results):
    """Table lines ``op  max_rel_error  tolerance  PASS|FAIL`` plus an overall flag."""
    lines = [f"{'op':<20}{'max_rel_error':>16}{'tolerance':>12}  status"]
    ok = True
    for name, rs in results.items():
        worst = max(r.max_error for r in rs)
        passed = all(r.passed for r in rs)
        ok &= passed
        lines.append(f"{name:<20}{worst:>16.3e}{rs[0].tolerance:>12.0e}  {'PASS' if passed else 'FAIL'}")
    return lines, ok
