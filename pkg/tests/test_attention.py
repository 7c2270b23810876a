import numpy as np
import pytest

from spattend import tensor as T
from spattend.attention import (AttentionParams, InitMlp, SpatialLstmLayer, Support, attend, flatten_features,
                                init_states, location_softmax, parse_support, step, sweep)
from spattend.bilinear import sum_pool_baseline
from spattend.errors import ConfigError, DimensionError


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def build(grid, d, hidden, layers=1, width=5, seed=0, biases=True, zero_init_out=False):
    """Random sweep components with non-trivial biases."""
    rng = np.random.default_rng(seed)
    store = T.ParameterStore()
    stack = [SpatialLstmLayer(store, f"l{k}", d if k == 0 else hidden, hidden, rng, biases=biases)
             for k in range(layers)]
    params = AttentionParams(store, "att", grid, hidden, rng)
    params.U.data[:] = rng.standard_normal(params.U.shape)
    mlps = InitMlp(store, "init", d, hidden, width, rng)
    for name in store.names():
        if name.endswith((".b_i", ".b_f_l", ".b_f_r", ".b_o", ".b_c", ".b1", ".b2")):
            store[name].data[:] = 0.3 * rng.standard_normal(store[name].shape)
    if zero_init_out:
        for which in ("c", "h"):
            store[f"init.{which}.W2"].data[:] = 0.0
            store[f"init.{which}.b2"].data[:] = 0.0
    return store, stack, params, mlps


def np_mlp(store, which, x):
    p = f"init.{which}"
    z = np.tanh(x @ store[f"{p}.W1"].data + store[f"{p}.b1"].data)
    return np.tanh(z @ store[f"{p}.W2"].data + store[f"{p}.b2"].data)


def straight_line_sweep(tube, store, prefix="l0"):
    """Untaped single-layer sweep written gate by gate from the recurrence."""
    n, R, C, d = tube.shape
    W = {k.split(".", 1)[1]: v.data for k, v in store.items() if k.startswith(prefix + ".")}
    U = store["att.U"].data
    mean = tube.reshape(n, R * C, d).mean(axis=1)
    c0, h0 = np_mlp(store, "c", mean), np_mlp(store, "h", mean)
    H = h0.shape[1]
    h = np.zeros((n, R, C, H))
    c = np.zeros((n, R, C, H))
    maps = []
    for i in range(R):
        for j in range(C):
            h_prev = h0 if (i, j) == (0, 0) else (h[:, i, j - 1] if j > 0 else h[:, i - 1, C - 1])
            logits = h_prev @ U
            L = np.zeros((n, R, C))
            for b in range(n):
                e = np.exp(logits[b].reshape(R, C)[:i + 1, :j + 1])
                L[b, :i + 1, :j + 1] = e / e.sum()
            maps.append(L.reshape(n, -1))
            x = np.einsum("nuv,nuvd->nd", L, tube)
            hl, cl = (h[:, i, j - 1], c[:, i, j - 1]) if j > 0 else (h0, c0)
            hu, cu = (h[:, i - 1, j], c[:, i - 1, j]) if i > 0 else (h0, c0)
            ig = sigmoid(x @ W["W_xi"] + hl @ W["W_hi_r"] + hu @ W["W_hi_l"] + W["b_i"])
            fl = sigmoid(x @ W["W_xf_l"] + hu @ W["W_hf_l"] + W["b_f_l"])
            fr = sigmoid(x @ W["W_xf_r"] + hl @ W["W_hf_r"] + W["b_f_r"])
            o = sigmoid(x @ W["W_xo"] + hl @ W["W_ho_r"] + hu @ W["W_ho_l"] + W["b_o"])
            g = np.tanh(x @ W["W_xc"] + hl @ W["W_hc_r"] + hu @ W["W_hc_l"] + W["b_c"])
            c[:, i, j] = g * ig + cl * fr + cu * fl
            h[:, i, j] = np.tanh(c[:, i, j] * o)
    return h, maps


def lstm_1d_with_attention(seq, store, prefix="l0"):
    """Plain 1-D LSTM over a sequence, input at step t attended over steps <= t, zero initial state."""
    n, N, d = seq.shape
    W = {k.split(".", 1)[1]: v.data for k, v in store.items() if k.startswith(prefix + ".")}
    U = store["att.U"].data
    H = W["W_xi"].shape[1]
    h = np.zeros((n, H))
    c = np.zeros((n, H))
    out = []
    for t in range(N):
        logits = h @ U[:, :t + 1]
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        x = np.einsum("nt,ntd->nd", a, seq[:, :t + 1])
        i = sigmoid(x @ W["W_xi"] + h @ W["W_hi_r"] + W["b_i"])
        f = sigmoid(x @ W["W_xf_r"] + h @ W["W_hf_r"] + W["b_f_r"])
        o = sigmoid(x @ W["W_xo"] + h @ W["W_ho_r"] + W["b_o"])
        g = np.tanh(x @ W["W_xc"] + h @ W["W_hc_r"] + W["b_c"])
        c = g * i + c * f
        h = np.tanh(c * o)
        out.append(h)
    return np.stack(out, axis=1)


class TestStraightLineOracle:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_3x3_sweep_matches(self, seed):
        rng = np.random.default_rng(100 + seed)
        tube = rng.standard_normal((2, 3, 3, 6))
        store, layers, params, mlps = build(3, 6, 4, seed=seed)
        res = sweep(tube, layers, params, mlps)
        h, maps = straight_line_sweep(tube, store)
        assert np.max(np.abs(res.hidden.data - h)) <= 1e-12
        for got, want in zip(res.maps, maps):
            assert np.max(np.abs(got.data - want)) <= 1e-12

    @pytest.mark.parametrize("n_steps", [1, 4, 7])
    def test_single_row_is_1d_lstm(self, n_steps):
        rng = np.random.default_rng(n_steps)
        seq = rng.standard_normal((3, n_steps, 5))
        store, layers, params, mlps = build((1, n_steps), 5, 4, seed=n_steps, zero_init_out=True)
        res = sweep(seq[:, None], layers, params, mlps)
        want = lstm_1d_with_attention(seq, store)
        assert np.max(np.abs(res.hidden.data[:, 0] - want)) <= 1e-12


class TestLocationSoftmax:
    def test_zero_U_uniform_over_support(self):
        store, _, params, _ = build(3, 2, 3)
        params.U.data[:] = 0.0
        mask = Support().mask(3, 1, 2)
        L = location_softmax(np.ones((1, 3)), params, mask).data[0]
        assert mask.sum() == 6
        np.testing.assert_allclose(L[mask], 1 / 6, atol=1e-15)
        assert np.all(L[~mask] == 0.0)

    def test_first_position_singleton(self):
        _, _, params, _ = build(4, 2, 3)
        L = location_softmax(np.random.default_rng(0).standard_normal((2, 3)), params, Support().mask(4, 0, 0))
        assert np.all(L.data[:, 0] == 1.0) and np.all(L.data[:, 1:] == 0.0)

    def test_full_grid_direct_oracle(self):
        rng = np.random.default_rng(5)
        _, _, params, _ = build(4, 2, 6, seed=5)
        h = rng.standard_normal((3, 6))
        e = np.exp(h @ params.U.data)
        want = e / e.sum(axis=1, keepdims=True)
        got = location_softmax(h, params, Support("full").mask(4, 2, 2)).data
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_window_support(self):
        m = Support("window", 1).mask(4, 2, 2).reshape(4, 4)
        assert m.sum() == 4 and m[1:3, 1:3].all()
        assert str(parse_support("window(1)")) == "window(1)"
        with pytest.raises(ConfigError):
            parse_support("ring(2)")


class TestAttend:
    def test_one_hot_selects_slice(self):
        tube = np.random.default_rng(0).standard_normal((1, 3, 3, 4))
        w = np.zeros((1, 9))
        w[0, 5] = 1.0
        np.testing.assert_array_equal(attend(tube, w).data[0], tube[0, 1, 2])

    def test_uniform_is_scaled_sum_pool(self):
        tube = np.random.default_rng(1).standard_normal((2, 3, 3, 4))
        got = attend(tube, np.full((2, 9), 1 / 9)).data
        np.testing.assert_allclose(got, sum_pool_baseline(tube).data / 9, atol=1e-14)

    def test_brute_force(self):
        rng = np.random.default_rng(2)
        tube = rng.standard_normal((2, 4, 4, 5))
        w = rng.dirichlet(np.ones(16), size=2)
        want = np.zeros((2, 5))
        for b in range(2):
            for u in range(4):
                for v in range(4):
                    want[b] += w[b, u * 4 + v] * tube[b, u, v]
        assert np.max(np.abs(attend(tube, w).data - want)) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            attend(np.zeros((1, 2, 2, 3)), np.zeros((1, 5)))


class TestStep:
    def test_all_zero(self):
        store, (layer,), _, _ = build(2, 3, 4, biases=False)
        for name in store.names("l0."):
            store[name].data[:] = 0.0
        rec = {}
        z = np.zeros((1, 4))
        c, h = step(layer, np.zeros((1, 3)), z, z, z, z, record=rec)
        assert np.all(c.data == 0) and np.all(h.data == 0)
        for gate in ("i", "f_l", "f_r", "o"):
            assert np.all(rec[gate] == 0.5)
        assert np.all(rec["g"] == 0.0)

    def test_half_forget_gates_average_neighbours(self):
        store, (layer,), _, _ = build(2, 3, 4, biases=False)
        for name in store.names("l0."):
            store[name].data[:] = 0.0
        v = np.array([[0.3, -1.2, 2.0, 0.0]])
        c, _ = step(layer, np.ones((1, 3)), np.zeros((1, 4)), np.zeros((1, 4)), v, v)
        np.testing.assert_allclose(c.data, v, atol=1e-15)

    def test_upper_neighbour_uses_l_weights(self):
        # only the f_l path sees c_up, only f_r sees c_left
        store, (layer,), _, _ = build(2, 3, 4)
        rng = np.random.default_rng(0)
        x, hl, hu = rng.standard_normal((1, 3)), rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        rec = {}
        step(layer, x, hl, hu, np.zeros((1, 4)), np.zeros((1, 4)), record=rec)
        W = {k.split(".", 1)[1]: v.data for k, v in store.items() if k.startswith("l0.")}
        np.testing.assert_allclose(rec["f_l"], sigmoid(x @ W["W_xf_l"] + hu @ W["W_hf_l"] + W["b_f_l"]), atol=1e-14)
        np.testing.assert_allclose(rec["f_r"], sigmoid(x @ W["W_xf_r"] + hl @ W["W_hf_r"] + W["b_f_r"]), atol=1e-14)


class TestInitStates:
    def test_identical_locations_give_that_vector(self):
        store, _, _, mlps = build(3, 4, 3)
        b = np.array([0.5, -1.0, 2.0, 0.1])
        c0, h0 = init_states(np.broadcast_to(b, (1, 3, 3, 4)).copy(), mlps)
        np.testing.assert_allclose(h0.data[0], np_mlp(store, "h", b[None])[0], atol=1e-15)
        np.testing.assert_allclose(c0.data[0], np_mlp(store, "c", b[None])[0], atol=1e-15)

    def test_zero_weights_zero_states(self):
        store, _, _, mlps = build(2, 4, 3)
        for name in store.names("init."):
            store[name].data[:] = 0.0
        c0, h0 = init_states(np.zeros((2, 2, 2, 4)), mlps)
        assert np.all(c0.data == 0) and np.all(h0.data == 0)

    def test_dimension_mismatch(self):
        _, _, _, mlps = build(2, 4, 3)
        with pytest.raises(ConfigError):
            init_states(np.zeros((1, 2, 2, 5)), mlps)


class TestSweepProperties:
    def test_singleton_grid(self):
        rng = np.random.default_rng(0)
        tube = rng.standard_normal((2, 1, 1, 3))
        store, layers, params, mlps = build(1, 3, 4)
        res = sweep(tube, layers, params, mlps)
        assert len(res.maps) == 1 and np.all(res.maps[0].data == 1.0)
        c, h = step(layers[0], tube[:, 0, 0], res.h0, res.h0, res.c0, res.c0)
        np.testing.assert_array_equal(res.hidden.data[:, 0, 0], h.data)

    def test_zero_tube_zero_weights(self):
        store, layers, params, mlps = build(3, 4, 3, layers=2, biases=False)
        for name in store.names():
            store[name].data[:] = 0.0
        res = sweep(np.zeros((1, 3, 3, 4)), layers, params, mlps)
        assert np.all(res.hidden.data == 0)
        support = Support()
        for p, m in enumerate(res.maps):
            mask = support.mask(3, p // 3, p % 3)
            np.testing.assert_allclose(m.data[0][mask], 1.0 / mask.sum(), atol=1e-15)

    @pytest.mark.parametrize("mode", ["causal_prefix", "full", "window(1)"])
    def test_maps_sum_to_one_and_respect_support(self, mode):
        rng = np.random.default_rng(1)
        store, layers, params, mlps = build(4, 5, 3, layers=2)
        support = parse_support(mode)
        res = sweep(rng.standard_normal((3, 4, 4, 5)), layers, params, mlps, support)
        assert len(res.maps) == 16
        for p, m in enumerate(res.maps):
            assert np.max(np.abs(m.data.sum(axis=1) - 1.0)) <= 1e-10
            assert np.all(m.data[:, ~support.mask(4, p // 4, p % 4)] == 0.0)

    def test_causality_20_instances(self):
        # boundary states are held fixed (zero init output) since the init reads the whole tube
        for inst in range(20):
            rng = np.random.default_rng(1000 + inst)
            K = int(rng.integers(2, 5))
            store, layers, params, mlps = build(K, 3, 3, seed=inst, zero_init_out=True)
            tube = rng.standard_normal((1, K, K, 3))
            u, v = int(rng.integers(K)), int(rng.integers(K))
            bumped = tube.copy()
            bumped[0, u, v] += rng.standard_normal(3)
            a = sweep(tube, layers, params, mlps).hidden.data[0]
            b = sweep(bumped, layers, params, mlps).hidden.data[0]
            before = u * K + v
            flat_a, flat_b = a.reshape(K * K, -1), b.reshape(K * K, -1)
            np.testing.assert_array_equal(flat_a[:before], flat_b[:before])
            assert not np.array_equal(flat_a[before], flat_b[before])

    def test_order_sensitivity(self):
        rng = np.random.default_rng(2)
        tube = rng.standard_normal((1, 3, 3, 4))
        store, layers, params, mlps = build(3, 4, 3)
        base = flatten_features(sweep(tube, layers, params, mlps).hidden).data
        perm = rng.permutation(9)
        permuted = tube.reshape(1, 9, 4)[:, perm].reshape(1, 3, 3, 4)
        other = flatten_features(sweep(permuted, layers, params, mlps).hidden).data
        assert not np.allclose(base, other)
        np.testing.assert_allclose(sum_pool_baseline(tube).data, sum_pool_baseline(permuted).data, atol=1e-12)

    def test_gate_ranges_and_cell_bound(self):
        rng = np.random.default_rng(3)
        store, layers, params, mlps = build(4, 5, 6, seed=3)
        res = sweep(3.0 * rng.standard_normal((2, 4, 4, 5)), layers, params, mlps, record_gates=True)
        assert len(res.gates) == 16
        for rec in res.gates:
            for gate in ("i", "f_l", "f_r", "o"):
                assert np.all((rec[gate] > 0) & (rec[gate] < 1))
            assert np.all(np.abs(rec["g"]) < 1)
        assert np.all(np.abs(res.hidden.data) < 1)
        # gates below 1 give |c[i,j]| < |g| + |c[i,j-1]| + |c[i-1,j]|, boundaries at |c0|
        c0 = np.abs(res.c0.data)
        bound = {}
        for p, rec in enumerate(res.gates):
            i, j = divmod(p, 4)
            left = bound[(i, j - 1)] if j > 0 else c0
            up = bound[(i - 1, j)] if i > 0 else c0
            bound[(i, j)] = np.abs(rec["g"]) + left + up
            assert np.all(np.isfinite(rec["c"])) and np.all(np.abs(rec["c"]) <= bound[(i, j)])

    def test_layer_chain_mismatch(self):
        store, layers, params, mlps = build(3, 4, 3)
        with pytest.raises(ConfigError):
            sweep(np.zeros((1, 3, 3, 5)), layers, params, mlps)
        with pytest.raises(ConfigError):
            sweep(np.zeros((1, 2, 2, 4)), layers, params, mlps)
        with pytest.raises(ConfigError):
            sweep(np.zeros((1, 3, 3, 4)), [], params, mlps)


class TestFlatten:
    def test_row_major(self):
        g = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        np.testing.assert_array_equal(flatten_features(g).data, [[1, 2, 3, 4]])

    def test_inverse_reshape(self):
        g = np.random.default_rng(0).standard_normal((2, 3, 3, 4))
        np.testing.assert_array_equal(flatten_features(g).data.reshape(g.shape), g)
        assert np.all(flatten_features(np.zeros((1, 2, 2, 3))).data == 0)
