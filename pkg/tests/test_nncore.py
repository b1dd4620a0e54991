import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as hst

from conftest import random_batch
from skillgraft import nncore
from skillgraft.errors import ConfigError, DataError, ShapeError
from skillgraft.nncore import ModelSpec, OptimizerConfig, ParameterVector

ALL_CONFIGS = list(itertools.product(("tanh", "relu"), (False, True), ("frozen_random", "trainable"), (False, True)))


def _spec(act="tanh", ln=False, head="trainable", freeze=False, widths=(5, 4), d=3, K=3):
    return ModelSpec(d, widths, K, act, ln, head, freeze)


def _perturbed(spec, seed, scale=0.3):
    """init_model plus noise so biases, shifts and scales are all non-trivial."""
    p = nncore.init_model(spec, seed)
    rng = np.random.default_rng([seed, 99])
    v = p.values + scale * rng.standard_normal(len(p)) * nncore.graftable_mask(spec)
    return p.with_values(v)


class TestSpecAndLayout:
    def test_rejects_bad_dimensions(self):
        with pytest.raises(ConfigError):
            ModelSpec(0, (4,), 2)
        with pytest.raises(ConfigError):
            ModelSpec(3, (), 2)
        with pytest.raises(ConfigError):
            ModelSpec(3, (4,), 2, activation="gelu")

    def test_segments_tile_vector(self):
        for act, ln, head, fz in ALL_CONFIGS:
            spec = _spec(act, ln, head, fz)
            segs = nncore.segment_table(spec)
            pos = 0
            for s in segs:
                assert s.offset == pos
                pos += s.length
            assert pos == nncore.num_params(spec)

    def test_frozen_head_not_graftable(self):
        spec = _spec(head="frozen_random")
        p = nncore.init_model(spec, 0)
        head = p.segment("head.weight")
        g = nncore.graftable_mask(spec)
        assert not g[head.offset : head.offset + head.length].any()
        assert g[: head.offset].all()

    def test_parameter_vector_rejects_gaps(self):
        spec = _spec()
        segs = nncore.segment_table(spec)
        with pytest.raises(ShapeError):
            ParameterVector(np.zeros(nncore.num_params(spec) + 1), segs)


class TestInit:
    def test_deterministic(self):
        spec = _spec(ln=True)
        a, b = nncore.init_model(spec, 3), nncore.init_model(spec, 3)
        assert a.values.tobytes() == b.values.tobytes()

    def test_layernorm_scales_one_shifts_biases_zero(self):
        spec = _spec(ln=True)
        p = nncore.init_model(spec, 1)
        for s in p.segments:
            v = p.view(s.name)
            if s.kind == "layernorm_scale":
                assert np.all(v == 1.0)
            elif s.kind in ("layernorm_shift", "bias"):
                assert np.all(v == 0.0)

    def test_seeds_differ_tables_equal(self):
        spec = _spec(ln=True)
        a, b = nncore.init_model(spec, 1), nncore.init_model(spec, 2)
        assert a.compatible(b)
        assert not np.array_equal(a.values, b.values)

    def test_fan_in_uniform_bound(self):
        spec = _spec(widths=(50,), d=7)
        w = nncore.init_model(spec, 0).view("layers.0.weight")
        assert np.abs(w).max() <= math.sqrt(3 / 7)

    def test_frozen_head_rows_unit_norm(self):
        spec = _spec(head="frozen_random", K=4)
        p = nncore.init_model(spec, 5)
        rows = p.view("head.weight").reshape(4, -1)
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-12)

    def test_attach_head_keeps_body(self):
        spec = _spec(head="frozen_random", K=8)
        p = _perturbed(spec, 0)
        q, spec3 = nncore.attach_head(p, spec, 3, 11)
        body = nncore._body_length(spec)
        assert np.array_equal(q.values[:body], p.values[:body])
        assert spec3.num_classes == 3 and len(q) == nncore.num_params(spec3)


class TestForward:
    def test_zero_network_uniform(self):
        spec = _spec(head="trainable")
        p = nncore.init_model(spec, 0)
        p = p.with_values(np.zeros(len(p)))
        x = np.random.default_rng(0).standard_normal((5, 3))
        logits = nncore.forward(p, spec, x)
        assert np.all(logits == 0.0)
        np.testing.assert_allclose(nncore.softmax(logits), 1 / 3)

    def test_batch_permutation(self):
        spec = _spec(ln=True)
        p = _perturbed(spec, 2)
        x = np.random.default_rng(1).standard_normal((9, 3))
        perm = np.random.default_rng(2).permutation(9)
        np.testing.assert_array_equal(nncore.forward(p, spec, x)[perm], nncore.forward(p, spec, x[perm]))

    def test_hand_evaluated_two_by_two(self):
        spec = ModelSpec(2, (2,), 2, "tanh", False, "trainable")
        p = nncore.init_model(spec, 0)
        p.view("layers.0.weight")[:] = [1.0, -2.0, 0.5, 0.25]
        p.view("layers.0.bias")[:] = [0.1, -0.3]
        p.view("head.weight")[:] = [2.0, 0.0, -1.0, 3.0]
        p.view("head.bias")[:] = [0.5, -0.5]
        x = np.array([[0.3, -0.7]])
        h1 = math.tanh(1.0 * 0.3 - 2.0 * -0.7 + 0.1)
        h2 = math.tanh(0.5 * 0.3 + 0.25 * -0.7 - 0.3)
        want = [2.0 * h1 + 0.5, -1.0 * h1 + 3.0 * h2 - 0.5]
        np.testing.assert_allclose(nncore.forward(p, spec, x)[0], want, rtol=0, atol=1e-15)

    def test_shape_errors(self):
        spec = _spec()
        p = nncore.init_model(spec, 0)
        with pytest.raises(ShapeError):
            nncore.forward(p, spec, np.zeros((2, 4)))
        with pytest.raises(ShapeError):
            nncore.forward(p, _spec(K=2), np.zeros((2, 3)))


class TestLossAndGrad:
    def test_uniform_logits_loss_ln_k(self):
        spec = _spec(head="trainable", K=4)
        p = nncore.init_model(spec, 0).with_values(np.zeros(nncore.num_params(spec)))
        x, y = random_batch(spec, 10, 0)
        loss, _ = nncore.loss_and_grad(p, spec, x, y)
        assert loss == pytest.approx(math.log(4), abs=1e-15)

    def test_l1_zero_ignores_anchor(self):
        spec = _spec()
        p = _perturbed(spec, 0)
        x, y = random_batch(spec, 6, 1)
        a0 = nncore.loss_and_grad(p, spec, x, y, None, 0.0)
        a1 = nncore.loss_and_grad(p, spec, x, y, _perturbed(spec, 5), 0.0)
        assert a0[0] == a1[0] and np.array_equal(a0[1], a1[1])

    def test_l1_penalty_value(self):
        spec = _spec()
        p, anchor = _perturbed(spec, 0), _perturbed(spec, 1)
        x, y = random_batch(spec, 6, 1)
        base, _ = nncore.loss_and_grad(p, spec, x, y)
        pen, _ = nncore.loss_and_grad(p, spec, x, y, anchor, 0.01)
        live = nncore.graftable_mask(spec)
        assert pen - base == pytest.approx(0.01 * np.abs(p.values - anchor.values)[live].sum(), rel=1e-12)

    def test_label_out_of_range(self):
        spec = _spec()
        p = nncore.init_model(spec, 0)
        with pytest.raises(DataError):
            nncore.loss_and_grad(p, spec, np.zeros((1, 3)), [3])

    def test_frozen_segments_zero_grad(self):
        spec = _spec(head="frozen_random", freeze=True)
        p = _perturbed(spec, 0)
        x, y = random_batch(spec, 7, 2)
        _, g = nncore.loss_and_grad(p, spec, x, y)
        assert np.all(g[nncore.frozen_mask(spec)] == 0.0)

    @pytest.mark.parametrize("act,ln,head,fz", ALL_CONFIGS)
    def test_finite_differences_every_config(self, act, ln, head, fz):
        spec = _spec(act, ln, head, fz, widths=(6, 5), d=4)
        for inst in range(3):
            p = _perturbed(spec, inst)
            x, y = random_batch(spec, 5, 10 + inst)
            idx = range(len(p))
            assert nncore.finite_diff_check(p, spec, (x, y), idx, h=1e-5) < 1e-4

    def test_finite_differences_three_layer_tanh(self):
        spec = ModelSpec(5, (8, 8, 8), 3, "tanh", True, "frozen_random")
        p = _perturbed(spec, 3)
        x, y = random_batch(spec, 8, 3)
        idx = np.random.default_rng(0).choice(np.flatnonzero(nncore.graftable_mask(spec)), 64, replace=False)
        assert nncore.finite_diff_check(p, spec, (x, y), idx) < 1e-6

    def test_finite_differences_head_only(self):
        spec = ModelSpec(3, (4,), 3, "tanh", False, "trainable", freeze_first_layer=True)
        p = _perturbed(spec, 0)
        x, y = random_batch(spec, 6, 0)
        head = [i for s in p.segments if s.kind == "head" for i in range(s.offset, s.offset + s.length)]
        assert nncore.finite_diff_check(p, spec, (x, y), head) < 1e-7

    def test_finite_differences_with_l1(self):
        spec = _spec(ln=True)
        p, anchor = _perturbed(spec, 0), _perturbed(spec, 1)
        x, y = random_batch(spec, 5, 0)
        assert nncore.finite_diff_check(p, spec, (x, y), range(len(p)), 1e-5, anchor, 0.01) < 1e-6

    def test_zero_step_rejected(self):
        spec = _spec()
        p = nncore.init_model(spec, 0)
        with pytest.raises(ConfigError):
            nncore.finite_diff_check(p, spec, random_batch(spec, 2, 0), [0], h=0.0)

    def test_fisher_squared_grad_matches_explicit_loop(self):
        spec = _spec(ln=True)
        p = _perturbed(spec, 0)
        x, y = random_batch(spec, 6, 4)
        want = np.zeros(len(p))
        for i in range(6):
            _, g = nncore.loss_and_grad(p, spec, x[i : i + 1], y[i : i + 1])
            want += g * g
        np.testing.assert_allclose(nncore.per_sample_squared_grad(p, spec, x, y), want / 6, rtol=1e-12, atol=1e-300)


def _adamw_reference(theta, grads, lr, b1, b2, eps, wd):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * (mhat / (np.sqrt(vhat) + eps) + wd * theta)
    return theta


class TestOptimizer:
    def _pv(self, values):
        spec = ModelSpec(1, (1,), 1, head_mode="trainable")
        n = nncore.num_params(spec)
        return spec, nncore.init_model(spec, 0).with_values(np.resize(np.asarray(values, float), n))

    def test_sgd_zero_grad_fixed_point(self):
        _, p = self._pv([1.0, 2.0])
        cfg = OptimizerConfig(learning_rate=0.3, weight_decay=0.0)
        q, _ = nncore.optimizer_step(nncore.init_state(cfg, len(p)), p, np.zeros(len(p)), cfg)
        assert np.array_equal(q.values, p.values)

    def test_sgd_direct_substitution(self):
        _, p = self._pv([1.0])
        cfg = OptimizerConfig(learning_rate=0.1, weight_decay=0.0)
        q, _ = nncore.optimizer_step(nncore.init_state(cfg, len(p)), p, np.full(len(p), 0.5), cfg)
        np.testing.assert_allclose(q.values, 0.95, rtol=0, atol=1e-15)

    def test_sgd_weight_decay(self):
        _, p = self._pv([2.0])
        cfg = OptimizerConfig(learning_rate=0.1, weight_decay=0.5)
        q, _ = nncore.optimizer_step(nncore.init_state(cfg, len(p)), p, np.full(len(p), 1.0), cfg)
        np.testing.assert_allclose(q.values, 2.0 - 0.1 * (1.0 + 0.5 * 2.0), atol=1e-15)

    def test_adamw_matches_reference(self):
        rng = np.random.default_rng(0)
        _, p = self._pv(rng.standard_normal(8))
        cfg = OptimizerConfig("adamw", learning_rate=0.01, weight_decay=0.1)
        grads = [rng.standard_normal(len(p)) for _ in range(5)]
        state = nncore.init_state(cfg, len(p))
        q = p
        for g in grads:
            q, state = nncore.optimizer_step(state, q, g, cfg)
        want = _adamw_reference(p.values, grads, 0.01, 0.9, 0.999, 1e-8, 0.1)
        np.testing.assert_allclose(q.values, want, rtol=1e-13, atol=1e-15)

    def test_adamw_first_step_is_sign(self):
        _, p = self._pv([0.0])
        cfg = OptimizerConfig("adamw", learning_rate=0.01, weight_decay=0.0)
        g = np.linspace(-2, 2, len(p)) + 0.1
        q, _ = nncore.optimizer_step(nncore.init_state(cfg, len(p)), p, g, cfg)
        np.testing.assert_allclose(q.values, -0.01 * np.sign(g) / (1 + 1e-8 / np.abs(g)), rtol=1e-12)

    def test_trainable_mask_respected(self):
        _, p = self._pv(np.arange(4.0))
        cfg = OptimizerConfig("adamw", learning_rate=0.1)
        mask = np.zeros(len(p), dtype=bool)
        mask[0] = True
        q, st_ = nncore.optimizer_step(nncore.init_state(cfg, len(p)), p, np.ones(len(p)), cfg, trainable=mask)
        assert np.array_equal(q.values[1:], p.values[1:]) and q.values[0] != p.values[0]
        assert np.all(st_.m[1:] == 0.0)

    def test_state_mismatch(self):
        _, p = self._pv([0.0])
        with pytest.raises(ConfigError):
            nncore.optimizer_step(nncore.init_state(OptimizerConfig(), len(p)), p, np.zeros(len(p)), OptimizerConfig("adamw"))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            OptimizerConfig(batch_size=0)
        with pytest.raises(ConfigError):
            OptimizerConfig(adam_beta1=1.0)

    def test_default_steps(self):
        assert nncore.default_steps(3, 16) == 768
        assert nncore.default_steps(2, 4096) == 16 * 2 * 512


class TestBatchStream:
    @given(hst.integers(1, 40), hst.integers(1, 17), hst.integers(0, 2**31))
    def test_each_epoch_is_a_permutation(self, n, bs, seed):
        s = nncore.BatchStream(n, bs, seed)
        drawn = np.concatenate([s.next() for _ in range(3 * n)])
        if bs >= n:
            assert all(np.array_equal(np.sort(drawn[i * n : (i + 1) * n]), np.arange(n)) for i in range(3))
        else:
            full = drawn[: (len(drawn) // n) * n].reshape(-1, n)
            for row in full:
                assert np.array_equal(np.sort(row), np.arange(n))

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            nncore.BatchStream(0, 4, 0)


class TestTrain:
    def _data(self, spec, n=40, seed=0):
        from skillgraft.synthtasks import Dataset

        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, spec.input_dim))
        y = (x[:, 0] > 0).astype(int)
        return Dataset(x, y, n // 2, "train")

    def test_zero_steps(self):
        spec = _spec(K=2)
        p = nncore.init_model(spec, 0)
        traj = nncore.train(p, spec, self._data(spec), OptimizerConfig(steps=0))
        assert traj.final is p and [s for s, _ in traj.checkpoints] == [0]

    def test_deterministic(self):
        spec = _spec(K=2, ln=True)
        p = nncore.init_model(spec, 0)
        cfg = OptimizerConfig(learning_rate=0.1, steps=50, seed=4)
        a = nncore.train(p, spec, self._data(spec), cfg).final
        b = nncore.train(p, spec, self._data(spec), cfg).final
        assert a.values.tobytes() == b.values.tobytes()

    def test_checkpoints_and_final(self):
        spec = _spec(K=2)
        p = nncore.init_model(spec, 0)
        traj = nncore.train(p, spec, self._data(spec), OptimizerConfig(steps=25), checkpoint_every=10)
        assert [s for s, _ in traj.checkpoints] == [0, 10, 20, 25]
        assert traj.checkpoints[-1][1] is traj.final

    def test_empty_dataset(self):
        from skillgraft.synthtasks import Dataset

        spec = _spec(K=2)
        with pytest.raises(DataError):
            nncore.train(nncore.init_model(spec, 0), spec, Dataset(np.zeros((0, 3)), np.zeros(0, int), 0, "train"), OptimizerConfig(steps=1))

    def test_loss_eventually_non_increasing(self):
        spec = _spec(K=2)
        traj = nncore.train(nncore.init_model(spec, 0), spec, self._data(spec), OptimizerConfig(learning_rate=0.2, batch_size=40, steps=1000))
        windows = traj.losses.reshape(-1, 100).mean(axis=1)
        assert np.all(np.diff(windows[3:]) <= 1e-12)

    def test_frozen_segments_conserved(self):
        spec = _spec(K=2, freeze=True, head="frozen_random", ln=True)
        p = nncore.init_model(spec, 0)
        final = nncore.train(p, spec, self._data(spec), OptimizerConfig("adamw", learning_rate=0.05, steps=60, weight_decay=0.1)).final
        fz = nncore.frozen_mask(spec)
        assert np.array_equal(final.values[fz], p.values[fz])
        assert not np.array_equal(final.values[~fz], p.values[~fz])

    def test_l1_anchor_monotone_in_strength(self):
        spec = _spec(K=2, ln=True)
        p = nncore.init_model(spec, 0)
        moves = []
        for lam in (0.0, 1e-3, 1e-2):
            cfg = OptimizerConfig(learning_rate=0.1, steps=150, weight_decay=0.0, l1_anchor_strength=lam)
            moves.append(np.abs(nncore.train(p, spec, self._data(spec), cfg).final.values - p.values).sum())
        assert moves[0] >= moves[1] >= moves[2]
