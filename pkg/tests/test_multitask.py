import numpy as np
import pytest
from hypothesis import given, strategies as hst
from hypothesis.extra import numpy as hnp

from skillgraft import evalmetrics as em, grafting as gr, multitask as mt, nncore, synthtasks as st
from skillgraft.errors import ConfigError, ShapeError
from skillgraft.nncore import OptimizerConfig


def _collection(world, spec, classes=(2, 3, 2), seeds=(1, 2, 3), k=12):
    tasks = []
    for K, s in zip(classes, seeds):
        task = st.make_task(world, K, seed=s)
        tasks.append(mt.MTTask(task, st.sample_kshot(task, k, "train", 0), st.sample_kshot(task, 32, "test", 0), f"t{s}"))
    return mt.TaskCollection(tuple(tasks), spec)


@pytest.fixture(scope="module")
def setup(small_world, small_spec):
    coll = _collection(small_world, small_spec)
    pre = nncore.init_model(small_spec, 0)
    stacked = mt.stack_models(pre, coll)
    trace = mt.train_mt(stacked, coll, OptimizerConfig(learning_rate=0.2, steps=600, seed=0))
    return coll, pre, stacked, trace


def region(idx, n):
    return gr.GraftRegion(np.asarray(sorted(idx), dtype=np.int64), n)


class TestLayout:
    def test_views_share_body(self, setup):
        coll, pre, stacked, _ = setup
        body = nncore._body_length(coll.spec)
        for t in range(len(coll)):
            view, spec_t = mt.task_view(stacked, coll, t)
            want, _ = nncore.attach_head(pre, coll.spec, coll.tasks[t].task.num_classes, coll.tasks[t].task.output_seed)
            assert view.values.tobytes() == want.values.tobytes()
            assert spec_t.num_classes == coll.tasks[t].task.num_classes
            assert np.array_equal(view.values[:body], pre.values[:body])

    def test_view_region_round_trip(self, setup):
        coll, _, stacked, _ = setup
        body = nncore._body_length(coll.spec)
        r = region([0, 5, body - 1, len(stacked) - 1], len(stacked))
        v = mt.view_region(r, coll, len(coll) - 1)
        assert v.indices[:3].tolist() == [0, 5, body - 1] and len(v) == 4

    def test_collection_validation(self, small_world, small_spec):
        with pytest.raises(ConfigError):
            mt.TaskCollection((), small_spec)
        other = st.make_task(st.make_world(3, 5, 0.1, 0), 2)
        ds = st.sample_kshot(other, 2)
        with pytest.raises(ConfigError):
            mt.TaskCollection((mt.MTTask(other, ds, ds),), small_spec)

    def test_stack_rejects_foreign_body(self, setup):
        coll, *_ = setup
        with pytest.raises(ShapeError):
            mt.stack_models(nncore.init_model(nncore.ModelSpec(8, (5,), 3), 0), coll)


class TestTraining:
    def test_single_task_matches_train(self, small_world, small_spec):
        coll = _collection(small_world, small_spec, classes=(3,), seeds=(4,))
        pre = nncore.init_model(small_spec, 0)
        cfg = OptimizerConfig(learning_rate=0.2, steps=120, seed=3)
        stacked = mt.stack_models(pre, coll)
        out = mt.train_mt(stacked, coll, cfg).params
        view, spec_t = nncore.attach_head(pre, small_spec, 3, 4)
        ref = nncore.train(view, spec_t, coll.tasks[0].train, cfg).final
        assert mt.task_view(out, coll, 0)[0].values.tobytes() == ref.values.tobytes()

    def test_mt_beats_pre(self, setup):
        coll, _, stacked, trace = setup
        for t in range(len(coll)):
            assert mt.task_accuracy(trace.params, coll, t) >= mt.task_accuracy(stacked, coll, t)

    def test_task_sampling_uniform(self, setup):
        coll, _, _, trace = setup
        n, K = trace.task_sequence.size, len(coll)
        p = 1 / K
        assert trace.task_counts.sum() == n
        assert np.all(np.abs(trace.task_counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))

    def test_other_heads_untouched_by_a_task_step(self, small_world, small_spec):
        coll = _collection(small_world, small_spec)
        stacked = mt.stack_models(nncore.init_model(small_spec, 0), coll)
        trace = mt.train_mt(stacked, coll, OptimizerConfig(learning_rate=0.2, steps=1, seed=0))
        moved = np.flatnonzero(trace.params.values != stacked.values)
        t = int(trace.task_sequence[0])
        allowed = set(mt._stacked_index(coll, t).tolist())
        assert set(moved.tolist()) <= allowed

    def test_step_budget(self, setup):
        coll, *_ = setup
        assert mt.default_mt_steps(coll, 16) == sum(nncore.default_steps(t.task.num_classes, 16) for t in coll.tasks)


class TestRegions:
    def test_identical_tasks_identical_regions(self, small_world, small_spec):
        coll = _collection(small_world, small_spec, classes=(3, 3), seeds=(5, 5))
        stacked = mt.stack_models(nncore.init_model(small_spec, 0), coll)
        model = mt.train_mt(stacked, coll, OptimizerConfig(learning_rate=0.2, steps=200)).params
        # frozen heads seeded by the task: both views of the MT model coincide
        regions = mt.per_task_regions(stacked, model, coll, gr.MaskOptConfig(steps=5, sparsity_budget=0.05))
        assert regions[0].same_as(regions[1])
        assert len(regions[0]) == gr.budget_count(0.05, int(nncore.graftable_mask(coll.task_spec(0)).sum()))

    def test_per_task_regions_body_only(self, setup):
        coll, _, stacked, trace = setup
        regions = mt.per_task_regions(stacked, trace.params, coll, gr.MaskOptConfig(steps=5, sparsity_budget=0.05))
        body = nncore._body_length(coll.spec)
        for r in regions:
            assert r.total_params == len(stacked)
            # small_spec has a frozen head, so the region stays inside the shared body
            assert len(r) == 0 or r.indices[-1] < body


class TestOverlap:
    def test_subset_case(self):
        a, b = region([3], 10), region([1, 3, 5, 7], 10)
        o = mt.overlap_matrix([a, b])
        assert o.values[0, 1] == 0.25 and o.values[1, 0] == 1.0
        assert np.all(np.diag(o.values) == 1.0)

    def test_disjoint_and_empty(self):
        o = mt.overlap_matrix([region([0], 5), region([1, 2], 5), region([], 5)])
        off = o.values[~np.eye(3, dtype=bool)]
        assert np.all(off == 0.0) and o.values[2, 2] == 1.0

    @given(hst.lists(hnp.arrays(np.bool_, 30), min_size=1, max_size=5))
    def test_bounds_and_count_identity(self, masks):
        regs = [gr.GraftRegion.from_mask(m) for m in masks]
        o = mt.overlap_matrix(regs)
        assert np.all((o.values >= 0) & (o.values <= 1))
        for i, ri in enumerate(regs):
            for j, rj in enumerate(regs):
                inter = ri.intersection_size(rj)
                assert o.intersections[i, j] == inter
                if len(rj):
                    assert o.values[i, j] * len(rj) == pytest.approx(inter)
                if len(ri) and len(rj):
                    assert o.values[i, j] * len(rj) == pytest.approx(o.values[j, i] * len(ri))

    def test_mismatched(self):
        with pytest.raises(ShapeError):
            mt.overlap_matrix([region([], 3), region([], 4)])


class TestUnion:
    def test_cases(self):
        a, b = region([0, 1], 6), region([3], 6)
        assert mt.union_region([a, b], [0]).same_as(a)
        assert len(mt.union_region([a, b], [0, 1])) == 3
        assert mt.union_region([a, b], [0, 1]).provenance == "union"
        with pytest.raises(ConfigError):
            mt.union_region([a, b], [])

    @given(hst.lists(hnp.arrays(np.bool_, 20), min_size=1, max_size=4))
    def test_size_at_most_sum(self, masks):
        regs = [gr.GraftRegion.from_mask(m) for m in masks]
        assert len(mt.union_region(regs, range(len(regs)))) <= sum(len(r) for r in regs)

    def test_purify_zero_steps_keeps_union(self, setup):
        coll, _, stacked, trace = setup
        u = mt.union_region(mt.per_task_regions(stacked, trace.params, coll, gr.MaskOptConfig(steps=3, sparsity_budget=0.05)), [0, 1])
        assert mt.purify_union(stacked, trace.params, u, coll, [0, 1], steps=0).same_as(u)

    def test_purify_only_edits_group_coordinates(self, setup):
        coll, _, stacked, trace = setup
        u = mt.union_region(mt.per_task_regions(stacked, trace.params, coll, gr.MaskOptConfig(steps=3, sparsity_budget=0.05)), [0, 1])
        p = mt.purify_union(stacked, trace.params, u, coll, [0, 1], steps=5, maskcfg=gr.MaskOptConfig(learning_rate=1e5))
        allowed = set(mt._stacked_index(coll, 0).tolist()) | set(mt._stacked_index(coll, 1).tolist())
        assert set(p.indices.tolist()) <= allowed | set(u.indices.tolist())

    def test_purify_empty_group(self, setup):
        coll, _, stacked, trace = setup
        with pytest.raises(ConfigError):
            mt.purify_union(stacked, trace.params, region([], len(stacked)), coll, [])


class TestTransfer:
    def test_full_and_empty_rows(self, setup):
        coll, _, stacked, trace = setup
        full = mt.full_region(stacked, coll)
        tm = mt.transfer_matrix(stacked, trace.params, [full, region([], len(stacked))], coll)
        live = ~tm.degenerate
        assert np.all(tm.values[0, live] == 1.0)
        assert np.all(tm.values[1, live] == 0.0)
        assert np.all(np.isnan(tm.values[:, tm.degenerate]))

    def test_entry_definition(self, setup):
        coll, _, stacked, trace = setup
        r = gr.movement_region(stacked, trace.params, 0.05)
        tm = mt.transfer_matrix(stacked, trace.params, [r], coll)
        g = gr.graft_compose(stacked, trace.params, r)
        j = int(np.flatnonzero(~tm.degenerate)[0])
        want = em.rel_gain(mt.task_accuracy(g, coll, j), mt.task_accuracy(stacked, coll, j), mt.task_accuracy(trace.params, coll, j))
        assert tm.values[0, j] == want
