"""Pruning strategies: schedule arithmetic, state machines, seeded runs."""

import math

import numpy as np
import pytest

from prunekit import criteria as C
from prunekit import graph as G
from prunekit import models
from prunekit import strategies as S
from prunekit.datasets import ReidSpec, gen_target_reid_dataset, probe_from
from prunekit.reid import eval_cmc_map
from prunekit.training import Trainer, embed_dataset


@pytest.fixture(scope="module")
def small_data():
    return gen_target_reid_dataset(ReidSpec(identities=8, test_identities=4,
                                            samples_per_identity_per_camera=3,
                                            prototype_dim=4, seed=1))


def small_trainer(**kw):
    args = dict(loss="batch_hard", lr=0.03, batch_size=16, pk_p=4, pk_k=3, seed=5)
    args.update(kw)
    return Trainer(**args)


def reid_eval(data):
    def eval_fn(graph):
        split = data.split_embeddings(lambda imgs: embed_dataset(graph, imgs))
        rep = eval_cmc_map(split, max_rank=4)
        return {"rank1": rep.rank1, "map": rep.map}
    return eval_fn


class TestScheduleArithmetic:
    def test_iteration_count(self):
        sched = S.PruneSchedule(0.05, 1, 4, 0.5)
        assert sched.n_iterations() == math.ceil(0.5 / 0.05) == 10

    def test_fraction_equal_target_is_one_step(self):
        assert S.PruneSchedule(0.5, 1, 4, 0.5).n_iterations() == 1

    def test_plan_matches_hand_computation(self):
        sched = S.PruneSchedule(0.05, 1, 4, 0.5)
        plan = S.iteration_plan({"a": 16, "b": 32}, sched)
        assert len(plan) == 10
        cum_a = np.cumsum([step["a"] for step in plan])
        cum_b = np.cumsum([step["b"] for step in plan])
        for i in range(10):
            frac = min((i + 1) * 0.05, 0.5)
            assert cum_a[i] == math.floor(frac * 16)
            assert cum_b[i] == math.floor(frac * 32)
        assert cum_a[-1] == 8 and cum_b[-1] == 16

    def test_never_empties_a_space(self):
        sched = S.PruneSchedule(0.9, 1, 0, 0.9)
        plan = S.iteration_plan({"tiny": 2}, sched)
        assert sum(step["tiny"] for step in plan) <= 1

    def test_invalid_schedules_rejected(self):
        with pytest.raises(ValueError):
            S.PruneSchedule(fraction_per_iteration=0.0)
        with pytest.raises(ValueError):
            S.PruneSchedule(target_compression=1.0)
        with pytest.raises(ValueError):
            S.PruneSchedule(scope="layerwise")


class TestSelection:
    def test_ties_break_to_lower_channel_index(self):
        g = models.build_toy("toy_small", seed=0)
        for nid in g.conv_ids():
            w = g.nodes[nid].params["weight"]
            w.data = np.ones_like(w.data)
        scores = C.score_lp_norm(g, p=1)
        sched = S.PruneSchedule(0.25, 1, 0, 0.25)
        groups = [x for x in G.coupled_channel_groups(g) if x.prunable]
        sizes = {k: len(v) for k, v in G.group_spaces(groups).items()}
        total = sum(len(x.members) for x in groups)
        sel = S.select_groups_by_rank(g, scores, sched, 1, sizes, total)
        for space_key, gs in G.group_spaces(sel).items():
            chans = sorted(c for x in gs for nid, c in x.members if nid == space_key[0])
            # with all-equal scores the lowest indices go first
            assert chans == list(range(math.floor(0.25 * sizes[space_key])))

    def test_global_scope_budget(self):
        g = models.build_toy("toy_small", seed=3)
        scores = C.score_lp_norm(g, p=2)
        sched = S.PruneSchedule(0.2, 1, 0, 0.2, scope="global")
        groups = [x for x in G.coupled_channel_groups(g) if x.prunable]
        sizes = {k: len(v) for k, v in G.group_spaces(groups).items()}
        total = sum(len(x.members) for x in groups)
        sel = S.select_groups_by_rank(g, scores, sched, 1, sizes, total)
        removed = sum(len(x.members) for x in sel)
        assert removed <= math.floor(0.2 * total)
        assert removed >= math.floor(0.2 * total) - 3  # group granularity slack


class TestOneStep:
    def test_zero_target_keeps_graph_and_weights(self, small_data):
        toy = models.build_toy("toy_small", seed=2)
        before = {nid: {k: p.data.copy() for k, p in toy.nodes[nid].params.items()}
                  for nid in toy.order}
        pruner = S.OneStepPruner(C.WeightNormCriterion(1),
                                 S.PruneSchedule(0.05, 1, 4, 0.0), small_trainer())
        pruner.fit(toy, small_data)
        for nid in toy.order:
            for k, arr in before[nid].items():
                assert np.array_equal(arr, pruner.graph_.nodes[nid].params[k].data)

    def test_half_target_flops_bound(self, small_data):
        toy = models.build_toy("toy", seed=2)
        pruner = S.OneStepPruner(C.WeightNormCriterion(1),
                                 S.PruneSchedule(0.5, 1, 0, 0.5), None)
        pruner.fit(toy, small_data)
        flops = [r["flops"] for r in pruner.report_]
        assert flops[1] <= 0.55 * flops[0]

    def test_dead_channel_selection_preserves_function(self, small_data, rng):
        toy = models.build_toy("toy_small", seed=2)
        # zeroize the exact channels the l1 ranking will select
        mask = G.PruneMask.all_keep(toy)
        groups = [x for x in G.coupled_channel_groups(toy) if x.prunable]
        for key, gs in G.group_spaces(groups).items():
            for x in sorted(gs, key=lambda x: x.members)[:max(1, len(gs) // 4)]:
                for nid, c in x.members:
                    mask.keep[nid][c] = False
        zeroed = G.soft_prune_apply(toy, mask)
        frac = 0.25
        pruner = S.OneStepPruner(C.WeightNormCriterion(1),
                                 S.PruneSchedule(frac, 1, 0, frac), None)
        pruner.fit(zeroed, small_data)
        x = rng.normal(size=(3, 3, 16, 8)).astype(np.float32)
        assert np.max(np.abs(zeroed.embed(x) - pruner.graph_.embed(x))) <= 1e-6


class TestIterative:
    def test_schedule_runs_exact_iterations_and_flops_decrease(self, small_data):
        toy = models.build_toy("toy", seed=4)
        pruner = S.IterativePruner(C.WeightNormCriterion(1),
                                   S.PruneSchedule(0.05, 1, 1, 0.5), small_trainer())
        pruner.fit(toy, small_data)
        stages = [r["stage"] for r in pruner.report_]
        assert stages[0] == "baseline" and len(stages) == 11
        flops = [r["flops"] for r in pruner.report_]
        assert all(b < a for a, b in zip(flops, flops[1:]))

    def test_fraction_equal_target_matches_one_step_structure(self, small_data):
        toy = models.build_toy("toy_small", seed=4)
        iterative = S.IterativePruner(C.WeightNormCriterion(1),
                                      S.PruneSchedule(0.5, 1, 0, 0.5), None)
        iterative.fit(toy, small_data)
        one = S.OneStepPruner(C.WeightNormCriterion(1),
                              S.PruneSchedule(0.5, 1, 0, 0.5), None)
        one.fit(toy, small_data)
        for nid in toy.conv_ids():
            assert iterative.graph_.nodes[nid].attrs == one.graph_.nodes[nid].attrs
            assert np.array_equal(iterative.graph_.nodes[nid].params["weight"].data,
                                  one.graph_.nodes[nid].params["weight"].data)

    def test_final_channel_counts_match_plan(self, small_data):
        toy = models.build_toy("toy", seed=4)
        sched = S.PruneSchedule(0.05, 1, 0, 0.5)
        pruner = S.IterativePruner(C.WeightNormCriterion(1), sched, None)
        pruner.fit(toy, small_data)
        got = pruner.graph_
        assert got.nodes["stem"].attrs["out_channels"] == 16 - 8
        for nid in ("down", "block1.conv1", "block1.conv2", "block2.conv1", "block2.conv2"):
            assert got.nodes[nid].attrs["out_channels"] == 32 - 16


class TestAutoBalanced:
    def test_alpha_zero_matches_plain_training_bitwise(self, small_data):
        a = models.build_toy("toy_small", seed=6)
        b = a.copy()
        trainer = small_trainer()
        state = S.AutoBalancedState(alpha=0.0)
        remain = {nid: max(1, a.nodes[nid].attrs["out_channels"] // 2)
                  for nid in a.conv_ids()}
        state.refresh(a, remain)
        rng_a = np.random.default_rng(9)
        rng_b = np.random.default_rng(9)
        for images, labels in trainer._epoch_batches(small_data, rng_a):
            S.autobalanced_train_step(a, state, images, labels, trainer)
        trainer.train(b, small_data, 1, rng=rng_b)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.data, pb.data), pa.name

    def test_penalty_gradient_matches_hand_derivative(self):
        g = models.graph_from_layer_dicts(
            [{"id": "c", "kind": "conv", "out_channels": 2, "in_channels": 1,
              "kernel": 1, "stride": 1, "pad": 0}], 1, seed=3)
        w = g.nodes["c"].params["weight"]
        w.data = np.array([[[[0.5]]], [[[2.0]]]], dtype=np.float32)
        w.grad = np.zeros_like(w.data)
        alpha = 0.1
        state = S.AutoBalancedState(alpha=alpha)
        state.partition = {"c": np.array([True, False])}
        state.lambdas = {"c": np.array([1.5, -2.0])}
        value = state.apply_penalty(g)
        s_p = 1.5 * 0.5 ** 2
        s_r = -2.0 * 2.0 ** 2
        tau = -alpha * s_p / s_r
        assert value == pytest.approx(alpha * s_p + tau * s_r, abs=1e-9)
        assert value == pytest.approx(0.0, abs=1e-9)  # tau is built to cancel it
        want = np.array([2 * alpha * 1.5 * 0.5, 2 * tau * -2.0 * 2.0])
        assert np.allclose(w.grad.ravel(), want, atol=1e-7)

    def test_all_remain_with_zero_prune_mass_skips_penalty(self):
        g = models.graph_from_layer_dicts(
            [{"id": "c", "kind": "conv", "out_channels": 2, "in_channels": 1,
              "kernel": 1, "stride": 1, "pad": 0}], 1, seed=3)
        w = g.nodes["c"].params["weight"]
        w.data = np.zeros_like(w.data)
        w.grad = np.zeros_like(w.data)
        state = S.AutoBalancedState(alpha=0.5)
        state.partition = {"c": np.array([True, False])}
        state.lambdas = {"c": np.array([1.0, -1.0])}
        assert state.apply_penalty(g) == 0.0
        assert state.penalty_skipped

    def test_training_separates_prune_and_remain_mass(self, small_data):
        toy = models.build_toy("toy_small", seed=6)
        trainer = small_trainer()
        state = S.AutoBalancedState(alpha=2e-3)
        remain = {nid: max(1, toy.nodes[nid].attrs["out_channels"] // 2)
                  for nid in toy.conv_ids()}
        state.refresh(toy, remain)

        def mass_ratio():
            ratios = []
            for layer, in_p in state.partition.items():
                w = toy.nodes[layer].params["weight"].data.astype(np.float64)
                l1 = np.abs(w.reshape(w.shape[0], -1)).sum(axis=1)
                ratios.append(l1[in_p].mean() / l1[~in_p].mean())
            return float(np.mean(ratios))

        before = mass_ratio()
        rng = np.random.default_rng(11)
        for _ in range(4):
            for images, labels in trainer._epoch_batches(small_data, rng):
                S.autobalanced_train_step(toy, state, images, labels, trainer)
        after = mass_ratio()
        assert after < before  # penalty shrinks the prune set against the rest
        for layer, in_p in state.partition.items():
            w = toy.nodes[layer].params["weight"].data.astype(np.float64)
            l1 = np.abs(w.reshape(w.shape[0], -1)).sum(axis=1)
            assert l1[in_p].mean() < l1[~in_p].mean()

    def test_loss_value_equals_task_loss_when_alpha_zero(self, small_data):
        toy = models.build_toy("toy_small", seed=7)
        trainer = small_trainer()
        state = S.AutoBalancedState(alpha=0.0)
        state.refresh(toy, {nid: 4 for nid in toy.conv_ids()})
        images = small_data.images[:12]
        labels = small_data.labels[:12]
        twin = toy.copy()
        got = S.autobalanced_train_step(toy, state, images, labels, trainer)
        from prunekit import tensor as T
        tape = T.Tape()
        outs = twin.forward(images, tape=tape)
        with T.tape_scope(tape):
            want = trainer._loss_value(twin, outs, labels).item()
        assert got == pytest.approx(want, abs=1e-7)


class TestPsfp:
    def test_rate_curve_anchors(self):
        state = S.PsfpState(p_final=0.4, decay=0.25, n_epochs=20)
        assert S.psfp_rate(state, 0) == pytest.approx(0.0, abs=1e-12)
        at_nd = S.psfp_rate(state, int(20 * 0.25))
        assert at_nd == pytest.approx(0.75 * 0.4, abs=1e-9)
        assert S.psfp_rate(state, 10_000) == pytest.approx(0.4, abs=1e-9)

    def test_rate_curve_monotone_and_bounded(self):
        state = S.PsfpState(p_final=0.5, decay=0.3, n_epochs=12)
        rates = [S.psfp_rate(state, e) for e in range(0, 60)]
        assert all(b >= a - 1e-12 for a, b in zip(rates, rates[1:]))
        assert all(0.0 <= r <= 0.5 for r in rates)

    def test_invalid_decay(self):
        with pytest.raises(ValueError):
            S.PsfpState(p_final=0.5, decay=0.0, n_epochs=10)

    def test_zero_final_rate_keeps_structure(self, small_data):
        toy = models.build_toy("toy_small", seed=8)
        pruner = S.PsfpPruner(small_trainer(), p_final=0.0, decay=0.3, epochs=2)
        pruner.fit(toy, small_data, rng=np.random.default_rng(3))
        assert [pruner.graph_.nodes[n].attrs for n in pruner.graph_.order] == \
            [toy.nodes[n].attrs for n in toy.order]

    def test_soft_pruned_channels_recover(self, small_data):
        toy = models.build_toy("toy_small", seed=8)
        trainer = small_trainer()
        pruner = S.PsfpPruner(trainer, p_final=0.5, decay=0.3, epochs=3)
        rng = np.random.default_rng(3)
        state = S.PsfpState(0.5, 0.3, 3)
        work = toy.copy()
        trainer.train(work, small_data, 1, rng=rng)
        mask = pruner._layer_mask(work, S.psfp_rate(state, 1))
        G.zeroize_channels(work, mask)
        layer, ch = next(iter(mask.masked_channels()))
        assert np.all(work.nodes[layer].params["weight"].data[ch] == 0.0)
        trainer.train(work, small_data, 1, rng=rng)
        assert np.any(work.nodes[layer].params["weight"].data[ch] != 0.0)

    def test_final_flops_match_mask_materialization(self, small_data):
        toy = models.build_toy("toy_small", seed=8)
        pruner = S.PsfpPruner(small_trainer(), p_final=0.5, decay=0.3, epochs=3)
        pruner.fit(toy, small_data, rng=np.random.default_rng(3))
        mask = pruner.state_.mask
        keep = {nid: int(m.sum()) for nid, m in mask.keep.items()}
        got = pruner.graph_
        for nid in got.conv_ids():
            assert got.nodes[nid].attrs["out_channels"] == keep[nid]
        # materializing the soft-pruned twin with the same mask is structurally equal
        twin = G.materialize(pruner.soft_graph_, mask)
        assert G.count_flops(got, (3, 16, 8)) == G.count_flops(twin, (3, 16, 8))
        assert G.count_params(got) == G.count_params(twin)

    def test_report_flops_non_increasing(self, small_data):
        toy = models.build_toy("toy_small", seed=8)
        pruner = S.PsfpPruner(small_trainer(), p_final=0.4, decay=0.3, epochs=3)
        pruner.fit(toy, small_data, rng=np.random.default_rng(4))
        flops = [r["flops"] for r in pruner.report_]
        assert all(b <= a for a, b in zip(flops, flops[1:]))


class TestPlayAndPrune:
    def test_controller_piecewise_branches(self):
        state = S.PlayPruneState(epsilon=1.0, delta_w=1.1, lam=1e-4, xi=80.0)
        state.w_a = {"c": 0.5}
        state.controller_update(78.0)  # below xi - epsilon
        assert state.t_r == 0.0 and state.lam_a == 0.0
        assert state.w_a["c"] == 0.0

        state = S.PlayPruneState(epsilon=1.0, delta_w=1.1, lam=1e-4, xi=80.0)
        state.w_a = {"c": 0.5}
        state.controller_update(80.0)  # exactly xi
        assert state.t_r == pytest.approx(1.0)
        assert state.lam_a == pytest.approx(1e-4)
        assert state.w_a["c"] == pytest.approx(1.1 * 1.0 * 0.5)

    def test_missing_accuracy_pauses(self):
        state = S.PlayPruneState(xi=50.0)
        state.w_a = {"c": 0.3}
        state.controller_update(None)
        assert state.paused

    def test_initial_threshold_binary_search(self):
        toy = models.build_toy("toy_small", seed=9)
        w_a = S.init_adaptive_thresholds(toy, alpha_frac=0.25)
        for layer in toy.conv_ids():
            l1 = np.abs(toy.nodes[layer].params["weight"].data.reshape(
                toy.nodes[layer].attrs["out_channels"], -1)).sum(axis=1)
            want = int(math.floor(0.25 * l1.shape[0]))
            assert (l1 < w_a[layer]).sum() == want

    def test_safety_invariant_over_run(self, small_data):
        toy = models.build_toy("toy_small", seed=9)
        trainer = small_trainer(lr=0.02)
        eval_fn = reid_eval(small_data)
        trainer.train(toy, small_data, 6, rng=np.random.default_rng(2))
        pruner = S.PlayAndPrunePruner(trainer, epsilon=5.0, max_epochs=4,
                                      target_compression=0.3)
        pruner.fit(toy, small_data, eval_fn=eval_fn, rng=np.random.default_rng(2))
        state = pruner.state_
        xi = state.xi
        for rec in pruner.report_[1:]:
            acc_points = 100.0 * rec["rank1"]
            assert acc_points >= xi - state.epsilon - 1e-9 or \
                (state.t_r == 0.0 and state.lam_a == 0.0)
        flops = [r["flops"] for r in pruner.report_]
        assert all(b <= a for a, b in zip(flops, flops[1:]))


class TestLayerwiseFrozen:
    def test_frozen_tensors_bit_identical_through_retraining(self, small_data):
        toy = models.build_toy("toy_small", seed=10)
        trainer = small_trainer(lr=0.05)
        unretrained = S.prune_layerwise_frozen(toy, "block1.conv1",
                                               C.WeightNormCriterion(1), 0.5,
                                               None, small_data, epochs=0)
        retrained = S.prune_layerwise_frozen(toy, "block1.conv1",
                                             C.WeightNormCriterion(1), 0.5,
                                             trainer, small_data, epochs=2,
                                             rng=np.random.default_rng(1))
        trainable = {"block1.conv1.weight", "block1.conv2.weight"}
        moved = set()
        for pa, pb in zip(unretrained.parameters(), retrained.parameters()):
            if pa.name in trainable:
                if not np.array_equal(pa.data, pb.data):
                    moved.add(pa.name)
            else:
                assert np.array_equal(pa.data, pb.data), f"{pa.name} was not frozen"
        assert moved == trainable

    def test_trainable_set_actually_moves(self, small_data):
        toy = models.build_toy("toy_small", seed=10)
        trainer = small_trainer(lr=0.05)
        pruned = S.prune_layerwise_frozen(toy, "stem", C.WeightNormCriterion(1),
                                          0.25, trainer, small_data, epochs=2,
                                          rng=np.random.default_rng(1))
        assert pruned.nodes["stem"].attrs["out_channels"] == 6
        before = models.build_toy("toy_small", seed=10)
        assert not np.array_equal(
            pruned.nodes["down"].params["weight"].data[:, :6],
            before.nodes["down"].params["weight"].data[:, :6])

    def test_dead_channel_prune_under_freeze_preserves_outputs(self, small_data, rng):
        toy = models.build_toy("toy_small", seed=10)
        mask = G.PruneMask.all_keep(toy)
        mask.keep["stem"][:2] = False
        zeroed = G.soft_prune_apply(toy, mask)
        pruned = S.prune_layerwise_frozen(zeroed, "stem", C.WeightNormCriterion(1),
                                          0.25, None, small_data, epochs=0)
        x = rng.normal(size=(2, 3, 16, 8)).astype(np.float32)
        assert np.max(np.abs(zeroed.embed(x) - pruned.embed(x))) <= 1e-6

    def test_frozen_beats_unretrained_one_step(self, small_data):
        toy = models.build_toy("toy_small", seed=10)
        trainer = small_trainer(lr=0.03)
        trainer.train(toy, small_data, 8, rng=np.random.default_rng(6))
        eval_fn = reid_eval(small_data)
        frozen = S.prune_layerwise_frozen(toy.copy(), "down", C.WeightNormCriterion(1),
                                          0.5, trainer, small_data, epochs=4,
                                          rng=np.random.default_rng(7))
        bare = S.OneStepPruner(C.WeightNormCriterion(1),
                               S.PruneSchedule(0.5, 1, 0, 0.5), None)
        bare.fit(toy.copy(), small_data)
        # same-target structural mutilation without any retraining cannot win
        assert eval_fn(frozen)["rank1"] >= eval_fn(bare.graph_)["rank1"]


class TestRegistry:
    def test_make_pruner_names(self):
        for name in S.STRATEGIES:
            assert S.make_pruner(name) is not None
        with pytest.raises(ValueError):
            S.make_pruner("magic")
