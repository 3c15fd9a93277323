"""Graph IR: shape inference, complexity accounting, channel coupling and
structural prune rewrites."""

import numpy as np
import pytest

from prunekit import graph as G
from prunekit import models
from prunekit import tensor as T
from prunekit.modelio import ModelFormatError, deserialize, serialize


def chain_graph(widths=(4, 3), k=3, in_channels=3, seed=0, embed=None):
    layers = []
    cin = in_channels
    for i, w in enumerate(widths):
        layers.append({"id": f"conv{i}", "kind": "conv", "out_channels": w,
                       "in_channels": cin, "kernel": k, "stride": 1, "pad": 1, "bias": True})
        layers.append({"id": f"relu{i}", "kind": "relu"})
        cin = w
    layers.append({"id": "gap", "kind": "global_avg_pool"})
    if embed:
        layers.append({"id": "embed", "kind": "embedding_head",
                       "out_features": embed, "in_features": cin})
    return models.graph_from_layer_dicts(layers, in_channels, seed=seed)


class TestInferShapes:
    def test_padding_preserves_size(self):
        g = models.graph_from_layer_dicts(
            [{"id": "c", "kind": "conv", "out_channels": 4, "in_channels": 3,
              "kernel": 3, "stride": 1, "pad": 1}], 3)
        shapes = G.infer_shapes(g, (1, 3, 8, 8))
        assert shapes["c"] == (1, 4, 8, 8)

    def test_stride_two_floor_formula(self):
        g = models.graph_from_layer_dicts(
            [{"id": "c", "kind": "conv", "out_channels": 8, "in_channels": 4,
              "kernel": 3, "stride": 2, "pad": 1}], 4)
        assert G.infer_shapes(g, (1, 4, 8, 8))["c"] == (1, 8, 4, 4)

    def test_resnet50_embedding_dimension(self):
        g = models.build_resnet_shape(50)
        shapes = G.infer_shapes(g, (1, 3, 256, 128))
        assert shapes["gap"] == (1, 2048)

    def test_add_channel_mismatch_names_node(self):
        layers = [
            {"id": "a", "kind": "conv", "out_channels": 4, "in_channels": 3,
             "kernel": 1, "stride": 1, "pad": 0},
            {"id": "b", "kind": "conv", "out_channels": 5, "in_channels": 3,
             "kernel": 1, "stride": 1, "pad": 0, "inputs": ["input"]},
            {"id": "join", "kind": "add", "inputs": ["a", "b"]},
        ]
        g = models.graph_from_layer_dicts(layers, 3)
        with pytest.raises(G.ShapeInferenceError, match="join"):
            G.infer_shapes(g, (1, 3, 4, 4))

    def test_cycle_rejected(self):
        nodes = [
            G.LayerNode("input", G.INPUT, [], {"channels": 2}),
            G.LayerNode("r1", G.RELU, ["r2"]),
            G.LayerNode("r2", G.RELU, ["r1"]),
        ]
        with pytest.raises(G.ValidationError, match="cycle"):
            G.NetworkGraph(nodes)


class TestComplexityCounting:
    def test_conv_flops_hand_count(self):
        # k=3, C_in=2, C_out=4, output 5x5: 2*(3*3*2)*4*25 = 3600
        g = models.graph_from_layer_dicts(
            [{"id": "c", "kind": "conv", "out_channels": 4, "in_channels": 2,
              "kernel": 3, "stride": 1, "pad": 0}], 2)
        assert G.count_flops(g, (2, 7, 7)) == 3600

    def test_dense_flops_hand_count(self):
        g = models.graph_from_layer_dicts(
            [{"id": "gap", "kind": "global_avg_pool"},
             {"id": "d", "kind": "dense", "out_features": 5, "in_features": 10}], 10)
        assert G.count_flops(g, (10, 4, 4)) == 100

    def test_param_count_conv_with_bias(self):
        g = models.graph_from_layer_dicts(
            [{"id": "c", "kind": "conv", "out_channels": 4, "in_channels": 2,
              "kernel": 3, "stride": 1, "pad": 0, "bias": True}], 2)
        assert G.count_params(g) == 2 * 4 * 9 + 4

    def test_input_only_graph_has_zero_params(self):
        g = G.NetworkGraph([G.LayerNode("input", G.INPUT, [], {"channels": 3})])
        assert G.count_params(g) == 0

    @pytest.mark.parametrize("variant,params_m", [(18, 11.12), (34, 21.28), (50, 23.48)])
    def test_resnet_parameter_anchors(self, variant, params_m):
        g = models.build_resnet_shape(variant)
        got = G.count_params(g) / 1e6
        assert abs(got - params_m) / params_m <= 0.02

    def test_resnet50_flops_anchor(self):
        g = models.build_resnet_shape(50)
        got = G.count_flops(g, (3, 256, 128))
        assert abs(got - 6.32e9) / 6.32e9 <= 0.20


# ---------------------------------------------------------------------------
# coupling


def random_residual_dag(rng):
    """A random valid net: conv chain with nested residual blocks."""
    layers = []
    cin = int(rng.integers(1, 4))
    width = int(rng.integers(2, 6))
    idx = 0

    def conv(c_out, src=None):
        nonlocal idx, layers
        lid = f"c{idx}"
        idx += 1
        spec = {"id": lid, "kind": "conv", "out_channels": c_out,
                "in_channels": conv.cin, "kernel": 1, "stride": 1, "pad": 0}
        if src:
            spec["inputs"] = [src]
        layers.append(spec)
        conv.cin = c_out
        return lid

    conv.cin = cin
    last = conv(width)
    for b in range(int(rng.integers(1, 4))):
        entry = last
        entry_width = conv.cin
        depth = int(rng.integers(1, 3))
        for d in range(depth - 1):
            mid = conv(int(rng.integers(2, 6)))
            layers.append({"id": f"r{idx}", "kind": "relu"})
            idx += 1
        out = conv(entry_width)
        layers.append({"id": f"add{b}", "kind": "add", "inputs": [out, entry]})
        conv.cin = entry_width
        last = f"add{b}"
        if rng.random() < 0.4:
            last = conv(int(rng.integers(2, 6)), src=last)
    return models.graph_from_layer_dicts(layers, cin, seed=int(rng.integers(1000))), cin


def oracle_groups(graph):
    """Brute-force coupling oracle: recursive per-channel source sets from
    every add node, merged into components by repeated sweeps."""

    def sources(nid, ch):
        node = graph.nodes[nid]
        if node.kind == G.CONV:
            return {(nid, ch)}
        if node.kind == G.INPUT:
            return {("#input", ch)}
        if node.kind == G.ADD:
            return sources(node.inputs[0], ch) | sources(node.inputs[1], ch)
        return sources(node.inputs[0], ch)

    sets = []
    for nid in graph.order:
        node = graph.nodes[nid]
        if node.kind == G.CONV:
            for c in range(node.attrs["out_channels"]):
                sets.append({(nid, c)})
        elif node.kind == G.ADD:
            shapes = G.infer_shapes(graph, (1, graph.nodes[graph.input_id].attrs["channels"], 8, 8))
            for c in range(shapes[nid][1]):
                sets.append(sources(node.inputs[0], c) | sources(node.inputs[1], c))
    merged = True
    while merged:
        merged = False
        out = []
        while sets:
            cur = sets.pop()
            changed = True
            while changed:
                changed = False
                for other in sets[:]:
                    if cur & other:
                        cur |= other
                        sets.remove(other)
                        changed = merged = True
            out.append(cur)
        sets = out
    result = set()
    for s in sets:
        convs = tuple(sorted(m for m in s if m[0] != "#input"))
        if convs:
            result.add((convs, not any(m[0] == "#input" for m in s)))
    return result


class TestCoupling:
    def test_plain_chain_is_all_singletons(self):
        g = chain_graph((4, 3, 2))
        groups = G.coupled_channel_groups(g)
        assert all(len(gr.members) == 1 for gr in groups)
        assert len(groups) == 9

    def test_single_residual_block_merges_indexwise(self):
        toy = models.build_toy("toy_small")
        groups = G.coupled_channel_groups(toy)
        multi = [gr for gr in groups if len(gr.members) > 1]
        assert len(multi) == 16  # trunk width of toy_small
        for gr in multi:
            layers = {nid for nid, _ in gr.members}
            assert layers == {"down", "block1.conv2", "block2.conv2"}
            channels = {c for _, c in gr.members}
            assert len(channels) == 1  # index-wise merge

    def test_groups_partition_all_channels(self):
        toy = models.build_toy("toy")
        groups = G.coupled_channel_groups(toy)
        seen = [m for gr in groups for m in gr.members]
        assert len(seen) == len(set(seen))
        total = sum(toy.nodes[nid].attrs["out_channels"] for nid in toy.conv_ids())
        assert len(seen) == total

    def test_random_dags_match_reachability_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(60):
            g, _ = random_residual_dag(rng)
            got = {(gr.members, gr.prunable) for gr in G.coupled_channel_groups(g)}
            assert got == oracle_groups(g), f"trial {trial} mismatch"

    def test_random_dags_prune_soundly(self):
        rng = np.random.default_rng(13)
        for trial in range(20):
            g, cin = random_residual_dag(rng)
            groups = [gr for gr in G.coupled_channel_groups(g) if gr.prunable]
            spaces = G.group_spaces(groups)
            selections = []
            for key, gs in spaces.items():
                take = rng.integers(0, len(gs))
                selections.extend(sorted(gs, key=lambda x: x.members)[:take])
            if not selections:
                continue
            pruned = G.hard_prune(g, selections)
            shapes = G.infer_shapes(pruned, (1, cin, 8, 8))
            x = rng.normal(size=(1, cin, 8, 8)).astype(np.float32)
            outs = pruned.forward(x)
            assert all(np.all(np.isfinite(t.data)) for t in outs.values())
            removed = sum(len(s.members) for s in selections)
            assert G.count_params(pruned) < G.count_params(g)
            got_removed = sum(g.nodes[nid].attrs["out_channels"] for nid in g.conv_ids()) \
                - sum(pruned.nodes[nid].attrs["out_channels"] for nid in pruned.conv_ids())
            assert got_removed == removed


class TestHardPrune:
    def test_dead_channel_prune_changes_nothing(self, rng):
        toy = models.build_toy("toy_small", seed=3)
        mask = G.PruneMask.all_keep(toy)
        mask.keep["stem"][2] = False
        zeroed = G.soft_prune_apply(toy, mask)
        groups = [gr for gr in G.coupled_channel_groups(zeroed)
                  if gr.members == (("stem", 2),)]
        pruned = G.hard_prune(zeroed, groups)
        x = rng.normal(size=(4, 3, 16, 8)).astype(np.float32)
        before = zeroed.embed(x)
        after = pruned.embed(x)
        assert np.max(np.abs(before - after)) <= 1e-6

    def test_chain_prune_accounting_exact(self):
        g = chain_graph((4, 3), k=3)
        groups = [gr for gr in G.coupled_channel_groups(g)
                  if gr.members[0][0] == "conv0"][:2]
        pruned = G.hard_prune(g, groups)
        assert pruned.nodes["conv0"].attrs["out_channels"] == 2
        assert pruned.nodes["conv1"].attrs["in_channels"] == 2
        # conv0 loses 2*(3*9+1) params, conv1 loses 3 slices of 2*9
        want_drop = 2 * (3 * 9 + 1) + 3 * 2 * 9
        assert G.count_params(g) - G.count_params(pruned) == want_drop

    def test_half_prune_halves_flops_within_granularity(self):
        toy = models.build_toy("toy")
        groups = [gr for gr in G.coupled_channel_groups(toy) if gr.prunable]
        selections = []
        for key, gs in G.group_spaces(groups).items():
            ordered = sorted(gs, key=lambda x: x.members)
            selections.extend(ordered[:len(ordered) // 2])
        pruned = G.hard_prune(toy, selections)
        base = G.count_flops(toy, (3, 16, 8))
        got = G.count_flops(pruned, (3, 16, 8))
        # every layer halves both fan-in and fan-out except the stem
        assert got / base <= 0.5

    def test_cannot_empty_a_layer(self):
        g = chain_graph((2, 3))
        groups = [gr for gr in G.coupled_channel_groups(g) if gr.members[0][0] == "conv0"]
        with pytest.raises(G.PruneError, match="every channel"):
            G.hard_prune(g, groups)

    def test_partial_group_selection_rejected(self):
        toy = models.build_toy("toy_small")
        full = [gr for gr in G.coupled_channel_groups(toy) if len(gr.members) > 1][0]
        partial = G.ChannelGroup(full.members[:1])
        with pytest.raises(G.PruneError, match="whole coupled group"):
            G.hard_prune(toy, [partial])

    def test_add_keeps_balanced_channel_counts(self):
        toy = models.build_toy("toy_small")
        groups = [gr for gr in G.coupled_channel_groups(toy) if len(gr.members) > 1][:5]
        pruned = G.hard_prune(toy, groups)
        shapes = G.infer_shapes(pruned, (1, 3, 16, 8))
        for nid in pruned.order:
            if pruned.nodes[nid].kind == G.ADD:
                a, b = pruned.nodes[nid].inputs
                assert shapes[a][1] == shapes[b][1]


class TestSoftPrune:
    def test_all_keep_mask_is_identity(self):
        toy = models.build_toy("toy_small", seed=1)
        out = G.soft_prune_apply(toy, G.PruneMask.all_keep(toy))
        for nid in toy.order:
            for name, p in toy.nodes[nid].params.items():
                assert np.array_equal(p.data, out.nodes[nid].params[name].data)

    def test_masked_channel_feature_map_is_zero(self, rng):
        toy = models.build_toy("toy_small", seed=1)
        mask = G.PruneMask.all_keep(toy)
        mask.keep["stem"][1] = False
        soft = G.soft_prune_apply(toy, mask)
        x = rng.normal(size=(2, 3, 16, 8)).astype(np.float32)
        outs = soft.forward(x)
        assert np.all(outs["stem"].data[:, 1] == 0.0)
        assert np.all(outs["stem.bn"].data[:, 1] == 0.0)

    def test_mask_length_mismatch(self):
        toy = models.build_toy("toy_small")
        mask = G.PruneMask.all_keep(toy)
        mask.keep["stem"] = np.ones(5, dtype=bool)
        with pytest.raises(G.PruneError, match="length"):
            G.soft_prune_apply(toy, mask)

    def group_consistent_mask(self, toy, fraction=0.5):
        keep = {nid: np.ones(toy.nodes[nid].attrs["out_channels"], dtype=bool)
                for nid in toy.conv_ids()}
        groups = [gr for gr in G.coupled_channel_groups(toy) if gr.prunable]
        for key, gs in G.group_spaces(groups).items():
            ordered = sorted(gs, key=lambda x: x.members)
            for gr in ordered[:int(len(ordered) * fraction)]:
                for nid, c in gr.members:
                    keep[nid][c] = False
        return G.PruneMask(keep)

    def test_soft_then_materialize_matches_soft_forward(self, rng):
        toy = models.build_toy("toy_small", seed=2)
        mask = self.group_consistent_mask(toy)
        soft = G.soft_prune_apply(toy, mask)
        compact = G.materialize(toy, mask)
        x = rng.normal(size=(3, 3, 16, 8)).astype(np.float32)
        assert np.max(np.abs(soft.embed(x) - compact.embed(x))) <= 1e-6

    def test_materialize_matches_hard_prune_accounting(self):
        toy = models.build_toy("toy_small", seed=2)
        mask = self.group_consistent_mask(toy)
        compact = G.materialize(toy, mask)
        selections = [gr for gr in G.coupled_channel_groups(toy)
                      if all(not mask.keep[nid][c] for nid, c in gr.members)]
        direct = G.hard_prune(toy, selections)
        assert G.count_params(compact) == G.count_params(direct)

    def test_materialize_all_keep_is_structural_identity(self):
        toy = models.build_toy("toy_small")
        out = G.materialize(toy, G.PruneMask.all_keep(toy))
        assert [out.nodes[nid].attrs for nid in out.order] == \
            [toy.nodes[nid].attrs for nid in toy.order]

    def test_partial_group_mask_rejected(self):
        toy = models.build_toy("toy_small")
        mask = G.PruneMask.all_keep(toy)
        mask.keep["down"][0] = False  # coupled with block conv2 channels
        with pytest.raises(G.PruneError, match="coupled group"):
            G.materialize(toy, mask)


class TestSerialization:
    def test_round_trip_bit_identical(self, rng):
        toy = models.build_toy("toy_small", seed=5)
        back = deserialize(serialize(toy))
        assert back.order == toy.order
        for nid in toy.order:
            for name, p in toy.nodes[nid].params.items():
                assert np.array_equal(p.data, back.nodes[nid].params[name].data)
        x = rng.normal(size=(1, 3, 16, 8)).astype(np.float32)
        assert np.array_equal(toy.embed(x), back.embed(x))

    def test_truncated_file_fails_checksum(self):
        blob = serialize(models.build_toy("toy_small"))
        with pytest.raises(ModelFormatError, match="checksum|truncated|short"):
            deserialize(blob[:-9])

    def test_corrupted_payload_fails_checksum(self):
        blob = bytearray(serialize(models.build_toy("toy_small")))
        blob[len(blob) // 2] ^= 0xFF
        with pytest.raises(ModelFormatError, match="checksum"):
            deserialize(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(ModelFormatError, match="magic|short"):
            deserialize(b"NOTAMODEL" * 4)

    def test_pruned_graph_round_trip_keeps_counts(self):
        toy = models.build_toy("toy_small")
        groups = [gr for gr in G.coupled_channel_groups(toy) if len(gr.members) > 1][:4]
        pruned = G.hard_prune(toy, groups)
        back = deserialize(serialize(pruned))
        for nid in pruned.conv_ids():
            assert back.nodes[nid].attrs["out_channels"] == \
                pruned.nodes[nid].attrs["out_channels"]


class TestHeads:
    def test_append_and_strip_classifier(self, rng):
        toy = models.build_toy("toy_small", seed=1)
        clf = G.append_classifier(toy, n_classes=7, seed=2)
        shapes = G.infer_shapes(clf, (1, 3, 16, 8))
        assert shapes["classifier"] == (1, 7)
        feat = G.strip_heads(clf)
        assert "classifier" not in feat.nodes
        x = rng.normal(size=(2, 3, 16, 8)).astype(np.float32)
        assert np.array_equal(feat.embed(x), toy.embed(x))

    def test_part_head_output_shape(self):
        layers = [
            {"id": "gap", "kind": "global_avg_pool"},
            {"id": "embed", "kind": "embedding_head", "out_features": 12, "in_features": 4},
            {"id": "parts", "kind": "part_head", "parts": 3, "classes": 5, "part_dim": 4},
        ]
        g = models.graph_from_layer_dicts(layers, 4)
        assert G.infer_shapes(g, (2, 4, 6, 6))["parts"] == (2, 15)
