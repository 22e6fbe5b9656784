"""Tests for the attention layer, both model architectures, and checkpoints."""

import numpy as np
import pytest

from enggraph import aerograph as ag
from enggraph import biwgraph as bg
from enggraph import diffcore as dc
from enggraph import geomesh as gm
from enggraph import models as md
from enggraph import modesynth as ms
from enggraph.errors import ContractError
from enggraph.graph import EngineeringGraph


def _permute_graph(graph, perm):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return EngineeringGraph(
        node_features=graph.node_features[perm],
        edges=inv[graph.edges],
        edge_features=graph.edge_features,
        meta=dict(graph.meta))


@pytest.fixture(scope="module")
def aero_graph():
    mesh = gm.generate_body("car_like", {"taper": "B"}, subdivision=2)
    frame = gm.detect_symmetry(mesh, plane="y0")
    ds = ag.downsample_symmetric(mesh, frame, 120)
    rng = np.random.default_rng(5)
    p, tau = ag.aero_labels(mesh, "B", 30.0, 1.2, rng=rng)
    sample = ag.AeroSample("B", mesh, 30.0, 1.2, p, tau)
    return ag.assemble_aero_graph(sample, ds, k=6).graph


@pytest.fixture(scope="module")
def mode_sample():
    spec = ms.default_dataset_config().reference
    sample = ms.synth_mode(spec, "torsion_global", seed=3)
    skeleton = bg.build_canonical_skeleton(
        ms.synth_wireframe(spec, seed=3)[1])
    agg = bg.aggregate_mode(sample, skeleton)
    std = bg.Standardizer.fit([agg])
    return std.apply(agg)


class TestAttentionLayer:
    def test_single_node_self_loop(self):
        # one node, no edges: the layer reduces to the value transform
        graph = EngineeringGraph(
            node_features=np.array([[1.0, -2.0, 0.5]]),
            edges=np.zeros((0, 2), dtype=np.int64),
            edge_features=np.zeros((0, 2)))
        prep = md.prepare_graph(graph)
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 8))
        b = rng.normal(size=8)
        agg, alpha = md.gat_layer_forward(
            dc.DiffTensor(prep.node_features), prep, heads=2, head_width=4,
            w=dc.DiffTensor(w), b=dc.DiffTensor(b),
            a_src=dc.DiffTensor(rng.normal(size=8)),
            a_dst=dc.DiffTensor(rng.normal(size=8)),
            e_att=dc.DiffTensor(np.zeros((1, 2))),
            e_msg=dc.DiffTensor(np.zeros((1, 8))))
        np.testing.assert_allclose(alpha.values, 1.0)
        np.testing.assert_allclose(agg.values[0],
                                   graph.node_features[0] @ w + b)

    def test_attention_normalized_per_destination(self, aero_graph):
        prep = md.prepare_graph(aero_graph)
        rng = np.random.default_rng(1)
        heads, width = 3, 4
        e = prep.edge_features.shape[0]
        _, alpha = md.gat_layer_forward(
            dc.DiffTensor(prep.node_features), prep, heads, width,
            w=dc.DiffTensor(rng.normal(size=(9, 12))),
            b=dc.DiffTensor(np.zeros(12)),
            a_src=dc.DiffTensor(rng.normal(size=12)),
            a_dst=dc.DiffTensor(rng.normal(size=12)),
            e_att=dc.DiffTensor(rng.normal(size=(e, heads))),
            e_msg=dc.DiffTensor(np.zeros((e, 12))))
        sums = np.add.reduceat(alpha.values, prep.seg_ptr[:-1], axis=0)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_zeroed_scores_give_uniform_attention(self, aero_graph):
        prep = md.prepare_graph(aero_graph)
        e = prep.edge_features.shape[0]
        _, alpha = md.gat_layer_forward(
            dc.DiffTensor(prep.node_features), prep, 2, 4,
            w=dc.DiffTensor(np.random.default_rng(2).normal(size=(9, 8))),
            b=dc.DiffTensor(np.zeros(8)),
            a_src=dc.DiffTensor(np.zeros(8)),
            a_dst=dc.DiffTensor(np.zeros(8)),
            e_att=dc.DiffTensor(np.zeros((e, 2))),
            e_msg=dc.DiffTensor(np.zeros((e, 8))))
        counts = np.diff(prep.seg_ptr)
        expected = np.repeat(1.0 / counts, counts)
        np.testing.assert_allclose(
            alpha.values, np.tile(expected[:, None], (1, 2)), atol=1e-12)


class TestModeClassifier:
    def test_probabilities_valid(self, mode_sample):
        model = md.ModeClassifier(seed=0)
        p1, p2, hybrid, attn = md.classify_mode(mode_sample, model)
        assert p1.shape == (4,) and p2.shape == (11,)
        assert abs(p1.sum() - 1.0) < 1e-9 and abs(p2.sum() - 1.0) < 1e-9
        assert np.all(p1 >= 0) and np.all(p2 >= 0)
        assert isinstance(hybrid, bool)
        assert len(attn) == model.config["layers"]

    def test_hybrid_flag_from_probability_gap(self, mode_sample):
        model = md.ModeClassifier(seed=0)
        _, p2, hybrid, _ = md.classify_mode(mode_sample, model)
        top = np.sort(p2)[::-1]
        assert hybrid == (top[0] - top[1] < md.HYBRID_GAP)

    def test_eval_mode_deterministic(self, mode_sample):
        model = md.ModeClassifier(seed=1)
        a = md.classify_mode(mode_sample, model)
        b = md.classify_mode(mode_sample, model)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_mc_dropout_passes_differ(self, mode_sample):
        model = md.ModeClassifier(seed=1, dropout=0.3)
        rng = np.random.default_rng(0)
        a = md.classify_mode(mode_sample, model, mode="mc-dropout", rng=rng)
        b = md.classify_mode(mode_sample, model, mode="mc-dropout", rng=rng)
        assert not np.allclose(a[1], b[1])

    def test_unstandardized_input_rejected(self, mode_sample):
        g = mode_sample.graph
        raw = bg.RegionGraphSample(
            graph=EngineeringGraph(g.node_features, g.edges, g.edge_features,
                                   meta={}),
            pooled=mode_sample.pooled)
        with pytest.raises(ContractError):
            md.ModeClassifier(seed=0).prepare(raw)

    def test_unknown_mode_rejected(self, mode_sample):
        with pytest.raises(ContractError):
            md.classify_mode(mode_sample, md.ModeClassifier(seed=0),
                             mode="bogus")

    def test_gradients_reach_all_parameters(self, mode_sample):
        model = md.ModeClassifier(seed=0, dropout=0.0)
        prep = model.prepare(mode_sample)
        tape = dc.Tape()
        leaves = md.as_leaves(tape, model.params)
        p1, p2, _ = model.forward(prep, mode_sample.pooled, params=leaves)
        loss = dc.add(dc.reduce_sum(dc.log(p1)), dc.reduce_sum(dc.log(p2)))
        dc.backward(tape, loss)
        dead = [n for n, leaf in leaves.items()
                if np.all(leaf.grad == 0.0)]
        assert dead == []


class TestAeroSurrogate:
    def test_output_shape_and_determinism(self, aero_graph):
        model = md.AeroGraphNetLite(hidden=16, layers=2, heads=2,
                                    head_width=8, seed=0)
        out = md.predict_fields(aero_graph, model)
        assert out.shape == (aero_graph.num_nodes, 4)
        np.testing.assert_array_equal(out,
                                      md.predict_fields(aero_graph, model))

    def test_permutation_equivariance(self, aero_graph):
        model = md.AeroGraphNetLite(hidden=16, layers=2, heads=2,
                                    head_width=8, seed=3)
        out = md.predict_fields(aero_graph, model)
        rng = np.random.default_rng(7)
        perm = rng.permutation(aero_graph.num_nodes)
        out_p = md.predict_fields(_permute_graph(aero_graph, perm), model)
        np.testing.assert_allclose(out_p, out[perm], atol=1e-9)

    def test_classifier_permutation_invariance(self, mode_sample):
        model = md.ModeClassifier(seed=0)
        p1, p2, _, _ = md.classify_mode(mode_sample, model)
        perm = np.random.default_rng(0).permutation(20)
        g = mode_sample.graph
        permuted = bg.RegionGraphSample(
            graph=_permute_graph(g, perm), pooled=mode_sample.pooled,
            label=mode_sample.label, meta=dict(mode_sample.meta))
        q1, q2, _, _ = md.classify_mode(permuted, model)
        np.testing.assert_allclose(q1, p1, atol=1e-9)
        np.testing.assert_allclose(q2, p2, atol=1e-9)

    def test_feature_width_mismatch(self, aero_graph):
        model = md.AeroGraphNetLite(node_dim=7, hidden=8, layers=1,
                                    head_width=4)
        with pytest.raises(ContractError):
            md.predict_fields(aero_graph, model)

    def test_mc_dropout_varies_and_zero_dropout_does_not(self, aero_graph):
        stochastic = md.AeroGraphNetLite(hidden=8, layers=1, heads=2,
                                         head_width=4, dropout=0.4, seed=0)
        rng = np.random.default_rng(0)
        a = md.predict_fields(aero_graph, stochastic, mode="mc-dropout",
                              rng=rng)
        b = md.predict_fields(aero_graph, stochastic, mode="mc-dropout",
                              rng=rng)
        assert not np.allclose(a, b)
        frozen = md.AeroGraphNetLite(hidden=8, layers=1, heads=2,
                                     head_width=4, dropout=0.0, seed=0)
        rng = np.random.default_rng(0)
        c = md.predict_fields(aero_graph, frozen, mode="mc-dropout", rng=rng)
        d = md.predict_fields(aero_graph, frozen, mode="mc-dropout", rng=rng)
        np.testing.assert_array_equal(c, d)

    def test_parameter_counts(self):
        big = md.AeroGraphNetLite(hidden=128)
        assert 2_200_000 < big.params.count() < 2_600_000
        clf = md.ModeClassifier()
        assert 150_000 < clf.params.count() < 300_000

    def test_gradients_reach_all_parameters(self, aero_graph):
        model = md.AeroGraphNetLite(hidden=8, layers=2, heads=2, head_width=4,
                                    dropout=0.0, seed=0)
        prep = model.prepare(aero_graph)
        tape = dc.Tape()
        leaves = md.as_leaves(tape, model.params)
        out = model.forward(prep, params=leaves)
        dc.backward(tape, dc.reduce_sum(dc.mul(out, out)))
        dead = [n for n, leaf in leaves.items() if np.all(leaf.grad == 0.0)]
        assert dead == []


class TestCheckpoints:
    def test_roundtrip_exact(self, tmp_path, aero_graph):
        model = md.AeroGraphNetLite(hidden=8, layers=1, heads=2, head_width=4,
                                    seed=9)
        md.save_checkpoint(tmp_path, "net", model, extra={"note": 1})
        loaded, extra = md.load_checkpoint(tmp_path, "net")
        assert extra == {"note": 1}
        assert loaded.config == model.config
        for name, arr in model.params.items():
            np.testing.assert_array_equal(loaded.params[name], arr)
        np.testing.assert_array_equal(md.predict_fields(aero_graph, loaded),
                                      md.predict_fields(aero_graph, model))

    def test_classifier_roundtrip(self, tmp_path, mode_sample):
        model = md.ModeClassifier(seed=2, layers=2, heads=2, head_width=8)
        md.save_checkpoint(tmp_path, "clf", model)
        loaded, _ = md.load_checkpoint(tmp_path, "clf")
        a = md.classify_mode(mode_sample, model)
        b = md.classify_mode(mode_sample, loaded)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_corrupt_blob_rejected(self, tmp_path):
        model = md.ModeClassifier(seed=0, layers=1, heads=1, head_width=4)
        md.save_checkpoint(tmp_path, "clf", model)
        blob = tmp_path / "clf.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(ContractError):
            md.load_checkpoint(tmp_path, "clf")
