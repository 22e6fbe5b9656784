import itertools

import numpy as np
import pytest

from enggraph import biwgraph as bg
from enggraph import modesynth as ms
from enggraph.errors import ConfigError, ContractError, InvalidSampleError


@pytest.fixture(scope="module")
def spec():
    return ms.VehicleSpec("veh", node_count=160)


@pytest.fixture(scope="module")
def wireframe(spec):
    return ms.synth_wireframe(spec, seed=0)


class TestTaxonomy:
    def test_mapping_total_and_surjective(self):
        assert set(ms.LEVEL2_TO_LEVEL1) == set(ms.LEVEL2)
        assert set(ms.LEVEL2_TO_LEVEL1.values()) == set(ms.LEVEL1)

    def test_class_counts(self):
        assert len(ms.LEVEL1) == 4
        assert len(ms.LEVEL2) == 11


class TestWireframe:
    def test_deterministic(self, spec):
        a = ms.synth_wireframe(spec, seed=5)
        b = ms.synth_wireframe(spec, seed=5)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]

    def test_width_scaling(self, spec):
        wide = ms.VehicleSpec("w", width=1.2, node_count=160)
        a = ms.synth_wireframe(spec, seed=1)[0]
        b = ms.synth_wireframe(wide, seed=1)[0]
        np.testing.assert_allclose(b[:, 1], 1.2 * a[:, 1], atol=1e-12)

    def test_all_regions_at_least_four_members(self, wireframe):
        skel = bg.build_canonical_skeleton(wireframe[1])
        assert min(skel.region_sizes().values()) >= 4

    def test_exact_mirror_symmetry(self, wireframe):
        pts = wireframe[0]
        mirrored = pts * np.array([1.0, -1.0, 1.0])
        a = pts[np.lexsort(pts.T)]
        b = mirrored[np.lexsort(mirrored.T)]
        np.testing.assert_array_equal(a, b)

    def test_node_budget_range_enforced(self):
        with pytest.raises(ConfigError):
            ms.VehicleSpec("v", node_count=100)
        with pytest.raises(ConfigError):
            ms.VehicleSpec("v", wheelbase=-1.0)


class TestSynthMode:
    def test_bending_v1_peak_at_midspan_rails(self, spec, wireframe):
        s = ms.synth_mode(spec, "bending_vertical_1", 0, wireframe=wireframe,
                          noise=0.0, amplitude=1.0, sign=1.0)
        positions, tags = wireframe
        tags = np.asarray(tags)
        rail = np.isin(tags, bg.REGION_GROUPS["rail"] + bg.REGION_GROUPS["sill"])
        uz = np.abs(s.displacements[rail, 2])
        x = positions[rail, 0]
        mid = 0.5 * (positions[:, 0].min() + positions[:, 0].max())
        assert abs(x[np.argmax(uz)] - mid) < 0.2 * np.ptp(positions[:, 0])

    def test_torsion_uz_antisymmetric(self, spec, wireframe):
        s = ms.synth_mode(spec, "torsion_global", 0, wireframe=wireframe,
                          noise=0.0, amplitude=1.0, sign=1.0)
        positions, _ = wireframe
        mirrored = positions * np.array([1.0, -1.0, 1.0])
        order_a = np.lexsort(positions.T)
        order_b = np.lexsort(mirrored.T)
        uz = s.displacements[:, 2]
        np.testing.assert_allclose(uz[order_a], -uz[order_b], atol=1e-12)

    def test_noise_free_matches_closed_form(self, spec, wireframe):
        for label in ms.LEVEL2:
            rng = np.random.default_rng(3)
            expected = ms._closed_form_field(wireframe[0], wireframe[1], label, rng)
            s = ms.synth_mode(spec, label, 3, wireframe=wireframe,
                              noise=0.0, amplitude=1.0, sign=1.0)
            np.testing.assert_allclose(s.displacements, expected, atol=1e-12)

    def test_frequency_in_band(self, spec, wireframe):
        for label in ms.LEVEL2:
            s = ms.synth_mode(spec, label, 1, wireframe=wireframe)
            assert 0.0 < s.frequency <= 100.0

    def test_unknown_label_rejected(self, spec, wireframe):
        with pytest.raises(ContractError):
            ms.synth_mode(spec, "wobble", 0, wireframe=wireframe)


class TestMac:
    def test_self_and_scale(self):
        rng = np.random.default_rng(0)
        phi = rng.normal(size=90)
        assert abs(ms.mac(phi, phi) - 1.0) < 1e-12
        assert abs(ms.mac(phi, -3.0 * phi) - 1.0) < 1e-12

    def test_orthogonal(self):
        assert ms.mac([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_half_overlap(self):
        assert abs(ms.mac([1.0, 1.0, 0.0], [1.0, 0.0, 0.0]) - 0.5) < 1e-12

    def test_range(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            v = ms.mac(rng.normal(size=30), rng.normal(size=30))
            assert 0.0 <= v <= 1.0

    def test_zero_vector_rejected(self):
        with pytest.raises(InvalidSampleError):
            ms.mac(np.zeros(5), np.ones(5))

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            ms.mac(np.ones(4), np.ones(5))


class TestTracking:
    def make_modes(self, spec, wireframe, labels, seed=0):
        return [ms.synth_mode(spec, lab, seed + i, wireframe=wireframe,
                              noise=0.0, amplitude=1.0, sign=1.0)
                for i, lab in enumerate(labels)]

    def test_identity(self, spec, wireframe):
        base = self.make_modes(
            spec, wireframe,
            ["torsion_global", "bending_vertical_1", "bending_lateral"])
        pairs, unmatched = ms.track_modes(base, base)
        assert unmatched == []
        assert sorted((i, j) for i, j, _ in pairs) == [(0, 0), (1, 1), (2, 2)]
        assert abs(sum(m for _, _, m in pairs) - 3.0) < 1e-12

    def test_swap_recovered(self, spec, wireframe):
        labels = ["torsion_global", "bending_vertical_1",
                  "bending_lateral", "pumping_floor"]
        base = self.make_modes(spec, wireframe, labels)
        variant = [base[1], base[0], base[3], base[2]]
        pairs, unmatched = ms.track_modes(base, variant)
        assert unmatched == []
        mapping = {i: j for i, j, _ in pairs}
        assert mapping == {0: 1, 1: 0, 2: 3, 3: 2}

    def test_greedy_matches_brute_force_on_distinct_modes(self, spec, wireframe):
        labels = ["torsion_global", "bending_vertical_2",
                  "bending_lateral", "pumping_roof"]
        base = self.make_modes(spec, wireframe, labels)
        rng = np.random.default_rng(2)
        perm = rng.permutation(4)
        variant = [base[i] for i in perm]
        pairs, _ = ms.track_modes(base, variant)
        greedy = {i: j for i, j, _ in pairs}

        # brute-force optimal assignment oracle
        mac_matrix = np.array([[ms.mac(a.displacements, b.displacements)
                                for b in variant] for a in base])
        best, best_total = None, -1.0
        for p in itertools.permutations(range(4)):
            total = sum(mac_matrix[i, p[i]] for i in range(4))
            if total > best_total:
                best, best_total = p, total
        assert greedy == {i: best[i] for i in range(4)}

    def test_noise_mode_unmatched_and_labels_propagated(self, spec, wireframe):
        base = self.make_modes(
            spec, wireframe, ["torsion_global", "bending_vertical_1"])
        rng = np.random.default_rng(3)
        noise = bg.ModeSample("veh", "junk", 50.0, wireframe[0],
                              rng.normal(size=wireframe[0].shape))
        variant = [
            bg.ModeSample("veh", m.mode_id, m.frequency, m.positions,
                          m.displacements.copy())
            for m in base
        ] + [noise]
        pairs, unmatched = ms.track_modes(base, variant)
        assert unmatched == [2]
        assert variant[0].label == base[0].label
        assert variant[1].label == base[1].label
        assert variant[2].label is None

    def test_skeleton_mismatch(self, spec, wireframe):
        other = ms.VehicleSpec("o", node_count=140)
        base = self.make_modes(spec, wireframe, ["torsion_global"])
        wf2 = ms.synth_wireframe(other, seed=0)
        variant = [ms.synth_mode(other, "torsion_global", 0, wireframe=wf2)]
        with pytest.raises(ContractError):
            ms.track_modes(base, variant)


class TestRuleOracle:
    def test_noise_free_level1_agreement(self):
        spec = ms.VehicleSpec("veh", node_count=160)
        wf = ms.synth_wireframe(spec, seed=0)
        skel = bg.build_canonical_skeleton(wf[1])
        for label in ms.LEVEL2:
            for seed in range(5):
                s = ms.synth_mode(spec, label, seed, wireframe=wf, noise=0.0)
                out = bg.aggregate_mode(s, skel)
                assert ms.rule_based_level1(out) == ms.LEVEL2_TO_LEVEL1[label], label

    def test_noisy_level1_agreement_high(self):
        spec = ms.VehicleSpec("veh", node_count=160)
        wf = ms.synth_wireframe(spec, seed=0)
        skel = bg.build_canonical_skeleton(wf[1])
        hits = total = 0
        for label in ms.LEVEL2:
            for seed in range(10):
                s = ms.synth_mode(spec, label, seed, wireframe=wf, noise=0.05)
                out = bg.aggregate_mode(s, skel)
                hits += ms.rule_based_level1(out) == ms.LEVEL2_TO_LEVEL1[label]
                total += 1
        assert hits / total >= 0.99


@pytest.fixture(scope="module")
def default_dataset():
    return ms.build_dataset(ms.default_dataset_config(seed=0))


class TestDatasetBuilder:
    def test_largest_remainder_326(self):
        assert ms.largest_remainder_split(326, (0.70, 0.15, 0.15)) == [228, 49, 49]

    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            ms.largest_remainder_split(10, (0.5, 0.2, 0.2))

    def test_train_count_226(self, default_dataset):
        assert default_dataset.manifest["counts"]["train"] == 226

    def test_every_class_in_reference_train(self, default_dataset):
        ref = default_dataset.manifest["vehicles"][0]
        seen = {
            s.label[1]
            for s in default_dataset.split_samples("train")
            if s.vehicle_id == ref
        }
        assert seen == set(ms.LEVEL2)

    def test_reference_stratification_within_one(self, default_dataset):
        ref = default_dataset.manifest["vehicles"][0]
        for split, ratio in zip(("train", "val", "test"), (0.70, 0.15, 0.15)):
            per_class = {c: 0 for c in ms.LEVEL2}
            for s in default_dataset.split_samples(split):
                if s.vehicle_id == ref:
                    per_class[s.label[1]] += 1
            for c, n in per_class.items():
                expect = ratio * (28 if c == "bending_vertical_1" else 27)
                assert abs(n - expect) <= 1.0, (split, c)

    def test_target_budgets(self, default_dataset):
        budgets = dict(zip(default_dataset.manifest["vehicles"][1:], [9, 2, 5]))
        for vid, budget in budgets.items():
            n = sum(1 for s in default_dataset.split_samples("train")
                    if s.vehicle_id == vid)
            assert n == budget

    def test_determinism(self):
        a = ms.build_dataset(ms.default_dataset_config(seed=4))
        b = ms.build_dataset(ms.default_dataset_config(seed=4))
        assert a.splits == b.splits
        for sa, sb in zip(a.samples, b.samples):
            np.testing.assert_array_equal(sa.displacements, sb.displacements)
            assert sa.frequency == sb.frequency

    def test_budget_mismatch_rejected(self):
        cfg = ms.default_dataset_config()
        cfg.target_train_budgets = [9, 2]
        with pytest.raises(ConfigError):
            ms.build_dataset(cfg)

    def test_save_load_roundtrip(self, tmp_path):
        cfg = ms.default_dataset_config(seed=1)
        cfg.reference_class_counts = {c: 3 for c in ms.LEVEL2}
        cfg.targets = cfg.targets[:1]
        cfg.target_train_budgets = [2]
        cfg.target_eval_count = 4
        dataset = ms.build_dataset(cfg)
        ms.save_dataset(dataset, tmp_path)
        loaded = ms.load_dataset(tmp_path)
        assert loaded.splits == dataset.splits
        assert len(loaded.samples) == len(dataset.samples)
        by_key = {ms.ModeDataset.key(s): s for s in loaded.samples}
        for s in dataset.samples:
            other = by_key[ms.ModeDataset.key(s)]
            assert other.label == s.label
            np.testing.assert_array_equal(other.displacements, s.displacements)
