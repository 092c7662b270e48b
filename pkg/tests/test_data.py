import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmil.errors import ConfigurationError, DataError, ParseError
from mmil.data import (
    BAG_MAGIC,
    DatasetManifest,
    GeneratorParams,
    InstanceBag,
    ManifestEntry,
    bag_label_oracle,
    decode_bag,
    encode_bag,
    gen_synthetic_dataset,
    generate_bags,
    load_bag,
    load_manifest,
    save_bag,
    split_dataset,
)
from mmil.metrics import roc_auc
from mmil.training import mean_pool_probe


class TestLabelOracle:
    @pytest.mark.parametrize("labels,expected", [([0, 0, 0], 0), ([0, 1, 0], 1), ([1], 1), ([1] * 9, 1)])
    def test_examples(self, labels, expected):
        assert bag_label_oracle(labels) == expected

    def test_empty(self):
        with pytest.raises(DataError):
            bag_label_oracle([])

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=200))
    def test_matches_any(self, labels):
        assert bag_label_oracle(labels) == int(any(labels))

    def test_bag_rejects_contradicting_label(self):
        with pytest.raises(DataError, match="contradicts"):
            InstanceBag("b", np.zeros((3, 2)), 1, instance_labels=[0, 0, 0])


class TestBagFile:
    def test_minimal_file_size(self):
        raw = encode_bag(InstanceBag("b", np.array([[1.5, -2.0]]), 0))
        assert len(raw) == 26
        assert raw[:8] == BAG_MAGIC
        assert struct.unpack("<IIBB", raw[8:18]) == (1, 2, 0, 0)
        assert np.frombuffer(raw[18:], dtype="<f4").tolist() == [1.5, -2.0]

    def test_coords_follow_embeddings(self):
        raw = encode_bag(InstanceBag("b", np.array([[1.5, -2.0]]), 1, coords=np.array([[128.0, 384.0]])))
        assert len(raw) == 26 + 8
        assert struct.unpack("<IIBB", raw[8:18]) == (1, 2, 1, 1)
        assert np.frombuffer(raw[18:], dtype="<f4").tolist() == [1.5, -2.0, 128.0, 384.0]

    def test_without_coords(self):
        raw = encode_bag(InstanceBag("b", np.ones((3, 4)), 1, instance_labels=[0, 1, 0]))
        assert len(raw) == 18 + 48
        assert decode_bag(raw).coords is None

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 10), st.booleans(), st.integers(0, 1), st.integers(0, 2**31))
    def test_round_trip_is_lossless(self, n, c, has, label, seed):
        rng = np.random.default_rng(seed)
        emb = rng.normal(size=(n, c)).astype(np.float32).astype(np.float64)
        coords = rng.uniform(0, 1e4, size=(n, 2)).astype(np.float32).astype(np.float64) if has else None
        bag = decode_bag(encode_bag(InstanceBag("x", emb, label, coords)), "x")
        np.testing.assert_array_equal(bag.embeddings, emb)
        assert bag.label == label and bag.embeddings.dtype == np.float64
        if has:
            np.testing.assert_array_equal(bag.coords, coords)

    def test_file_round_trip(self, tmp_path):
        bag = InstanceBag("slide", np.arange(6.0).reshape(3, 2), 1, np.zeros((3, 2)))
        save_bag(tmp_path / "slide.mmilbag", bag)
        back = load_bag(tmp_path / "slide.mmilbag")
        assert back.id == "slide"
        np.testing.assert_array_equal(back.embeddings, bag.embeddings)

    @pytest.mark.parametrize("cut", [0, 5, 17, 19, 25])
    def test_truncation(self, cut):
        raw = encode_bag(InstanceBag("b", np.ones((1, 2)), 0, np.ones((1, 2))))
        with pytest.raises(ParseError, match="truncated") as info:
            decode_bag(raw[:cut])
        assert info.value.offset == cut

    def test_bad_magic(self):
        raw = bytearray(encode_bag(InstanceBag("b", np.ones((1, 2)), 0)))
        raw[0:8] = b"MMILBAG2"
        with pytest.raises(ParseError, match="offset 0"):
            decode_bag(bytes(raw))

    def test_trailing_bytes(self):
        raw = encode_bag(InstanceBag("b", np.ones((1, 2)), 0)) + b"\x00"
        with pytest.raises(ParseError, match="trailing"):
            decode_bag(raw)

    def test_bad_flag(self):
        raw = bytearray(encode_bag(InstanceBag("b", np.ones((1, 2)), 0)))
        raw[16] = 7
        with pytest.raises(ParseError, match="offset 16"):
            decode_bag(bytes(raw))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_bag(tmp_path / "nope.mmilbag")


class TestGenerator:
    def small(self, **kw):
        return GeneratorParams(**{"n_bags": 40, "n_range": (20, 60), "dim": 8, **kw})

    def test_labels_follow_instances(self):
        bags = list(generate_bags(self.small()))
        assert [b.label for b in bags].count(1) == 20
        for b in bags:
            assert b.label == bag_label_oracle(b.instance_labels)
            assert (b.instance_labels.sum() >= 1) == bool(b.label)

    def test_positive_count_and_size(self):
        for b in generate_bags(self.small(pos_instance_rate=0.1)):
            assert 20 <= b.n <= 60 and b.dim == 8 and b.coords.shape == (b.n, 2)
            if b.label:
                assert b.instance_labels.sum() == max(1, round(0.1 * b.n))

    def test_positives_cluster_spatially(self):
        gaps = []
        for b in generate_bags(self.small(pos_instance_rate=0.1, n_range=(100, 100))):
            if b.label:
                pos = b.coords[b.instance_labels == 1]
                gaps.append(np.linalg.norm(pos - pos.mean(0), axis=1).mean() / np.linalg.norm(
                    b.coords - b.coords.mean(0), axis=1).mean())
        assert np.mean(gaps) < 0.5

    def test_seeded(self):
        a = [encode_bag(b) for b in generate_bags(self.small(seed=3))]
        b = [encode_bag(b) for b in generate_bags(self.small(seed=3))]
        c = [encode_bag(b) for b in generate_bags(self.small(seed=4))]
        assert a == b and a != c

    @pytest.mark.parametrize("kw", [
        {"n_range": (10, 10), "pos_instance_rate": 0.05},
        {"pos_instance_rate": 0.0},
        {"separation": 0.0},
        {"n_range": (0, 5)},
    ])
    def test_impossible_configuration(self, kw):
        with pytest.raises(ConfigurationError):
            list(generate_bags(self.small(**kw)))

    def test_dense_positives_are_linearly_separable(self):
        bags = list(generate_bags(self.small(n_bags=120, pos_instance_rate=1.0, separation=6.0)))
        scores = mean_pool_probe(bags[:80], bags[80:])
        assert roc_auc(scores, [b.label for b in bags[80:]]) > 0.99


class TestSplits:
    def manifest(self, n, positive):
        entries = [ManifestEntry(f"bags/b{i}.mmilbag", int(i in positive)) for i in range(n)]
        return DatasetManifest(entries)

    def test_proportions(self):
        m = split_dataset(self.manifest(100, set(range(0, 100, 2))), seed=1)
        assert [len(m.split(s)) for s in ("train", "val", "test")] == [60, 15, 25]
        for s in ("train", "val", "test"):
            part = m.split(s)
            assert abs(sum(e.label for e in part) - 0.5 * len(part)) <= 1

    @settings(max_examples=40, deadline=None)
    @given(st.integers(10, 200), st.floats(0.1, 0.9), st.integers(0, 100))
    def test_stratified(self, n, frac, seed):
        pos = set(range(int(n * frac)))
        if not pos:
            return
        m = split_dataset(self.manifest(n, pos), seed=seed)
        rate = len(pos) / n
        seen = []
        for s in ("train", "val", "test"):
            part = m.split(s)
            assert abs(sum(e.label for e in part) - rate * len(part)) <= 1
            seen += [e.path for e in part]
        assert sorted(seen) == sorted(e.path for e in m.entries)

    def test_deterministic(self):
        base = self.manifest(50, set(range(20)))
        a = [e.split for e in split_dataset(base, seed=5).entries]
        assert a == [e.split for e in split_dataset(base, seed=5).entries]
        assert a != [e.split for e in split_dataset(base, seed=6).entries]

    @pytest.mark.parametrize("ratios", [(1.0, 0.0, 0.0), (0.5, 0.6, -0.1), (0.5, 0.5)])
    def test_rejected(self, ratios):
        with pytest.raises(ConfigurationError):
            split_dataset(self.manifest(20, {1, 2}), ratios)


class TestDataset:
    def test_files_and_manifest(self, tmp_path):
        params = GeneratorParams(n_bags=20, n_range=(20, 40), dim=8, pos_instance_rate=0.1, seed=2)
        m = gen_synthetic_dataset(tmp_path / "a", params)
        gen_synthetic_dataset(tmp_path / "b", params)
        files = sorted(p.name for p in (tmp_path / "a" / "bags").iterdir())
        assert len(files) == 20
        for name in files:
            assert (tmp_path / "a" / "bags" / name).read_bytes() == (tmp_path / "b" / "bags" / name).read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
        loaded = load_manifest(tmp_path / "a")
        assert [len(loaded.split(s)) for s in ("train", "val", "test")] == [12, 3, 5]
        record = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert record["generator"]["seed"] == 2 and record["dim"] == 8
        for bag in loaded.load_split("train"):
            assert bag.label == bag_label_oracle(bag.instance_labels)
        assert len(m.entries) == 20

    def test_missing_bag_file(self, tmp_path):
        gen_synthetic_dataset(tmp_path, GeneratorParams(n_bags=8, n_range=(20, 30), dim=8, pos_instance_rate=0.1))
        next((tmp_path / "bags").iterdir()).unlink()
        with pytest.raises(DataError, match="missing"):
            load_manifest(tmp_path)
