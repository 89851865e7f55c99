import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from safepool.errors import (CapacityError, ConfigError, DataError,
                             TensorFormatError)
from safepool.prng import SplitMix64, fnv1a64, shuffled
from safepool.store import (DatasetManifest, gen_synthetic, load_attnpool,
                            read_tensor, sample_k_shot, save_attnpool,
                            write_tensor)


class TestTensorFile:
    def test_round_trip_large_float32(self, tmp_path):
        rng = np.random.default_rng(0)
        t = rng.standard_normal((7, 7, 2048)).astype(np.float32)
        path = tmp_path / "t.tf"
        write_tensor(path, t)
        back = read_tensor(path)
        assert back.dtype == np.float32
        assert back.shape == t.shape
        assert t.tobytes() == back.tobytes()  # bit-identical

    def test_header_arithmetic(self, tmp_path):
        path = tmp_path / "scalar.tf"
        write_tensor(path, np.array([3.5], dtype=np.float32))
        # magic(4) + version(2) + dtype(1) + rank(1) + one u64 dim(8) + payload(4)
        assert path.stat().st_size == 4 + 2 + 1 + 1 + 8 + 4

    def test_corrupted_magic(self, tmp_path):
        path = tmp_path / "bad.tf"
        write_tensor(path, np.ones(3, dtype=np.float64))
        blob = bytearray(path.read_bytes())
        blob[0] = ord("X")
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="offset 0"):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.tf"
        write_tensor(path, np.ones((2, 3), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(TensorFormatError):
            read_tensor(path)

    def test_bad_dtype_code(self, tmp_path):
        path = tmp_path / "dt.tf"
        write_tensor(path, np.ones(2, dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[6] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="offset 6"):
            read_tensor(path)

    def test_rejects_unsupported_dtype(self, tmp_path):
        with pytest.raises(ConfigError):
            write_tensor(tmp_path / "i.tf", np.ones(3, dtype=np.int32))

    @settings(max_examples=25, deadline=None,
              suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(seed=st.integers(0, 2**32 - 1),
           rank=st.integers(1, 4),
           f64=st.booleans())
    def test_round_trip_property(self, tmp_path, seed, rank, f64):
        rng = np.random.default_rng(seed)
        dims = tuple(int(d) for d in rng.integers(1, 5, size=rank))
        t = rng.standard_normal(dims).astype(np.float64 if f64 else np.float32)
        path = tmp_path / f"p{seed}_{rank}_{f64}.tf"
        write_tensor(path, t)
        back = read_tensor(path)
        assert back.shape == t.shape and back.dtype == t.dtype
        assert back.tobytes() == t.tobytes()


class TestPrng:
    def test_splitmix_reference_stream(self):
        # published SplitMix64 test vector for seed 1234567
        rng = SplitMix64(1234567)
        assert rng.next_u64() == 6457827717110365317

    def test_fnv1a64_known_value(self):
        # standard FNV-1a 64 vector: "a" -> 0xaf63dc4c8601ec8c
        assert fnv1a64("a") == 0xAF63DC4C8601EC8C

    def test_shuffle_deterministic(self):
        a = shuffled(range(10), SplitMix64(99))
        b = shuffled(range(10), SplitMix64(99))
        assert a == b
        assert sorted(a) == list(range(10))


class TestSampleKShot:
    def test_exact_fit_consumes_all(self, small_dataset):
        # pool_per_class=10; K=5 + min(5,4)=4 needs 9 of 10
        fs = sample_k_shot(small_dataset, 5, 1)
        for c in fs.train:
            assert len(fs.train[c]) == 5
            assert len(fs.val[c]) == 4
            assert not set(fs.train[c]) & set(fs.val[c])

    def test_determinism(self, small_dataset):
        a = sample_k_shot(small_dataset, 3, 42)
        b = sample_k_shot(small_dataset, 3, 42)
        assert a == b

    def test_distinct_folds(self, small_dataset):
        picks = [tuple(sample_k_shot(small_dataset, 4, s).train_indices())
                 for s in (1, 2, 3)]
        assert len(set(picks)) == 3

    def test_capacity_error_names_class(self, small_dataset):
        with pytest.raises(CapacityError, match="class_000"):
            sample_k_shot(small_dataset, 9, 1)

    def test_val_size_rule(self, small_dataset):
        fs = sample_k_shot(small_dataset, 2, 1)
        assert all(len(v) == 2 for v in fs.val.values())  # min(2, 4) = 2
        fs = sample_k_shot(small_dataset, 6, 1)
        assert all(len(v) == 4 for v in fs.val.values())  # min(6, 4) = 4


class TestManifest:
    def test_generated_manifest_validates(self, small_dataset):
        small_dataset.validate(check_files=True)

    def test_round_trip(self, small_dataset, tmp_path):
        loaded = DatasetManifest.load(
            Path(small_dataset.root) / "manifest.json")
        assert loaded.classes == small_dataset.classes
        assert loaded.height == small_dataset.height
        assert len(loaded.samples) == len(small_dataset.samples)
        loaded.validate(check_files=True)

    def test_matches_published_schema(self, small_dataset):
        jsonschema = pytest.importorskip("jsonschema")
        schema = json.loads(
            (Path(__file__).resolve().parents[1] / "schemas"
             / "manifest.schema.json").read_text())
        jsonschema.validate(small_dataset.to_json(), schema)

    def test_duplicate_classes_rejected(self, small_dataset):
        m = DatasetManifest.load(Path(small_dataset.root) / "manifest.json")
        m.classes = ["a"] * len(m.classes)
        with pytest.raises(ConfigError):
            m.validate(check_files=False)

    def test_missing_file_rejected(self, small_dataset, tmp_path):
        m = DatasetManifest.load(Path(small_dataset.root) / "manifest.json")
        m.samples[0].path = "features/nonexistent.tf"
        with pytest.raises(DataError):
            m.validate(check_files=True)


class TestCheckpoint:
    def test_attnpool_round_trip(self, small_dataset, tmp_path):
        params = small_dataset.load_attnpool()
        save_attnpool(tmp_path / "ck", params)
        back = load_attnpool(tmp_path / "ck")
        assert back.heads == params.heads
        assert back.include_mean_token == params.include_mean_token
        for name, arr in params.tensors().items():
            assert np.array_equal(back.tensors()[name], arr)


class TestGenSynthetic:
    def test_separable_when_noiseless(self, tmp_path):
        m = gen_synthetic(tmp_path / "sep", n_classes=4, pool_per_class=3,
                          height=5, width=5, channels=32, embed_dim=16,
                          parts=8, noise=0.0, seed=3, test_per_class=10,
                          classifier_noise=0.0)
        assert m.metadata["zero_shot_accuracy"] == 1.0

    def test_deterministic_bytes(self, tmp_path):
        kwargs = dict(n_classes=3, pool_per_class=3, height=4, width=4,
                      channels=16, embed_dim=8, parts=6, noise=0.3, seed=5,
                      test_per_class=4)
        gen_synthetic(tmp_path / "a", **kwargs)
        gen_synthetic(tmp_path / "b", **kwargs)
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes(), rel

    def test_parameter_bounds(self, tmp_path):
        with pytest.raises(ConfigError):
            gen_synthetic(tmp_path / "x", n_classes=5, pool_per_class=3,
                          height=4, width=4, channels=16, embed_dim=8,
                          parts=4, noise=0.1, seed=1)  # parts < classes
        with pytest.raises(ConfigError):
            gen_synthetic(tmp_path / "y", n_classes=2, pool_per_class=3,
                          height=4, width=4, channels=4, embed_dim=8,
                          parts=2, noise=0.1, seed=1)  # channels too small

    def test_planted_cells_recorded(self, small_dataset):
        for s in small_dataset.samples:
            assert s.planted_cells is not None
            assert 2 <= len(s.planted_cells) <= 4
