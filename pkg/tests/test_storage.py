import json
import struct

import numpy as np
import pytest

import lowrank
import storage
import synth
from tests.conftest import random_pair, random_repo


def f32(m):
    return np.asarray(m, dtype=np.float32).astype(np.float64)


class TestTensorCodec:
    def test_float32_layout(self):
        raw = storage.encode_tensor(np.array([[1.5, 0.0]]))
        assert raw[:4] == b"LRT1"
        assert struct.unpack("<II", raw[4:12]) == (1, 2)
        assert raw[12:16] == bytes([0x00, 0x00, 0xC0, 0x3F])
        assert len(raw) == 12 + 8

    def test_round_trip_is_bitwise(self, rng):
        m = f32(rng.standard_normal((5, 7)))
        back = storage.decode_tensor(storage.encode_tensor(m))
        assert back.tobytes() == m.tobytes()

    def test_header_disagrees_with_payload(self):
        raw = struct.pack("<4sII", b"LRT1", 8, 4) + np.zeros(28, dtype="<f4").tobytes()
        with pytest.raises(storage.SizeMismatchError):
            storage.decode_tensor(raw)

    def test_bad_magic(self):
        raw = storage.encode_tensor(np.ones((2, 2)))
        with pytest.raises(storage.BadMagicError):
            storage.decode_tensor(b"XXXX" + raw[4:])

    @pytest.mark.parametrize("cut", [2, 8, 13])
    def test_truncated(self, cut):
        raw = storage.encode_tensor(np.ones((2, 2)))
        with pytest.raises(storage.TruncatedFileError):
            storage.decode_tensor(raw[:cut])

    def test_non_finite_payload(self):
        raw = struct.pack("<4sII", b"LRT1", 1, 1) + np.array([np.nan], dtype="<f4").tobytes()
        with pytest.raises(storage.StorageError):
            storage.decode_tensor(raw)

    def test_overflow_on_encode(self):
        with pytest.raises(storage.StorageError):
            storage.encode_tensor(np.array([[1e300]]))

    def test_errors_are_distinct(self):
        kinds = {storage.BadMagicError, storage.TruncatedFileError, storage.SizeMismatchError, storage.ManifestError}
        assert len(kinds) == 4
        assert all(issubclass(k, storage.StorageError) for k in kinds)


class TestAdapterContainer:
    def test_round_trip(self, tmp_path, rng):
        adapter = {
            "q": lowrank.LowRankPair(a=f32(rng.standard_normal((2, 5))), b=f32(rng.standard_normal((4, 2)))),
            "v": lowrank.LowRankPair(a=f32(rng.standard_normal((2, 3))), b=f32(rng.standard_normal((6, 2)))),
        }
        storage.write_adapter(tmp_path / "ad", adapter, name="demo")
        manifest = storage.read_manifest(tmp_path / "ad")
        assert manifest.name == "demo" and manifest.rank == 2
        back = storage.read_adapter(tmp_path / "ad")
        assert list(back) == ["q", "v"]
        for layer in adapter:
            assert back[layer].a.tobytes() == adapter[layer].a.tobytes()
            assert back[layer].b.tobytes() == adapter[layer].b.tobytes()

    def test_payload_smaller_than_manifest(self, tmp_path, rng):
        storage.write_adapter(tmp_path / "ad", {"l": random_pair(rng, d=8, k=5, r=4)})
        storage.write_tensor(tmp_path / "ad" / "l.B.lrt", np.zeros((7, 4)))
        with pytest.raises(storage.SizeMismatchError):
            storage.read_adapter(tmp_path / "ad")

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "ad").mkdir()
        with pytest.raises(storage.ManifestError):
            storage.read_adapter(tmp_path / "ad")

    def test_corrupt_manifest(self, tmp_path, rng):
        storage.write_adapter(tmp_path / "ad", {"l": random_pair(rng)})
        (tmp_path / "ad" / storage.MANIFEST_FILE).write_text("{ not json", encoding="utf-8")
        with pytest.raises(storage.ManifestError):
            storage.read_adapter(tmp_path / "ad")

    def test_manifest_missing_fields(self, tmp_path, rng):
        storage.write_adapter(tmp_path / "ad", {"l": random_pair(rng)})
        (tmp_path / "ad" / storage.MANIFEST_FILE).write_text(json.dumps({"name": "x"}), encoding="utf-8")
        with pytest.raises(storage.ManifestError):
            storage.read_adapter(tmp_path / "ad")

    def test_manifest_path_escape(self, tmp_path, rng):
        storage.write_adapter(tmp_path / "ad", {"l": random_pair(rng)})
        path = tmp_path / "ad" / storage.MANIFEST_FILE
        data = json.loads(path.read_text(encoding="utf-8"))
        data["layers"][0]["a_file"] = "../elsewhere.lrt"
        path.write_text(json.dumps(data), encoding="utf-8")
        with pytest.raises(storage.ManifestError):
            storage.read_adapter(tmp_path / "ad")

    def test_missing_tensor_file(self, tmp_path, rng):
        storage.write_adapter(tmp_path / "ad", {"l": random_pair(rng)})
        (tmp_path / "ad" / "l.A.lrt").unlink()
        with pytest.raises(storage.StorageError):
            storage.read_adapter(tmp_path / "ad")

    def test_corrupted_payload_magic(self, tmp_path, rng):
        storage.write_adapter(tmp_path / "ad", {"l": random_pair(rng)})
        target = tmp_path / "ad" / "l.A.lrt"
        target.write_bytes(b"JUNK" + target.read_bytes()[4:])
        with pytest.raises(storage.BadMagicError):
            storage.read_adapter(tmp_path / "ad")


class TestRepositoryAndWorld:
    def test_repository_round_trip(self, tmp_path, rng):
        repo = random_repo(rng, n=3, layers=("l0", "l1"))
        repo = lowrank.AdapterRepository(
            adapters=tuple(
                {n: lowrank.LowRankPair(a=f32(p.a), b=f32(p.b)) for n, p in ad.items()} for ad in repo.adapters
            ),
            layer_names=repo.layer_names,
        )
        storage.write_repository(tmp_path / "repo", repo, ["relevant", "irrelevant", "irrelevant"])
        back, relevance = storage.read_repository(tmp_path / "repo")
        assert back.n == 3
        assert back.names == repo.names
        assert relevance == ["relevant", "irrelevant", "irrelevant"]
        for a, b in zip(repo.adapters, back.adapters):
            for layer in repo.layer_names:
                np.testing.assert_array_equal(a[layer].a, b[layer].a)

    def test_world_round_trip(self, tmp_path, small_world):
        storage.write_world(tmp_path / "w", small_world)
        back = storage.read_world(tmp_path / "w")
        assert back.spec == small_world.spec
        assert back.relevance == small_world.relevance
        assert back.teacher_loss == small_world.teacher_loss
        np.testing.assert_array_equal(back.val.inputs, small_world.val.inputs)
        np.testing.assert_array_equal(back.val.labels, small_world.val.labels)
        assert synth.zero_delta_loss(back) == synth.zero_delta_loss(small_world)

    def test_world_written_twice_is_byte_identical(self, tmp_path, small_world):
        storage.write_world(tmp_path / "a", small_world)
        storage.write_world(tmp_path / "b", small_world)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_not_a_world(self, tmp_path):
        (tmp_path / "w").mkdir()
        (tmp_path / "w" / storage.WORLD_FILE).write_text(json.dumps({"format": "other"}), encoding="utf-8")
        with pytest.raises(storage.ManifestError):
            storage.read_world(tmp_path / "w")


class TestRunLogs:
    def test_jsonl_round_trip(self, tmp_path):
        records = [{"generation": 1, "best": 0.5}, {"generation": 2, "best": 0.25}]
        assert storage.write_jsonl(tmp_path / "h.jsonl", records) == 2
        assert storage.read_jsonl(tmp_path / "h.jsonl") == records

    def test_bad_jsonl_line(self, tmp_path):
        (tmp_path / "h.jsonl").write_text('{"a": 1}\nnope\n', encoding="utf-8")
        with pytest.raises(storage.StorageError):
            storage.read_jsonl(tmp_path / "h.jsonl")
