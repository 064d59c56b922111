import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milattn.embeddings import (
    EmbeddingStore,
    import_csv,
    load_manifest,
    read_store,
    toy_embed,
    write_store,
)
from milattn.errors import (
    BadMagicError,
    ConfigError,
    CorruptPayloadError,
    DuplicateCoordinateError,
    UnsupportedVersionError,
)

HEADER_BYTES = 20  # magic + version + dim + count


def solid_patch(color, size=8):
    px = np.zeros((size, size, 3), dtype=np.uint8)
    px[:] = color
    return px


def random_store(n=3, dim=64, seed=0, slide_id="s"):
    gen = np.random.default_rng(seed)
    coords = np.array([(i * 16, 0) for i in range(n)], dtype=np.uint32)
    values = gen.normal(0, 1, (n, dim)).astype(np.float32)
    return EmbeddingStore(slide_id, dim, coords, values)


class TestToyEmbed:
    def test_pure_red_is_one_hot(self):
        vec = toy_embed(solid_patch((255, 0, 0)))
        # bin (r=3, g=0, b=0) -> index 3*16
        expected = np.zeros(64, dtype=np.float32)
        expected[48] = 1.0
        np.testing.assert_array_equal(vec, expected)

    def test_l1_normalized(self):
        gen = np.random.default_rng(2)
        patch = gen.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        assert toy_embed(patch).sum() == pytest.approx(1.0, abs=1e-6)

    def test_half_red_half_blue(self):
        patch = solid_patch((255, 0, 0), size=8)
        patch[:, 4:] = (0, 0, 255)
        vec = toy_embed(patch)
        assert vec[3 * 16] == pytest.approx(0.5)
        assert vec[3] == pytest.approx(0.5)
        assert vec.sum() == pytest.approx(1.0)

    def test_pure_function(self):
        patch = solid_patch((120, 50, 200))
        np.testing.assert_array_equal(toy_embed(patch), toy_embed(patch))

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            toy_embed(np.zeros((4, 5, 3), dtype=np.uint8))


class TestStoreFormat:
    def test_roundtrip_bit_exact(self, tmp_path):
        store = random_store()
        path = tmp_path / "s.mile"
        write_store(store, path)
        back = read_store(path)
        assert back.slide_id == "s"
        assert back.dim == store.dim
        np.testing.assert_array_equal(back.coords, store.coords)
        assert back.values.tobytes() == store.values.tobytes()

    def test_empty_store_roundtrip(self, tmp_path):
        store = EmbeddingStore.empty("e", 16)
        path = tmp_path / "e.mile"
        write_store(store, path)
        back = read_store(path)
        assert len(back) == 0
        assert back.dim == 16

    def test_file_size_matches_layout(self, tmp_path):
        store = random_store(n=3, dim=64)
        path = tmp_path / "s.mile"
        write_store(store, path)
        assert path.stat().st_size == HEADER_BYTES + 3 * (8 + 64 * 4)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "s.mile"
        write_store(random_store(), path)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(CorruptPayloadError, match="corrupt payload"):
            read_store(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "s.mile"
        write_store(random_store(), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError, match="bad magic"):
            read_store(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "s.mile"
        write_store(random_store(), path)
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(UnsupportedVersionError, match="version unsupported"):
            read_store(path)

    def test_nan_value_rejected(self, tmp_path):
        store = random_store(n=1, dim=4)
        path = tmp_path / "s.mile"
        write_store(store, path)
        data = bytearray(path.read_bytes())
        data[HEADER_BYTES + 8:HEADER_BYTES + 12] = np.float32("nan").tobytes()
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptPayloadError, match="non-finite"):
            read_store(path)

    def test_duplicate_coordinate_rejected(self, tmp_path):
        store = random_store(n=2, dim=4)
        path = tmp_path / "s.mile"
        write_store(store, path)
        data = bytearray(path.read_bytes())
        # overwrite the second record's coordinates with the first's
        rec = 8 + 4 * 4
        data[HEADER_BYTES + rec:HEADER_BYTES + rec + 8] = data[HEADER_BYTES:HEADER_BYTES + 8]
        path.write_bytes(bytes(data))
        with pytest.raises(DuplicateCoordinateError, match="duplicate patch coordinate"):
            read_store(path)

    def test_header_only_too_short(self, tmp_path):
        path = tmp_path / "s.mile"
        path.write_bytes(b"MIL")
        with pytest.raises(CorruptPayloadError):
            read_store(path)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_property(self, seed):
        gen = np.random.default_rng(seed)
        n = int(gen.integers(0, 12))
        dim = int(gen.integers(1, 40))
        coords = gen.choice(1000, size=(n, 2), replace=False if n else True)
        values = gen.normal(0, 100, (n, dim)).astype(np.float32)
        store = EmbeddingStore("prop", dim, coords.astype(np.uint32), values)
        import os
        import tempfile
        fd, path = tempfile.mkstemp(suffix=".mile")
        os.close(fd)
        try:
            write_store(store, path)
            back = read_store(path)
            assert back.values.tobytes() == store.values.tobytes()
            assert np.array_equal(back.coords, store.coords)
            assert back.dim == store.dim
        finally:
            os.unlink(path)


class TestImportCsv:
    def write(self, tmp_path, text):
        path = tmp_path / "emb.csv"
        path.write_text(text)
        return path

    def test_two_rows(self, tmp_path):
        path = self.write(tmp_path, "x,y,f0,f1,f2,f3\n0,0,1,2,3,4\n16,0,5,6,7,8\n")
        store = import_csv(path, "s1")
        assert len(store) == 2
        assert store.dim == 4
        np.testing.assert_array_equal(store.coords, [[0, 0], [16, 0]])
        np.testing.assert_allclose(store.values, [[1, 2, 3, 4], [5, 6, 7, 8]])

    def test_header_only_gives_empty_store(self, tmp_path):
        path = self.write(tmp_path, "x,y,f0,f1\n")
        store = import_csv(path, "s1")
        assert len(store) == 0
        assert store.dim == 2

    def test_ragged_row_names_line(self, tmp_path):
        path = self.write(tmp_path, "x,y,f0,f1\n0,0,1,2\n16,0,5\n")
        with pytest.raises(ConfigError, match="line 3"):
            import_csv(path, "s1")

    def test_non_numeric_rejected(self, tmp_path):
        path = self.write(tmp_path, "x,y,f0\n0,0,abc\n")
        with pytest.raises(ConfigError, match="line 2"):
            import_csv(path, "s1")

    def test_duplicate_coordinate_rejected(self, tmp_path):
        path = self.write(tmp_path, "x,y,f0\n0,0,1\n0,0,2\n")
        with pytest.raises(ConfigError, match="duplicate patch coordinate"):
            import_csv(path, "s1")

    def test_bad_header_rejected(self, tmp_path):
        path = self.write(tmp_path, "a,b,f0\n")
        with pytest.raises(ConfigError, match="header"):
            import_csv(path, "s1")


class TestStoreInvariants:
    def test_duplicate_coords_rejected_at_construction(self):
        coords = np.array([(0, 0), (0, 0)], dtype=np.uint32)
        values = np.zeros((2, 4), dtype=np.float32)
        with pytest.raises(ValueError, match="duplicate"):
            EmbeddingStore("s", 4, coords, values)

    def test_non_finite_rejected_at_construction(self):
        coords = np.array([(0, 0)], dtype=np.uint32)
        values = np.full((1, 4), np.inf, dtype=np.float32)
        with pytest.raises(ValueError, match="non-finite"):
            EmbeddingStore("s", 4, coords, values)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            EmbeddingStore("s", 4, np.zeros((2, 2), np.uint32), np.zeros((2, 3), np.float32))


class TestManifest:
    def test_roundtrip(self, tmp_path):
        (tmp_path / "a.mile").write_bytes(b"")
        manifest = tmp_path / "manifest.json"
        manifest.write_text(
            '[{"slide_id": "a", "store_path": "a.mile", "her2_score": 2, "split": "train"}]')
        records = load_manifest(manifest)
        assert records[0].slide_id == "a"
        assert records[0].her2_score == 2
        assert records[0].store_path == tmp_path / "a.mile"
        assert records[0].split == "train"

    def test_unknown_key_rejected(self, tmp_path):
        manifest = tmp_path / "m.json"
        manifest.write_text('[{"slide_id": "a", "her2_score": 1, "oops": 1, "store_path": "x"}]')
        with pytest.raises(ConfigError, match="unknown keys"):
            load_manifest(manifest)

    def test_score_out_of_range_rejected(self, tmp_path):
        manifest = tmp_path / "m.json"
        manifest.write_text('[{"slide_id": "a", "her2_score": 4, "store_path": "x"}]')
        with pytest.raises(ConfigError, match="her2_score"):
            load_manifest(manifest)

    def test_missing_paths_rejected(self, tmp_path):
        manifest = tmp_path / "m.json"
        manifest.write_text('[{"slide_id": "a", "her2_score": 1}]')
        with pytest.raises(ConfigError, match="image_path or store_path"):
            load_manifest(manifest)

    def test_duplicate_slide_id_rejected(self, tmp_path):
        manifest = tmp_path / "m.json"
        manifest.write_text(
            '[{"slide_id": "a", "her2_score": 1, "store_path": "x"},'
            ' {"slide_id": "a", "her2_score": 2, "store_path": "y"}]')
        with pytest.raises(ConfigError, match="duplicate slide_id"):
            load_manifest(manifest)
