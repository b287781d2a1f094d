import numpy as np
import pytest

from attnmvs.fileio import (DataFormatError, read_key_value_file, read_pfm,
                            read_ply, read_tensor_archive, write_key_value_file,
                            write_pfm, write_ply, write_tensor_archive)


class TestPfm:
    def test_roundtrip_is_bit_exact(self, tmp_path, rng):
        data = rng.normal(size=(6, 9)).astype(np.float32)
        path = tmp_path / "depth.pfm"
        write_pfm(path, data)
        loaded = read_pfm(path)
        assert loaded.dtype == np.float32
        assert np.array_equal(loaded, data)

    def test_header_is_little_endian_negative_scale(self, tmp_path):
        path = tmp_path / "d.pfm"
        write_pfm(path, np.zeros((2, 3), dtype=np.float32))
        header = path.read_bytes().split(b"\n")[:3]
        assert header[0] == b"Pf"
        assert header[1] == b"3 2"
        assert float(header[2]) == -1.0

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(DataFormatError):
            write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 3)))

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.pfm"
        path.write_bytes(b"JUNK\n1 1\n-1.0\n\x00\x00\x00\x00")
        with pytest.raises(DataFormatError):
            read_pfm(path)

    def test_deterministic_bytes(self, tmp_path, rng):
        data = rng.normal(size=(4, 4)).astype(np.float32)
        write_pfm(tmp_path / "a.pfm", data)
        write_pfm(tmp_path / "b.pfm", data)
        assert (tmp_path / "a.pfm").read_bytes() == (tmp_path / "b.pfm").read_bytes()


class TestPly:
    def test_binary_roundtrip(self, tmp_path, rng):
        points = rng.normal(size=(50, 3)) * 100.0
        colors = rng.integers(0, 256, size=(50, 3)).astype(np.uint8)
        path = tmp_path / "cloud.ply"
        write_ply(path, points, colors)
        loaded_points, loaded_colors = read_ply(path)
        assert np.allclose(loaded_points, points, atol=1e-4)  # float32 storage
        assert np.array_equal(loaded_colors, colors)

    def test_reads_ascii(self, tmp_path):
        path = tmp_path / "ascii.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n1 2 3\n4 5 6\n")
        points, colors = read_ply(path)
        assert np.array_equal(points, [[1, 2, 3], [4, 5, 6]])
        assert colors is None

    def test_rejects_missing_coordinates(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex 1\n"
                        "property float x\nproperty float y\nend_header\n1 2\n")
        with pytest.raises(DataFormatError, match="'z'"):
            read_ply(path)


class TestTensorArchive:
    def test_roundtrip(self, tmp_path, rng):
        tensors = {
            "extractor.enc0.weight": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
            "meta.step": np.asarray(17.0, dtype=np.float32),
        }
        path = tmp_path / "ckpt.ntar"
        write_tensor_archive(path, tensors)
        loaded = read_tensor_archive(path)
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert np.array_equal(loaded[name], tensors[name])
            assert loaded[name].shape == tensors[name].shape

    def test_float64_payloads_become_float32(self, tmp_path):
        write_tensor_archive(tmp_path / "a.ntar", {"x": np.array([1.0 / 3.0])})
        loaded = read_tensor_archive(tmp_path / "a.ntar")
        assert loaded["x"].dtype == np.float32

    def test_bytes_are_deterministic_and_name_sorted(self, tmp_path, rng):
        t1 = {"b": rng.normal(size=3), "a": rng.normal(size=2)}
        t2 = dict(reversed(list(t1.items())))
        write_tensor_archive(tmp_path / "1.ntar", t1)
        write_tensor_archive(tmp_path / "2.ntar", t2)
        assert (tmp_path / "1.ntar").read_bytes() == (tmp_path / "2.ntar").read_bytes()

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ntar"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataFormatError):
            read_tensor_archive(path)


class TestKeyValueFiles:
    def test_roundtrip_with_comments(self, tmp_path):
        path = tmp_path / "config.txt"
        path.write_text("# a comment\nlearning_rate = 0.0016\n\n"
                        "depth_counts = 32,16,8  # inline\n")
        values = read_key_value_file(path)
        assert values == {"learning_rate": "0.0016", "depth_counts": "32,16,8"}

    def test_write_then_read(self, tmp_path):
        path = tmp_path / "c.txt"
        write_key_value_file(path, {"seed": 7, "name": "run"})
        assert read_key_value_file(path) == {"seed": "7", "name": "run"}

    def test_malformed_line_reports_location(self, tmp_path):
        path = tmp_path / "broken.txt"
        path.write_text("fine = 1\nnot a pair\n")
        with pytest.raises(DataFormatError, match="broken.txt:2"):
            read_key_value_file(path)
