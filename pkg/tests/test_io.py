import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irisadv import io
from irisadv.surrogate import SurrogateConfig, build_surrogate


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestPGM:
    def test_round_trip_within_quantization(self, tmp_path, rng):
        img = rng.uniform(size=(16, 128))
        io.write_pgm(tmp_path / "a.pgm", img)
        back = io.read_pgm(tmp_path / "a.pgm")
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 1 / 65535

    def test_header_and_big_endian_samples(self, tmp_path):
        io.write_pgm(tmp_path / "a.pgm", np.array([[0.0, 1.0, 0.5]]))
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw.startswith(b"P5\n3 1\n65535\n")
        # 0.5 * 65535 = 32767.5 rounds to even 32768 = 0x8000
        assert raw.endswith(b"\x00\x00\xff\xff\x80\x00")

    def test_comments_in_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        np.testing.assert_array_equal(io.read_pgm(tmp_path / "c.pgm"), [[0.0, 1.0]])

    def test_truncated_payload_names_counts(self, tmp_path, rng):
        io.write_pgm(tmp_path / "t.pgm", rng.uniform(size=(4, 4)))
        raw = (tmp_path / "t.pgm").read_bytes()
        (tmp_path / "t.pgm").write_bytes(raw[:-5])
        with pytest.raises(io.FormatError) as err:
            io.read_pgm(tmp_path / "t.pgm")
        assert err.value.expected == "32 bytes" and err.value.actual == "27 bytes"
        assert "32 bytes" in str(err.value) and "27 bytes" in str(err.value)
        assert err.value.offset == len(raw) - 5

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(io.FormatError, match="bad magic") as err:
            io.read_pgm(tmp_path / "m.pgm")
        assert err.value.offset == 0

    def test_garbage_header_field(self, tmp_path):
        (tmp_path / "g.pgm").write_bytes(b"P5\n4 x\n255\n")
        with pytest.raises(io.FormatError) as err:
            io.read_pgm(tmp_path / "g.pgm")
        assert err.value.offset == 5

    def test_out_of_range_pixels_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            io.write_pgm(tmp_path / "x.pgm", np.array([[1.5]]))


class TestPBM:
    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 9), w=st.integers(1, 21), seed=st.integers(0, 2 ** 16))
    def test_round_trip_is_exact(self, tmp_path_factory, h, w, seed):
        bits = np.random.default_rng(seed).integers(0, 2, (h, w)).astype(np.uint8)
        path = tmp_path_factory.mktemp("pbm") / "b.pbm"
        io.write_pbm(path, bits)
        np.testing.assert_array_equal(io.read_pbm(path), bits)

    def test_row_padding(self, tmp_path):
        io.write_pbm(tmp_path / "p.pbm", np.array([[1, 0, 1], [0, 1, 0]]))
        assert (tmp_path / "p.pbm").read_bytes() == b"P4\n3 2\n\xa0\x40"

    def test_truncated(self, tmp_path):
        (tmp_path / "p.pbm").write_bytes(b"P4\n16 2\n\x00\x00\x00")
        with pytest.raises(io.FormatError, match="expected 4 bytes, got 3 bytes"):
            io.read_pbm(tmp_path / "p.pbm")

    def test_non_binary_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            io.write_pbm(tmp_path / "p.pbm", np.array([[2]]))


@pytest.fixture
def tiny_net():
    cfg = SurrogateConfig(height=8, width=16, n_filters=2, levels=2, channel_divisor=16)
    return build_surrogate(cfg, seed=3)


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path, tiny_net):
        tiny_net.stats["conv1"].running_var[:] = 1.25
        io.save_checkpoint(tmp_path / "n.irsg", tiny_net)
        back = io.load_checkpoint(tmp_path / "n.irsg")
        assert back.config == tiny_net.config
        a, b = tiny_net.state_dict(), back.state_dict()
        assert a.keys() == b.keys()
        for k in a:
            assert b[k].dtype == np.float32
            np.testing.assert_array_equal(a[k], b[k])

    def test_same_outputs_after_reload(self, tmp_path, tiny_net, rng):
        io.save_checkpoint(tmp_path / "n.irsg", tiny_net)
        back = io.load_checkpoint(tmp_path / "n.irsg")
        iris = rng.uniform(size=(3, 8, 16)).astype(np.float32)
        mask = np.ones_like(iris)
        np.testing.assert_array_equal(tiny_net.soft_codes(iris, mask), back.soft_codes(iris, mask))

    def test_layout(self, tmp_path, tiny_net):
        io.save_checkpoint(tmp_path / "n.irsg", tiny_net)
        raw = (tmp_path / "n.irsg").read_bytes()
        assert raw[:4] == b"IRSG"
        assert int.from_bytes(raw[4:8], "little") == io.CHECKPOINT_VERSION
        n = int.from_bytes(raw[8:12], "little")
        assert b'"channel_divisor": 16' in raw[12:12 + n]

    def test_deterministic_bytes(self, tmp_path, tiny_net):
        io.save_checkpoint(tmp_path / "a.irsg", tiny_net)
        io.save_checkpoint(tmp_path / "b.irsg", tiny_net)
        assert (tmp_path / "a.irsg").read_bytes() == (tmp_path / "b.irsg").read_bytes()

    @pytest.mark.parametrize("cut", [2, 10, 40, -3])
    def test_truncation_is_a_format_error(self, tmp_path, tiny_net, cut):
        io.save_checkpoint(tmp_path / "n.irsg", tiny_net)
        raw = (tmp_path / "n.irsg").read_bytes()
        (tmp_path / "n.irsg").write_bytes(raw[:cut])
        with pytest.raises(io.FormatError, match="truncated"):
            io.load_checkpoint(tmp_path / "n.irsg")

    def test_wrong_magic(self, tmp_path, tiny_net):
        io.save_checkpoint(tmp_path / "n.irsg", tiny_net)
        raw = (tmp_path / "n.irsg").read_bytes()
        (tmp_path / "n.irsg").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(io.FormatError, match="bad magic"):
            io.load_checkpoint(tmp_path / "n.irsg")

    def test_trailing_bytes(self, tmp_path, tiny_net):
        io.save_checkpoint(tmp_path / "n.irsg", tiny_net)
        with open(tmp_path / "n.irsg", "ab") as fh:
            fh.write(b"\x00")
        with pytest.raises(io.FormatError, match="trailing"):
            io.load_checkpoint(tmp_path / "n.irsg")


class TestTextFiles:
    def test_manifest_round_trip(self, tmp_path):
        rows = [(0, "L", 1, "images/a.pgm", "images/a.pbm"), (3, "R", 0, "b.pgm", "b.pbm")]
        io.write_manifest(tmp_path / "m.txt", rows)
        back = io.read_manifest(tmp_path / "m.txt")
        assert [(r["identity"], r["eye"], r["sample"], r["iris"], r["mask"]) for r in back] == rows

    def test_manifest_bad_row(self, tmp_path):
        (tmp_path / "m.txt").write_text("1\tL\n")
        with pytest.raises(io.FormatError, match="field count"):
            io.read_manifest(tmp_path / "m.txt")

    def test_csv_round_trip(self, tmp_path):
        io.write_csv(tmp_path / "x.csv", ["a", "b"], [(1, "0.5"), (2, "")])
        assert io.read_csv(tmp_path / "x.csv") == (["a", "b"], [["1", "0.5"], ["2", ""]])
