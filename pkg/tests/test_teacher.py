"""Teacher map constructors and the TIM interchange format."""

from pathlib import Path

import numpy as np
import pytest

from ivit.teacher import (
    TeacherMap,
    TimFormatError,
    classification_teacher,
    dense_teacher,
    mask_teacher,
    read_tim,
    write_tim,
)


class TestClassificationTeacher:
    def test_direct_evaluation(self):
        # d = max(0, fore - back) = [0.3, 0, 0.1]; normalized by 0.4.
        tmap = classification_teacher(np.array([0.5, 0.3, 0.2]),
                                      np.array([0.2, 0.4, 0.1]),
                                      grid_h=1, grid_w=3)
        np.testing.assert_allclose(tmap.values, [0.75, 0.0, 0.25], atol=1e-7)
        assert not tmap.degenerate

    def test_equal_inputs_degenerate_uniform(self):
        fore = np.full(4, 0.25)
        tmap = classification_teacher(fore, fore, grid_h=2, grid_w=2)
        np.testing.assert_allclose(tmap.values, 0.25)
        assert tmap.degenerate

    def test_onehot_identity(self):
        fore = np.zeros(9)
        fore[4] = 1.0
        tmap = classification_teacher(fore, np.zeros(9))
        expect = np.zeros(9)
        expect[4] = 1.0
        np.testing.assert_allclose(tmap.values, expect)

    def test_common_constant_invariance(self):
        rng = np.random.default_rng(0)
        fore = rng.random(16)
        back = rng.random(16)
        base = classification_teacher(fore, back)
        shifted = classification_teacher(fore + 0.7, back + 0.7)
        np.testing.assert_allclose(base.values, shifted.values, atol=1e-6)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="negative"):
            classification_teacher(np.array([-0.1, 1.0]), np.zeros(2))
        with pytest.raises(ValueError, match="non-finite"):
            classification_teacher(np.array([np.nan, 1.0]), np.zeros(2))
        with pytest.raises(ValueError, match="length mismatch"):
            classification_teacher(np.ones(3), np.ones(4))


class TestDenseTeacher:
    def test_single_object_equals_classification(self):
        rng = np.random.default_rng(1)
        obj = rng.random(16)
        back = rng.random(16)
        dense = dense_teacher([obj], back)
        cls = classification_teacher(obj, back)
        np.testing.assert_array_equal(dense.values, cls.values)

    def test_two_disjoint_onehots(self):
        a = np.zeros(16)
        a[2] = 1.0
        b = np.zeros(16)
        b[9] = 1.0
        tmap = dense_teacher([a, b], np.zeros(16))
        assert tmap.values[2] == pytest.approx(0.5)
        assert tmap.values[9] == pytest.approx(0.5)
        assert tmap.values.sum() == pytest.approx(1.0)

    def test_dominating_background_degenerates(self):
        objs = [np.full(4, 0.1)]
        tmap = dense_teacher(objs, np.full(4, 5.0), grid_h=2, grid_w=2)
        assert tmap.degenerate
        np.testing.assert_allclose(tmap.values, 0.25)

    def test_errors(self):
        with pytest.raises(ValueError, match="at least one"):
            dense_teacher([], np.ones(4))
        with pytest.raises(ValueError, match="length"):
            dense_teacher([np.ones(3)], np.ones(4))


class TestMaskTeacher:
    def test_uniform_over_masked(self):
        mask = np.zeros(16, dtype=np.uint8)
        mask[[1, 2, 5, 6]] = 1
        tmap = mask_teacher(mask, sigma=0.0)
        expect = np.zeros(16)
        expect[[1, 2, 5, 6]] = 0.25
        np.testing.assert_allclose(tmap.values, expect)

    def test_single_patch_onehot(self):
        mask = np.zeros(4, dtype=np.uint8)
        mask[3] = 1
        tmap = mask_teacher(mask, sigma=0.0, grid_h=2, grid_w=2)
        np.testing.assert_allclose(tmap.values, [0, 0, 0, 1])

    def test_noisy_deterministic_per_seed(self):
        mask = np.zeros(16, dtype=np.uint8)
        mask[[0, 5]] = 1
        a = mask_teacher(mask, sigma=0.1, seed=42)
        b = mask_teacher(mask, sigma=0.1, seed=42)
        np.testing.assert_array_equal(a.values, b.values)
        c = mask_teacher(mask, sigma=0.1, seed=43)
        assert not np.array_equal(a.values, c.values)

    def test_golden_vector(self):
        # Frozen once from mask_teacher(mask=[1,0,1,0], sigma=0.1, seed=7);
        # exact little-endian float32 bytes so the pin is bitwise.
        golden = np.frombuffer(
            bytes.fromhex("7a8fee3e4708643cf511f53e74f2293d"), dtype="<f4")
        mask = np.array([1, 0, 1, 0], dtype=np.uint8)
        tmap = mask_teacher(mask, sigma=0.1, seed=7, grid_h=2, grid_w=2)
        np.testing.assert_array_equal(tmap.values, golden)

    def test_validation(self):
        with pytest.raises(ValueError, match="at least one"):
            mask_teacher(np.zeros(4, dtype=np.uint8))
        with pytest.raises(ValueError, match="binary"):
            mask_teacher(np.array([0, 2, 0, 0]))
        with pytest.raises(ValueError, match="sigma"):
            mask_teacher(np.array([1, 0, 0, 0]), sigma=-1.0)

    def test_invariants_over_random_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = 16
            mask = (rng.random(n) < 0.3).astype(np.uint8)
            if mask.sum() == 0:
                mask[0] = 1
            sigma = float(rng.uniform(0, 0.5))
            tmap = mask_teacher(mask, sigma=sigma, seed=int(rng.integers(1 << 30)),
                                grid_h=4, grid_w=4)
            assert abs(tmap.values.sum() - 1.0) <= 1e-4
            assert np.all(tmap.values >= 0)


class TestTeacherMapType:
    def test_sum_and_negativity_enforced(self):
        with pytest.raises(TimFormatError, match="sum to 1"):
            TeacherMap(2, 2, np.array([0.5, 0.5, 0.5, 0.5]))
        with pytest.raises(TimFormatError, match=">= 0"):
            TeacherMap(2, 2, np.array([1.5, -0.5, 0.0, 0.0]))
        with pytest.raises(TimFormatError, match="values"):
            TeacherMap(2, 2, np.array([1.0, 0.0, 0.0]))

    def test_metadata_validation(self):
        vals = np.full(4, 0.25)
        with pytest.raises(TimFormatError, match="provenance"):
            TeacherMap(2, 2, vals, provenance="oracle")
        with pytest.raises(TimFormatError, match="prompt"):
            TeacherMap(2, 2, vals, prompt_id="9")


class TestTimFormat:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(3)
        for i in range(20):
            n = 64
            raw = rng.random(n).astype(np.float32) + 1e-3
            vals = raw / raw.sum()
            tmap = TeacherMap(8, 8, vals, provenance="vlm-probe", prompt_id="2")
            p = tmp_path / f"m{i}.tim"
            write_tim(tmap, p)
            back = read_tim(p)
            np.testing.assert_array_equal(back.values, tmap.values)
            assert (back.grid_h, back.grid_w) == (8, 8)
            assert back.provenance == "vlm-probe"
            assert back.prompt_id == "2"

    def test_file_size_header_plus_payload(self, tmp_path):
        tmap = TeacherMap(8, 8, np.full(64, 1 / 64))
        p = tmp_path / "u.tim"
        write_tim(tmap, p)
        # 20-byte header (magic, version, gh, gw, provenance, prompt,
        # 2 reserved) followed by 64 little-endian float32 values.
        assert p.stat().st_size == 20 + 4 * 64

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.tim"
        tmap = TeacherMap(2, 2, np.full(4, 0.25))
        write_tim(tmap, p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"XXXX"
        p.write_bytes(bytes(raw))
        with pytest.raises(TimFormatError, match="magic"):
            read_tim(p)

    def test_bad_version_rejected(self, tmp_path):
        p = tmp_path / "v.tim"
        write_tim(TeacherMap(2, 2, np.full(4, 0.25)), p)
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(TimFormatError, match="version"):
            read_tim(p)

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "t.tim"
        write_tim(TeacherMap(2, 2, np.full(4, 0.25)), p)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(TimFormatError, match="bytes"):
            read_tim(p)

    def test_unnormalized_payload_rejected(self, tmp_path):
        p = tmp_path / "n.tim"
        write_tim(TeacherMap(2, 2, np.full(4, 0.25)), p)
        raw = bytearray(p.read_bytes())
        raw[-16:] = np.full(4, 0.5, dtype="<f4").tobytes()
        p.write_bytes(bytes(raw))
        with pytest.raises(TimFormatError, match="sum"):
            read_tim(p)
