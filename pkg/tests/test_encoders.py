import numpy as np
import pytest

from tijepa.encoders import (
    BOS_ID,
    EOS_ID,
    EncoderConfig,
    ImageEncoder,
    TextEncoder,
    detokenize,
    load_image,
    patchify,
    read_ppm,
    read_rawt,
    sincos_pos_1d,
    sincos_pos_2d,
    tokenize_text,
    unpatchify,
    write_ppm,
    write_rawt,
)
from tijepa.errors import DataError, ShapeError


def small_cfg(**overrides):
    base = dict(patch_size=8, embed_dim=16, depth=1, heads=2, max_text_len=16, frozen=True)
    base.update(overrides)
    return EncoderConfig(**base)


class TestPatchify:
    def test_paper_scale_grid(self):
        img = np.random.default_rng(0).uniform(0, 1, (3, 224, 224)).astype(np.float32)
        patches = patchify(img, 16)
        assert patches.shape == (196, 768)

    def test_desk_scale_grid(self):
        img = np.zeros((3, 64, 64), dtype=np.float32)
        assert patchify(img, 8).shape == (64, 192)

    def test_constant_image_gives_identical_rows(self):
        img = np.full((3, 16, 16), 0.25, dtype=np.float32)
        patches = patchify(img, 8)
        for row in patches:
            np.testing.assert_array_equal(row, patches[0])

    def test_roundtrip_bit_exact(self):
        img = np.random.default_rng(1).uniform(0, 1, (3, 24, 40)).astype(np.float32)
        patches = patchify(img, 8)
        restored = unpatchify(patches, 3, 5, 8)
        np.testing.assert_array_equal(restored, img)

    def test_non_divisible_dimensions(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((3, 30, 32), dtype=np.float32), 8)


class TestPositions:
    def test_components_bounded(self):
        pos = sincos_pos_2d(6, 9, 16)
        assert pos.min() >= -1.0 and pos.max() <= 1.0

    def test_no_collisions_up_to_64x64(self):
        pos = sincos_pos_2d(64, 64, 16).astype(np.float64)
        unique = {row.tobytes() for row in pos}
        assert len(unique) == 64 * 64

    def test_single_cell_grid(self):
        pos = sincos_pos_2d(1, 1, 8)
        assert pos.shape == (1, 8)
        half = 4
        np.testing.assert_array_equal(pos[0, :half], sincos_pos_1d(1, half)[0])

    def test_dim_must_divide_by_four(self):
        with pytest.raises(ShapeError):
            sincos_pos_2d(2, 2, 6)


class TestTokenizer:
    def test_empty_caption(self):
        assert tokenize_text("", 16) == [BOS_ID, EOS_ID]

    def test_byte_values(self):
        assert tokenize_text("ab", 16) == [256, 97, 98, 257]

    def test_truncation_cuts_mid_sequence(self):
        ids = tokenize_text("x" * 1000, 16)
        assert len(ids) == 16
        assert ids[-1] != EOS_ID

    def test_roundtrip(self):
        text = "a red square"
        assert detokenize(tokenize_text(text, 32)) == text.encode()

    def test_roundtrip_truncated(self):
        ids = tokenize_text("abcdef", 4)
        assert detokenize(ids) == b"abc"


class TestImageEncoder:
    def test_output_shape_full_visibility(self):
        enc = ImageEncoder(small_cfg(), np.random.default_rng(0))
        img = np.random.default_rng(1).uniform(0, 1, (3, 64, 64)).astype(np.float32)
        out = enc.encode(img)
        assert out.shape == (64, 16)

    def test_subset_matches_full_at_depth_zero(self):
        enc = ImageEncoder(small_cfg(depth=0), np.random.default_rng(0))
        img = np.random.default_rng(1).uniform(0, 1, (3, 64, 64)).astype(np.float32)
        full = enc.encode(img).data
        subset = enc.encode(img, visible=range(10)).data
        np.testing.assert_array_equal(subset, full[:10])

    def test_subset_differs_from_full_with_depth(self):
        enc = ImageEncoder(small_cfg(depth=1), np.random.default_rng(0))
        img = np.random.default_rng(1).uniform(0, 1, (3, 64, 64)).astype(np.float32)
        full = enc.encode(img).data
        subset = enc.encode(img, visible=range(10)).data
        assert np.abs(subset - full[:10]).max() > 1e-6

    def test_visible_rows_follow_ascending_patch_index(self):
        enc = ImageEncoder(small_cfg(depth=0), np.random.default_rng(0))
        img = np.random.default_rng(2).uniform(0, 1, (3, 64, 64)).astype(np.float32)
        shuffled = enc.encode(img, visible=[9, 3, 27]).data
        ordered = enc.encode(img, visible=[3, 9, 27]).data
        np.testing.assert_array_equal(shuffled, ordered)

    def test_out_of_range_patch_index(self):
        enc = ImageEncoder(small_cfg(), np.random.default_rng(0))
        img = np.zeros((3, 64, 64), dtype=np.float32)
        with pytest.raises(ShapeError):
            enc.encode(img, visible=[64])

    def test_frozen_parameters_not_trainable(self):
        enc = ImageEncoder(small_cfg(frozen=True), np.random.default_rng(0))
        assert all(not p.requires_grad for p in enc.named_parameters().values())

    def test_unfrozen_parameters_trainable(self):
        enc = ImageEncoder(small_cfg(frozen=False), np.random.default_rng(0))
        assert all(p.requires_grad for p in enc.named_parameters().values())

    def test_deterministic(self):
        img = np.random.default_rng(3).uniform(0, 1, (3, 64, 64)).astype(np.float32)
        a = ImageEncoder(small_cfg(), np.random.default_rng(5)).encode(img).data
        b = ImageEncoder(small_cfg(), np.random.default_rng(5)).encode(img).data
        np.testing.assert_array_equal(a, b)


class TestTextEncoder:
    def test_one_row_per_token(self):
        enc = TextEncoder(small_cfg(), np.random.default_rng(0))
        ids = tokenize_text("hello", 16)
        assert enc.encode(ids).shape == (len(ids), 16)

    def test_identical_captions_identical_outputs(self):
        enc = TextEncoder(small_cfg(), np.random.default_rng(0))
        ids = tokenize_text("same text", 16)
        np.testing.assert_array_equal(enc.encode(ids).data, enc.encode(ids).data)

    def test_position_sensitivity(self):
        enc = TextEncoder(small_cfg(), np.random.default_rng(0))
        a = enc.encode(tokenize_text("ab", 16)).data
        b = enc.encode(tokenize_text("ba", 16)).data
        assert np.abs(a - b).max() > 1e-6

    def test_rejects_empty_ids(self):
        enc = TextEncoder(small_cfg(), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            enc.encode([])

    def test_rejects_out_of_range_ids(self):
        enc = TextEncoder(small_cfg(), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            enc.encode([258, 0])


class TestConfigValidation:
    def test_heads_must_divide(self):
        with pytest.raises(ShapeError):
            small_cfg(embed_dim=16, heads=3).validate()

    def test_patch_size_positive(self):
        with pytest.raises(ShapeError):
            small_cfg(patch_size=0).validate()


class TestImageFiles:
    def test_ppm_roundtrip(self, tmp_path):
        img = (np.arange(3 * 4 * 4).reshape(3, 4, 4) % 256 / 255.0).astype(np.float32)
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        np.testing.assert_allclose(read_ppm(path), img, atol=1 / 255.0 / 2)

    def test_ppm_with_header_comment(self, tmp_path):
        path = tmp_path / "c.ppm"
        pixels = bytes(range(12))
        path.write_bytes(b"P6\n# a comment\n2 2\n255\n" + pixels)
        img = read_ppm(path)
        assert img.shape == (3, 2, 2)

    def test_ppm_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n1 1\n255\n000")
        with pytest.raises(DataError):
            read_ppm(path)

    def test_ppm_truncated(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n2 2\n255\n\x00\x00")
        with pytest.raises(DataError):
            read_ppm(path)

    def test_rawt_roundtrip_bit_exact(self, tmp_path):
        arr = np.random.default_rng(0).uniform(0, 1, (3, 8, 8)).astype(np.float32)
        path = tmp_path / "img.rawt"
        write_rawt(path, arr)
        np.testing.assert_array_equal(read_rawt(path), arr)

    def test_rawt_bad_magic(self, tmp_path):
        path = tmp_path / "bad.rawt"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(DataError):
            read_rawt(path)

    def test_load_image_dispatches_by_magic(self, tmp_path):
        arr = np.random.default_rng(1).uniform(0, 1, (3, 4, 4)).astype(np.float32)
        ppm, rawt = tmp_path / "a.ppm", tmp_path / "b.rawt"
        write_ppm(ppm, arr)
        write_rawt(rawt, arr)
        assert load_image(ppm).shape == (3, 4, 4)
        np.testing.assert_array_equal(load_image(rawt), arr)

    def test_load_image_rejects_out_of_range_rawt(self, tmp_path):
        path = tmp_path / "big.rawt"
        write_rawt(path, np.full((3, 2, 2), 7.0, dtype=np.float32))
        with pytest.raises(DataError):
            load_image(path)

    def test_load_image_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_image(tmp_path / "absent.ppm")
