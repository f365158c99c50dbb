"""Container serialization, validation and cross-attention fusion tests."""

import io
import json
import struct

import numpy as np
import pytest

from iseg.attn import ShapeError, TokenMeta, attention_from_qk, category_enhanced_attention
from iseg.dumpio import (
    MAGIC,
    VERSION,
    AttnDump,
    CrossLayerRecord,
    DumpFormatError,
    DumpValidationError,
    bilinear_resize,
    fuse_cross_attention,
    read_dump,
    write_dump,
)

from dumpbuild import build_dump


def roundtrip(dump):
    buf = io.BytesIO()
    write_dump(dump, buf)
    buf.seek(0)
    return read_dump(buf), buf.getvalue()


def assert_dumps_equal(a, b):
    assert a.image_id == b.image_id
    assert a.timestep == b.timestep
    assert a.pathway == b.pathway
    assert a.gamma_applied == b.gamma_applied
    assert a.image_size == b.image_size
    assert a.self_attention.side == b.self_attention.side
    np.testing.assert_array_equal(
        a.self_attention.data.astype(np.float32),
        b.self_attention.data.astype(np.float32))
    assert len(a.cross_layers) == len(b.cross_layers)
    for la, lb in zip(a.cross_layers, b.cross_layers):
        assert la.resolution == lb.resolution
        assert la.d == lb.d
        np.testing.assert_array_equal(la.q, lb.q)
        np.testing.assert_array_equal(la.k, lb.k)
    assert a.token_meta == b.token_meta


class TestRoundtrip:
    def test_minimal_dump(self):
        sa = np.full((4, 4), 0.25, dtype=np.float32)
        dump = AttnDump(
            image_id="tiny",
            self_attention=__import__("iseg").SelfAttentionMap(sa, (2, 2)),
            cross_layers=[CrossLayerRecord((2, 2), np.zeros((4, 3), np.float32),
                                           np.zeros((2, 3), np.float32), 3.0)],
            token_meta=TokenMeta(("a", "b"), frozenset({0})),
        )
        back, _ = roundtrip(dump)
        assert_dumps_equal(dump, back)

    def test_structural_equality(self, small_dump):
        back, _ = roundtrip(small_dump)
        assert_dumps_equal(small_dump, back)

    def test_write_read_write_is_byte_identical(self, small_dump):
        back, raw1 = roundtrip(small_dump)
        buf = io.BytesIO()
        write_dump(back, buf)
        assert buf.getvalue() == raw1

    def test_image_size_and_pathway_survive(self):
        dump = build_dump(seed=1, image_size=(128, 128),
                          pathway="embedding-scaling", gamma_applied=1.6)
        back, _ = roundtrip(dump)
        assert back.image_size == (128, 128)
        assert back.pathway == "embedding-scaling"
        assert back.gamma_applied == 1.6


class TestReadValidation:
    def test_bad_magic(self, small_dump):
        _, raw = roundtrip(small_dump)
        bad = b"NOTADUMP" + raw[8:]
        with pytest.raises(DumpFormatError, match="magic"):
            read_dump(io.BytesIO(bad))

    def test_unknown_version(self, small_dump):
        _, raw = roundtrip(small_dump)
        bad = raw[:8] + struct.pack("<I", VERSION + 1) + raw[12:]
        with pytest.raises(DumpFormatError, match="version"):
            read_dump(io.BytesIO(bad))

    def test_truncated_header(self, small_dump):
        _, raw = roundtrip(small_dump)
        with pytest.raises(DumpFormatError, match="truncated"):
            read_dump(io.BytesIO(raw[:20]))

    def test_truncated_payload(self, small_dump):
        _, raw = roundtrip(small_dump)
        with pytest.raises(DumpFormatError, match="truncated|payload"):
            read_dump(io.BytesIO(raw[:-40]))

    def test_nan_entry_rejected(self, small_dump):
        layer = small_dump.cross_layers[0]
        layer.q[0, 0] = np.nan
        buf = io.BytesIO()
        write_dump(small_dump, buf)
        buf.seek(0)
        with pytest.raises(DumpValidationError, match="NaN"):
            read_dump(buf)

    def test_non_stochastic_self_attention_rejected(self, small_dump):
        small_dump.self_attention.data[0] *= 0.5  # row sums to 0.5
        buf = io.BytesIO()
        write_dump(small_dump, buf)
        buf.seek(0)
        with pytest.raises(DumpValidationError, match="rows deviate"):
            read_dump(buf)

    def test_declared_length_mismatch_names_field(self, small_dump):
        _, raw = roundtrip(small_dump)
        header_len = struct.unpack("<I", raw[12:16])[0]
        header = json.loads(raw[16:16 + header_len].decode())
        header["tensors"][0]["length"] -= 4
        new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        patched = raw[:12] + struct.pack("<I", len(new_header)) + new_header \
            + raw[16 + header_len:]
        with pytest.raises(DumpFormatError, match="self_attention"):
            read_dump(io.BytesIO(patched))

    def test_header_not_json(self, small_dump):
        _, raw = roundtrip(small_dump)
        header_len = struct.unpack("<I", raw[12:16])[0]
        patched = raw[:16] + b"x" * header_len + raw[16 + header_len:]
        with pytest.raises(DumpFormatError, match="JSON"):
            read_dump(io.BytesIO(patched))


class TestConstructorValidation:
    def test_timestep_must_be_positive(self, small_dump):
        with pytest.raises(ValueError):
            AttnDump("x", small_dump.self_attention, small_dump.cross_layers,
                     small_dump.token_meta, timestep=0)

    def test_needs_cross_layers(self, small_dump):
        with pytest.raises(ValueError):
            AttnDump("x", small_dump.self_attention, [], small_dump.token_meta)

    def test_token_count_consistency(self, small_dump):
        bad_meta = TokenMeta(("a",), frozenset({0}))
        with pytest.raises(ShapeError):
            AttnDump("x", small_dump.self_attention, small_dump.cross_layers, bad_meta)

    def test_self_attention_not_below_top_level(self, small_dump):
        import iseg
        low = iseg.SelfAttentionMap(np.full((16, 16), 1 / 16, np.float32), (4, 4))
        with pytest.raises(ShapeError):
            AttnDump("x", low, small_dump.cross_layers, small_dump.token_meta)

    def test_qk_dim_mismatch(self):
        with pytest.raises(ShapeError):
            CrossLayerRecord((2, 2), np.zeros((4, 3), np.float32),
                             np.zeros((2, 4), np.float32), 3.0)


class TestBilinearResize:
    def test_identity_when_same_size(self):
        rng = np.random.default_rng(0)
        grid = rng.random((8, 8, 3))
        np.testing.assert_array_equal(bilinear_resize(grid, (8, 8)), grid)

    def test_constant_preserved(self):
        grid = np.full((4, 4, 2), 3.5)
        np.testing.assert_allclose(bilinear_resize(grid, (9, 9)), 3.5)

    def test_mass_of_linear_ramp(self):
        # a linear ramp stays linear under bilinear interpolation
        ramp = np.linspace(0, 1, 8)[None, :, None] * np.ones((8, 1, 1))
        up = bilinear_resize(ramp, (8, 16))
        diffs = np.diff(up[0, 1:-1, 0])
        np.testing.assert_allclose(diffs, diffs[0], atol=1e-12)

    def test_preserves_nonnegativity(self):
        rng = np.random.default_rng(1)
        grid = rng.random((5, 7, 2))
        out = bilinear_resize(grid, (13, 11))
        assert (out >= 0).all()


class TestFuseCrossAttention:
    def test_single_level_equals_upsampled_layer(self, small_dump):
        meta = small_dump.token_meta
        stack = fuse_cross_attention(small_dump, meta, {(8, 8)})
        layer = small_dump.cross_layers[0]
        amap = category_enhanced_attention(layer.q.astype(np.float64),
                                           layer.k.astype(np.float64), meta, layer.d)
        t = meta.token_count
        up = bilinear_resize(amap.reshape(8, 8, t), (16, 16)).reshape(256, t)
        np.testing.assert_allclose(stack.fused, up, atol=1e-12)

    def test_two_identical_layers_fuse_to_either(self):
        dump = build_dump(seed=5, levels=((16, 16),))
        layer = dump.cross_layers[0]
        dump.cross_layers.append(CrossLayerRecord((16, 16), layer.q.copy(),
                                                  layer.k.copy(), layer.d))
        stack = fuse_cross_attention(dump, dump.token_meta)
        single = fuse_cross_attention(
            build_dump(seed=5, levels=((16, 16),)), dump.token_meta)
        np.testing.assert_allclose(stack.fused, single.fused, atol=1e-12)

    def test_level_choice_changes_fusion(self, small_dump):
        meta = small_dump.token_meta
        both = fuse_cross_attention(small_dump, meta, {(8, 8), (16, 16)})
        only32 = fuse_cross_attention(small_dump, meta, {(16, 16)})
        assert not np.allclose(both.fused, only32.fused)

    def test_missing_level_rejected(self, small_dump):
        with pytest.raises(ValueError, match="not in dump"):
            fuse_cross_attention(small_dump, small_dump.token_meta, {(32, 32)})

    def test_per_layer_rows_stochastic_fused_nonnegative(self, small_dump):
        stack = fuse_cross_attention(small_dump, small_dump.token_meta)
        for _, amap in stack.layers:
            np.testing.assert_allclose(amap.sum(axis=1), 1.0, atol=1e-5)
        assert (stack.fused >= 0).all()

    def test_gamma_one_matches_plain_attention(self, small_dump):
        meta = TokenMeta(small_dump.token_meta.tokens,
                         small_dump.token_meta.category_indices,
                         small_dump.token_meta.background_indices, gamma=1.0)
        stack = fuse_cross_attention(small_dump, meta, {(16, 16)})
        layer = small_dump.cross_layers[1]
        plain = attention_from_qk(layer.q.astype(np.float64),
                                  layer.k.astype(np.float64), layer.d)
        np.testing.assert_allclose(stack.fused, plain, atol=1e-6)
