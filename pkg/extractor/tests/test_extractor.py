"""Extractor tests: alignment, capture, conformance, determinism, and the
end-to-end refinement sanity check."""

import hashlib
import json
import struct

import numpy as np
import pytest
import torch

from iseg.cli import main as iseg_main
from iseg.dumpio import read_dump_file

from iseg_extractor import (
    ExtractionJob,
    TokenAlignmentError,
    align_tokens,
    build_prompt,
    extract,
    init_toy_checkpoint,
    load_bundle,
)
from iseg_extractor.cli import main as extract_main


def split_container(path):
    """(header_json, payload_bytes) of a dump file."""
    raw = path.read_bytes()
    header_len = struct.unpack("<I", raw[12:16])[0]
    header = json.loads(raw[16:16 + header_len].decode())
    return header, raw[16 + header_len:]


class TestAlignment:
    def test_single_token_category(self, bundle):
        prompt = build_prompt(["cat"])
        groups, background, tokens = align_tokens(prompt, ["cat"], bundle.tokenizer)
        assert len(groups) == 1 and len(groups[0]) == 1
        assert tokens[groups[0][0]] == "cat</w>"

    def test_category_absent_raises(self, bundle):
        with pytest.raises(TokenAlignmentError, match="zebra"):
            align_tokens("a photograph of cat", ["zebra"], bundle.tokenizer)

    def test_multi_token_category(self, bundle):
        # "plant" is in the vocabulary but "pottedplant" is not, so the
        # name spans several byte-pair pieces
        prompt = build_prompt(["pottedplant"])
        groups, _, tokens = align_tokens(prompt, ["pottedplant"], bundle.tokenizer)
        assert len(groups[0]) >= 2

    def test_positions_decode_back_to_name(self, bundle):
        prompt = build_prompt(["cat", "pottedplant"])
        enc = bundle.tokenizer(prompt, padding="max_length", max_length=77,
                               truncation=True)["input_ids"]
        groups, _, _ = align_tokens(prompt, ["cat", "pottedplant"], bundle.tokenizer)
        for name, group in zip(["cat", "pottedplant"], groups):
            decoded = bundle.tokenizer.decode([enc[i] for i in group])
            assert decoded.replace(" ", "").lower() == name.lower()

    def test_background_word_positions(self, bundle):
        prompt = build_prompt(["cat"])
        _, background, tokens = align_tokens(prompt, ["cat"], bundle.tokenizer)
        assert background, "template ends with a background word"
        assert all(tokens[i] == "background</w>" for i in background)


class TestExtract:
    def test_dump_passes_container_validation(self, bundle, sample_image, tmp_path):
        job = ExtractionJob(image=sample_image, categories=["cat", "dog"], noise_seed=3)
        out = extract(job, bundle, tmp_path / "a.dump")
        dump = read_dump_file(out)  # full validation happens on read
        assert dump.timestep == 100
        assert dump.image_size == (160, 200)
        assert dump.self_attention.side == (16, 16)
        assert {l.resolution for l in dump.cross_layers} == {(4, 4), (8, 8)}
        assert dump.token_meta.category_groups is not None

    def test_row_sums_exactly_one(self, bundle, sample_image, tmp_path):
        job = ExtractionJob(image=sample_image, categories=["cat"], noise_seed=1)
        dump = read_dump_file(extract(job, bundle, tmp_path / "b.dump"))
        np.testing.assert_allclose(dump.self_attention.data.sum(axis=1), 1.0,
                                   atol=1e-6)

    def test_deterministic_across_runs(self, bundle, sample_image, tmp_path):
        job = ExtractionJob(image=sample_image, categories=["cat", "dog"],
                            noise_seed=7)
        d1 = extract(job, bundle, tmp_path / "r1.dump").read_bytes()
        d2 = extract(job, bundle, tmp_path / "r2.dump").read_bytes()
        assert hashlib.sha256(d1).hexdigest() == hashlib.sha256(d2).hexdigest()

    def test_noise_seed_changes_tensors(self, bundle, sample_image, tmp_path):
        j1 = ExtractionJob(image=sample_image, categories=["cat"], noise_seed=1)
        j2 = ExtractionJob(image=sample_image, categories=["cat"], noise_seed=2)
        _, p1 = split_container(extract(j1, bundle, tmp_path / "s1.dump"))
        _, p2 = split_container(extract(j2, bundle, tmp_path / "s2.dump"))
        assert p1 != p2

    def test_manifest_records_provenance(self, bundle, sample_image, tmp_path):
        job = ExtractionJob(image=sample_image, categories=["cat"], noise_seed=5)
        out = extract(job, bundle, tmp_path / "m.dump")
        manifest = json.loads(
            out.with_suffix(out.suffix + ".manifest.json").read_text())
        assert manifest["noise_seed"] == 5
        assert len(manifest["noise_pred_sha256"]) == 64
        assert manifest["self_attention_block"].startswith("up.")
        assert manifest["captured_blocks"]

    def test_embedding_scaling_changes_tensors(self, bundle, sample_image, tmp_path):
        j_scaled = ExtractionJob(image=sample_image, categories=["cat"],
                                 gamma=1.6, pathway="embedding-scaling", noise_seed=1)
        j_plain = ExtractionJob(image=sample_image, categories=["cat"],
                                gamma=1.6, pathway="offline", noise_seed=1)
        _, p_scaled = split_container(extract(j_scaled, bundle, tmp_path / "es.dump"))
        _, p_plain = split_container(extract(j_plain, bundle, tmp_path / "pl.dump"))
        assert p_scaled != p_plain

    def test_offline_dump_carries_requested_gamma(self, bundle, sample_image, tmp_path):
        job = ExtractionJob(image=sample_image, categories=["cat"], gamma=1.8,
                            pathway="offline", noise_seed=1)
        dump = read_dump_file(extract(job, bundle, tmp_path / "g.dump"))
        assert dump.token_meta.gamma == 1.8
        assert dump.gamma_applied == 1.0

    def test_invalid_jobs_rejected(self, sample_image):
        with pytest.raises(ValueError):
            ExtractionJob(image=sample_image, categories=[])
        with pytest.raises(ValueError):
            ExtractionJob(image=sample_image, categories=["cat"], timestep=0)
        with pytest.raises(ValueError):
            ExtractionJob(image=sample_image, categories=["cat"], pathway="magic")
        with pytest.raises(ValueError):
            ExtractionJob(image=sample_image, categories=["cat"], gamma=0.5)


class TestCheckpointRoundtrip:
    def test_save_load_reproduces_extraction(self, bundle, sample_image, tmp_path):
        ckpt = init_toy_checkpoint(tmp_path / "ckpt", seed=0, image_size=128)
        loaded = load_bundle(ckpt)
        job = ExtractionJob(image=sample_image, categories=["cat"], noise_seed=9)
        d1 = extract(job, bundle, tmp_path / "orig.dump").read_bytes()
        d2 = extract(job, loaded, tmp_path / "loaded.dump").read_bytes()
        assert d1 == d2

    def test_missing_weights_message(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="init-toy"):
            load_bundle(tmp_path / "nowhere")


class TestCli:
    def test_init_toy_and_extract(self, sample_image, tmp_path):
        ckpt = tmp_path / "ckpt"
        assert extract_main(["init-toy", "--out", str(ckpt), "--seed", "0"]) == 0
        out = tmp_path / "cli.dump"
        assert extract_main([
            "extract", "--image", str(sample_image), "--categories", "cat,dog",
            "--model", str(ckpt), "--out", str(out), "--seed", "3"]) == 0
        dump = read_dump_file(out)
        assert dump.image_id == "sample"

    def test_missing_model_fails(self, sample_image, tmp_path):
        assert extract_main([
            "extract", "--image", str(sample_image), "--categories", "cat",
            "--model", str(tmp_path / "none"), "--out", str(tmp_path / "x.dump")]) == 1


class TestSecondaryAcceptance:
    """The [SECONDARY] gate: conformance, gamma=1 bit-identity, and the
    refinement foreground sanity band."""

    def test_gamma_one_scaling_equals_unscaled_bit_for_bit(self, bundle,
                                                           sample_image, tmp_path):
        scaled = extract(ExtractionJob(image=sample_image, categories=["cat", "dog"],
                                       gamma=1.0, pathway="embedding-scaling",
                                       noise_seed=3),
                         bundle, tmp_path / "one.dump")
        plain = extract(ExtractionJob(image=sample_image, categories=["cat", "dog"],
                                      gamma=1.0, pathway="offline", noise_seed=3),
                        bundle, tmp_path / "none.dump")
        h_scaled, p_scaled = split_container(scaled)
        h_plain, p_plain = split_container(plain)
        # every captured tensor byte matches; headers differ only in the
        # recorded pathway label
        assert p_scaled == p_plain
        assert h_scaled["tensors"] == h_plain["tensors"]
        assert h_scaled["token_meta"] == h_plain["token_meta"]
        print("[ACCEPTANCE] extractor-gamma1-bit-identity: PASS")

    def test_refine_with_reference_defaults_lands_in_sanity_band(
            self, bundle, sample_image, tmp_path):
        from PIL import Image

        job = ExtractionJob(image=sample_image, categories=["cat", "dog"],
                            gamma=1.6, timestep=100, noise_seed=3)
        dump_path = extract(job, bundle, tmp_path / "band.dump")
        dump = read_dump_file(dump_path)  # conformance: validates on read
        assert dump.timestep == 100

        out = tmp_path / "refined"
        rc = iseg_main(["refine", str(dump_path), "--out", str(out),
                        "--iters", "10", "--lambda", "0.01", "--gamma", "1.6"])
        assert rc == 0
        mask = np.asarray(Image.open(out / "mask.png"))
        fg = (mask > 0).mean()
        assert 0.01 <= fg <= 0.90, f"foreground fraction {fg:.4f} out of band"
        print(f"[ACCEPTANCE] extractor-refine-sanity-band: PASS (fg {fg:.3f})")
