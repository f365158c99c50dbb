"""Single forward pass with attention capture, producing an AttnDump."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from iseg.attn import SelfAttentionMap, TokenMeta
from iseg.dumpio import AttnDump, CrossLayerRecord, write_dump_file

from .model import AttentionRecorder, DiffusionBundle
from .tokenize import DEFAULT_BACKGROUND_WORDS, align_tokens, build_prompt

DEFAULT_TIMESTEP = 100


@dataclass
class ExtractionJob:
    """One image/prompt extraction request."""

    image: str | Path
    categories: list[str]
    prompt: str | None = None  # built from the template when omitted
    background_words: tuple[str, ...] = DEFAULT_BACKGROUND_WORDS
    gamma: float = 1.6
    pathway: str = "offline"  # or "embedding-scaling"
    timestep: int = DEFAULT_TIMESTEP
    noise_seed: int = 0

    def __post_init__(self):
        if not self.categories:
            raise ValueError("need at least one category")
        if self.pathway not in ("offline", "embedding-scaling"):
            raise ValueError(f"unknown pathway {self.pathway!r}")
        if self.timestep < 1:
            raise ValueError("timestep must be >= 1")
        if self.gamma < 1.0:
            raise ValueError("gamma must be >= 1")


def load_image(path: str | Path, size: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Image file -> normalized (1, 3, size, size) tensor in [-1, 1]."""
    img = Image.open(path).convert("RGB")
    original = (img.height, img.width)
    resized = img.resize((size, size), resample=Image.BICUBIC)
    arr = np.asarray(resized, dtype=np.float32) / 255.0 * 2.0 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1)[None], original


def _pick_self_attention(recorder: AttentionRecorder) -> dict:
    """Highest-resolution decoder self-attention, last block wins."""
    decoder = [m for m in recorder.self_maps if m["tag"].startswith("up.")]
    if not decoder:
        raise RuntimeError("no decoder self-attention was recorded")
    top = max(r["resolution"][0] * r["resolution"][1] for r in decoder)
    last = [m for m in decoder if m["resolution"][0] * m["resolution"][1] == top][-1]
    return last


def _pick_cross_layers(recorder: AttentionRecorder, top_resolution) -> list[dict]:
    """Decoder cross-attention Q/K at every level below the working one."""
    picked = [c for c in recorder.cross_qk
              if c["tag"].startswith("up.") and tuple(c["resolution"]) != tuple(top_resolution)]
    if not picked:
        raise RuntimeError("no decoder cross-attention below the top level")
    return picked


@torch.no_grad()
def extract(job: ExtractionJob, bundle: DiffusionBundle, out_path: str | Path) -> Path:
    """Run one denoising forward pass and write a conforming dump.

    The predicted noise itself is discarded; its checksum lands in the
    sidecar manifest for provenance.
    """
    cfg = bundle.cfg
    bundle.eval()
    prompt = job.prompt or build_prompt(job.categories)
    groups, background, tokens = align_tokens(
        prompt, job.categories, bundle.tokenizer,
        background_words=job.background_words, max_tokens=cfg.max_tokens)

    image, original_size = load_image(job.image, cfg.image_size)
    latents = bundle.encode_image(image)

    enc = bundle.tokenizer(prompt, padding="max_length", max_length=cfg.max_tokens,
                           truncation=True, return_tensors="pt")
    embeddings = bundle.encode_text(enc["input_ids"])
    category_positions = sorted({i for g in groups for i in g})
    if job.pathway == "embedding-scaling":
        embeddings = embeddings.clone()
        embeddings[0, category_positions] = embeddings[0, category_positions] * job.gamma

    noisy = bundle.schedule.q_sample(latents, job.timestep, job.noise_seed)
    recorder = AttentionRecorder()
    noise_pred = bundle.unet(noisy, torch.tensor([job.timestep]), embeddings,
                             recorder=recorder)

    chosen = _pick_self_attention(recorder)
    sa = chosen["map"].numpy().astype(np.float32)
    sa /= sa.sum(axis=1, keepdims=True)  # exact row sums after f32 rounding
    self_attention = SelfAttentionMap(sa, chosen["resolution"])

    cross = [CrossLayerRecord(resolution=c["resolution"], q=c["q"].numpy(),
                              k=c["k"].numpy(), d=c["d"])
             for c in _pick_cross_layers(recorder, chosen["resolution"])]

    meta = TokenMeta(
        tokens=tuple(tokens),
        category_indices=frozenset(category_positions),
        background_indices=frozenset(background),
        gamma=1.0 if job.pathway == "embedding-scaling" else job.gamma,
        category_groups=tuple(tuple(g) for g in groups),
    )
    dump = AttnDump(
        image_id=Path(job.image).stem,
        self_attention=self_attention,
        cross_layers=cross,
        token_meta=meta,
        timestep=job.timestep,
        pathway=job.pathway,
        gamma_applied=job.gamma if job.pathway == "embedding-scaling" else 1.0,
        image_size=original_size,
    )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_dump_file(dump, out_path)

    manifest = {
        "image": str(job.image),
        "image_sha256": hashlib.sha256(Path(job.image).read_bytes()).hexdigest(),
        "prompt": prompt,
        "categories": list(job.categories),
        "category_groups": [list(g) for g in groups],
        "background_indices": sorted(background),
        "gamma": job.gamma,
        "pathway": job.pathway,
        "timestep": job.timestep,
        "noise_seed": job.noise_seed,
        "noise_pred_sha256": hashlib.sha256(
            noise_pred.numpy().astype("<f4").tobytes()).hexdigest(),
        "captured_blocks": [c["tag"] for c in recorder.cross_qk],
        "self_attention_block": chosen["tag"],
        "dump_sha256": hashlib.sha256(out_path.read_bytes()).hexdigest(),
    }
    manifest_path = out_path.with_suffix(out_path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_path
