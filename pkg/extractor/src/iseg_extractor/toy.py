"""Deterministic randomly-initialized checkpoint for offline use.

Real pretrained weights cannot be downloaded in an air-gapped setup;
this builds a structurally identical bundle with seeded random weights
plus a self-contained CLIP-style tokenizer vocabulary, which exercises
the full capture pipeline end to end.
"""

from __future__ import annotations

import json
import string
import tempfile
from pathlib import Path

import torch
from transformers import CLIPTokenizer

from .model import DiffusionBundle, ModelConfig, save_bundle

VOCAB_WORDS = (
    "a", "an", "the", "photograph", "photo", "of", "and", "other",
    "objects", "object", "background", "cat", "dog", "bird", "person",
    "sheep", "horse", "car", "boat", "chair", "plant", "grass", "sky",
)


def build_vocab() -> tuple[dict[str, int], list[tuple[str, str]]]:
    vocab = {"<|startoftext|>": 0, "<|endoftext|>": 1}
    merges: list[tuple[str, str]] = []
    for ch in string.ascii_lowercase + string.digits:
        for tok in (ch, ch + "</w>"):
            vocab.setdefault(tok, len(vocab))
    for word in VOCAB_WORDS:
        pieces = list(word[:-1]) + [word[-1] + "</w>"]
        while len(pieces) > 1:
            pair = (pieces[0], pieces[1])
            if pair not in merges:
                merges.append(pair)
            pieces = [pieces[0] + pieces[1]] + pieces[2:]
            vocab.setdefault(pieces[0], len(vocab))
    return vocab, merges


def build_tokenizer(workdir: str | Path | None = None) -> CLIPTokenizer:
    vocab, merges = build_vocab()
    d = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="iseg-vocab-"))
    d.mkdir(parents=True, exist_ok=True)
    (d / "vocab.json").write_text(json.dumps(vocab))
    with open(d / "merges.txt", "w") as fh:
        fh.write("#version: 0.2\n")
        for a, b in merges:
            fh.write(f"{a} {b}\n")
    return CLIPTokenizer(str(d / "vocab.json"), str(d / "merges.txt"))


# trained attention is sharply peaked (top entries carry several percent
# of each row); fresh random projections give near-uniform maps, so the
# stand-in scales its Q/K weights until the statistics look trained
_ATTENTION_GAIN = 3.0


def build_toy_bundle(seed: int = 0, image_size: int = 128) -> DiffusionBundle:
    """Seeded random-weight bundle; identical seeds give identical weights."""
    from .model import Attention

    tokenizer = build_tokenizer()
    cfg = ModelConfig(image_size=image_size, vocab_size=len(tokenizer.get_vocab()))
    torch.manual_seed(seed)
    bundle = DiffusionBundle(cfg, tokenizer)
    with torch.no_grad():
        for module in bundle.unet.modules():
            if isinstance(module, Attention):
                module.to_q.weight *= _ATTENTION_GAIN
                module.to_k.weight *= _ATTENTION_GAIN
    bundle.eval()
    return bundle


def init_toy_checkpoint(path: str | Path, seed: int = 0, image_size: int = 128) -> Path:
    path = Path(path)
    bundle = build_toy_bundle(seed=seed, image_size=image_size)
    save_bundle(bundle, path)
    return path
