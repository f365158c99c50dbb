"""Shared builders for synthetic attention dumps."""

import numpy as np

from iseg.attn import TokenMeta
from iseg.dumpio import AttnDump, CrossLayerRecord
from iseg.fixtures import NoiseSpec, gt_self_attention, noisy_self_attention, random_scene


def build_dump(seed=0, side=16, levels=((8, 8), (16, 16)), n_tokens=6, dim=8,
               beta=0.2, jitter=1.0, image_size=None, pathway="offline",
               gamma_applied=1.0):
    """Dump with a noisy GT self-attention map and random cross Q/K layers."""
    rng = np.random.default_rng(seed)
    scene = random_scene(side, seed, n_segments=2)
    sa = noisy_self_attention(gt_self_attention(scene.mask),
                              NoiseSpec(beta, jitter, seed=seed))
    sa.data = sa.data.astype(np.float32).astype(np.float64)
    sa.data /= sa.data.sum(axis=1, keepdims=True)  # keep rows stochastic in f32
    layers = []
    for h, w in levels:
        layers.append(CrossLayerRecord(
            resolution=(h, w),
            q=rng.standard_normal((h * w, dim)).astype(np.float32),
            k=rng.standard_normal((n_tokens, dim)).astype(np.float32),
            d=float(dim),
        ))
    tokens = tuple(f"tok{i}" for i in range(n_tokens))
    meta = TokenMeta(tokens, frozenset({1, 3}), frozenset({n_tokens - 1}), gamma=1.6)
    return AttnDump(
        image_id=f"synthetic-{seed}",
        self_attention=sa,
        cross_layers=layers,
        token_meta=meta,
        timestep=100,
        pathway=pathway,
        gamma_applied=gamma_applied,
        image_size=image_size,
    )
