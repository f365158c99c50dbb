"""Compact latent text-to-image stack with recordable attention.

The bundle mirrors the standard latent-diffusion layout: a convolutional
image encoder producing 4-channel latents at 1/8 resolution, a CLIP text
encoder, and a UNet whose transformer blocks carry a spatial
self-attention (attn1) followed by a text cross-attention (attn2).
Weights load from a local checkpoint directory; no network access is
ever attempted.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn
from transformers import CLIPTextConfig, CLIPTextModel, CLIPTokenizer


@dataclass
class ModelConfig:
    image_size: int = 128
    in_channels: int = 3
    latent_channels: int = 4
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    heads: int = 2
    blocks_per_level: int = 1
    text_hidden: int = 32
    text_layers: int = 2
    text_heads: int = 2
    vocab_size: int = 0  # filled from the tokenizer
    max_tokens: int = 77
    train_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    latent_scale: float = 0.18215

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        if self.image_size % 8 != 0:
            raise ValueError("image size must be divisible by 8 (latents are 1/8)")

    @property
    def latent_size(self) -> int:
        return self.image_size // 8


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class AttentionRecorder:
    """Collects Q/K blocks and head-averaged probability maps per layer."""

    def __init__(self):
        self.self_maps: list[dict] = []
        self.cross_qk: list[dict] = []

    def record_self(self, tag: str, resolution, probs: torch.Tensor) -> None:
        # probs: (heads, HW, HW); store the head average
        self.self_maps.append({
            "tag": tag,
            "resolution": tuple(resolution),
            "map": probs.mean(dim=0).detach().to(torch.float32),
        })

    def record_cross(self, tag: str, resolution, q: torch.Tensor, k: torch.Tensor,
                     d: float) -> None:
        # q: (HW, heads*head_dim), k: (T, heads*head_dim), heads concatenated
        self.cross_qk.append({
            "tag": tag,
            "resolution": tuple(resolution),
            "q": q.detach().to(torch.float32),
            "k": k.detach().to(torch.float32),
            "d": float(d),
        })


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with explicit probabilities.

    Q/K/V projections are bias-free, so scaling a context row by gamma
    scales its keys and values by exactly gamma.
    """

    def __init__(self, query_dim: int, context_dim: int | None, heads: int):
        super().__init__()
        if query_dim % heads:
            raise ValueError("query_dim must divide evenly into heads")
        self.heads = heads
        self.head_dim = query_dim // heads
        ctx = context_dim if context_dim is not None else query_dim
        self.is_cross = context_dim is not None
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(ctx, query_dim, bias=False)
        self.to_v = nn.Linear(ctx, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim)

    def forward(self, x, context=None, tag="", resolution=(0, 0),
                recorder: AttentionRecorder | None = None):
        ctx = x if context is None else context
        q = self.to_q(x)
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        b, n, _ = q.shape
        m = k.shape[1]
        qh = q.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        kh = k.view(b, m, self.heads, self.head_dim).transpose(1, 2)
        vh = v.view(b, m, self.heads, self.head_dim).transpose(1, 2)
        logits = qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim)
        probs = logits.softmax(dim=-1)
        if recorder is not None:
            if self.is_cross:
                # heads stay concatenated; softmax(QK^T/sqrt(d)) with
                # d = head_dim * heads^2 reproduces the mean per-head logit
                recorder.record_cross(tag, resolution, q[0], k[0],
                                      self.head_dim * self.heads ** 2)
            else:
                recorder.record_self(tag, resolution, probs[0])
        out = (probs @ vh).transpose(1, 2).reshape(b, n, -1)
        return self.to_out(out)


class TransformerBlock(nn.Module):
    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.norm_in = _norm(channels)
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.norm1 = nn.LayerNorm(channels)
        self.attn1 = Attention(channels, None, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.attn2 = Attention(channels, context_dim, heads)
        self.norm3 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, channels * 4), nn.GELU(),
                                nn.Linear(channels * 4, channels))
        self.proj_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x, context, tag="", recorder=None):
        b, c, h, w = x.shape
        residual = x
        hidden = self.proj_in(self.norm_in(x)).permute(0, 2, 3, 1).reshape(b, h * w, c)
        hidden = hidden + self.attn1(self.norm1(hidden), tag=tag,
                                     resolution=(h, w), recorder=recorder)
        hidden = hidden + self.attn2(self.norm2(hidden), context, tag=tag,
                                     resolution=(h, w), recorder=recorder)
        hidden = hidden + self.ff(self.norm3(hidden))
        hidden = hidden.reshape(b, h, w, c).permute(0, 3, 1, 2)
        return residual + self.proj_out(hidden)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(torch.nn.functional.silu(t_emb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    """Three-level UNet; every level carries transformer blocks, and the
    decoder's final (highest resolution) block supplies the dumped
    self-attention map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_channels
        time_dim = base * 4
        self.time_mlp = nn.Sequential(nn.Linear(base, time_dim), nn.SiLU(),
                                      nn.Linear(time_dim, time_dim))
        chans = [base * m for m in cfg.channel_mults]
        ctx = cfg.text_hidden
        self.conv_in = nn.Conv2d(cfg.latent_channels, chans[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        prev = chans[0]
        for level, ch in enumerate(chans):
            res_blocks = nn.ModuleList()
            attn_blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                res_blocks.append(ResBlock(prev, ch, time_dim))
                attn_blocks.append(TransformerBlock(ch, ctx, cfg.heads))
                prev = ch
            self.down_res.append(res_blocks)
            self.down_attn.append(attn_blocks)
            if level < len(chans) - 1:
                self.downsamplers.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid_res1 = ResBlock(prev, prev, time_dim)
        self.mid_attn = TransformerBlock(prev, ctx, cfg.heads)
        self.mid_res2 = ResBlock(prev, prev, time_dim)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level, ch in reversed(list(enumerate(chans))):
            res_blocks = nn.ModuleList()
            attn_blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                res_blocks.append(ResBlock(prev + ch, ch, time_dim))
                attn_blocks.append(TransformerBlock(ch, ctx, cfg.heads))
                prev = ch
            self.up_res.append(res_blocks)
            self.up_attn.append(attn_blocks)
            if level > 0:
                self.upsamplers.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = _norm(chans[0])
        self.conv_out = nn.Conv2d(chans[0], cfg.latent_channels, 3, padding=1)

    def forward(self, z, t, context, recorder: AttentionRecorder | None = None):
        t_emb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels))
        h = self.conv_in(z)
        skips = []
        for level, (res_blocks, attn_blocks) in enumerate(zip(self.down_res, self.down_attn)):
            for i, (res, attn) in enumerate(zip(res_blocks, attn_blocks)):
                h = res(h, t_emb)
                h = attn(h, context, tag=f"down.{level}.{i}", recorder=recorder)
                skips.append(h)
            if level < len(self.downsamplers):
                h = self.downsamplers[level](h)

        h = self.mid_res1(h, t_emb)
        h = self.mid_attn(h, context, tag="mid", recorder=recorder)
        h = self.mid_res2(h, t_emb)

        n_levels = len(self.up_res)
        for stage, (res_blocks, attn_blocks) in enumerate(zip(self.up_res, self.up_attn)):
            level = n_levels - 1 - stage  # original level index
            for i, (res, attn) in enumerate(zip(res_blocks, attn_blocks)):
                h = res(torch.cat([h, skips.pop()], dim=1), t_emb)
                h = attn(h, context, tag=f"up.{level}.{i}", recorder=recorder)
            if stage < len(self.upsamplers):
                h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamplers[stage](h)
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))


class ImageEncoder(nn.Module):
    """Convolutional encoder to 1/8-resolution latents (posterior mean only,
    so encoding is deterministic)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.base_channels
        self.net = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c, c * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c * 2, c * 2, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.to_latent = nn.Conv2d(c * 2, cfg.latent_channels, 1)

    def forward(self, image):
        return self.to_latent(self.net(image))


class NoiseSchedule:
    """Scaled-linear beta schedule; q_sample adds noise at a timestep."""

    def __init__(self, cfg: ModelConfig):
        betas = torch.linspace(cfg.beta_start ** 0.5, cfg.beta_end ** 0.5,
                               cfg.train_steps, dtype=torch.float64) ** 2
        alphas_bar = torch.cumprod(1.0 - betas, dim=0)
        self.sqrt_alphas_bar = alphas_bar.sqrt().to(torch.float32)
        self.sqrt_one_minus = (1.0 - alphas_bar).sqrt().to(torch.float32)
        self.train_steps = cfg.train_steps

    def q_sample(self, z0: torch.Tensor, t: int, seed: int) -> torch.Tensor:
        if not 1 <= t <= self.train_steps:
            raise ValueError(f"timestep {t} outside [1, {self.train_steps}]")
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        return self.sqrt_alphas_bar[t - 1] * z0 + self.sqrt_one_minus[t - 1] * noise


class DiffusionBundle(nn.Module):
    """Text encoder + image encoder + UNet, loadable from a local directory."""

    def __init__(self, cfg: ModelConfig, tokenizer: CLIPTokenizer):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer
        text_cfg = CLIPTextConfig(
            vocab_size=cfg.vocab_size,
            hidden_size=cfg.text_hidden,
            intermediate_size=cfg.text_hidden * 2,
            num_hidden_layers=cfg.text_layers,
            num_attention_heads=cfg.text_heads,
            max_position_embeddings=cfg.max_tokens,
            bos_token_id=tokenizer.bos_token_id,
            eos_token_id=tokenizer.eos_token_id,
        )
        self.text_encoder = CLIPTextModel(text_cfg)
        self.image_encoder = ImageEncoder(cfg)
        self.unet = UNet(cfg)
        self.schedule = NoiseSchedule(cfg)

    @torch.no_grad()
    def encode_text(self, input_ids: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(input_ids=input_ids).last_hidden_state

    @torch.no_grad()
    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(image) * self.cfg.latent_scale


def save_bundle(bundle: DiffusionBundle, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(asdict(bundle.cfg), indent=2) + "\n")
    torch.save(bundle.state_dict(), path / "weights.pt")
    bundle.tokenizer.save_pretrained(str(path / "tokenizer"))


def load_bundle(path: str | Path) -> DiffusionBundle:
    path = Path(path)
    config_path = path / "config.json"
    weights_path = path / "weights.pt"
    if not config_path.exists() or not weights_path.exists():
        raise FileNotFoundError(
            f"no model weights at {path} (need config.json and weights.pt); "
            f"run 'iseg-extract init-toy' to create a randomly initialized "
            f"stand-in checkpoint")
    cfg = ModelConfig(**json.loads(config_path.read_text()))
    tokenizer = CLIPTokenizer.from_pretrained(str(path / "tokenizer"))
    bundle = DiffusionBundle(cfg, tokenizer)
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    bundle.load_state_dict(state)
    bundle.eval()
    return bundle
