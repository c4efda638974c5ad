"""Denoiser backbones behind a common interface.

The toy backbone is a pixel-space U-Net sized for the desk-scale
fixtures: identity image/latent codec, three decoder blocks with one
cross-attention layer each (so the "first three decoder layers" always
means all of them), four heads, and a frozen random token table as the
text encoder. A conditioning branch encodes the concatenated noisy
latent and condition image and injects its features into the decoder
through zero-initialized 1x1 projections scaled by the control scale,
so a freshly constructed branch cannot perturb the denoiser and a
control scale of zero removes the condition entirely.

Adapters for full pretrained latent-diffusion stacks implement the same
interface; only their method contracts are documented here.
"""

import abc
import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import cross_attention, run_hooks
from .data import augment
from .serialization import load_checkpoint, save_checkpoint

__all__ = [
    "TextEmbedding",
    "ConditioningInput",
    "BackboneInterface",
    "PretrainedBackboneAdapter",
    "ToyBackboneConfig",
    "ToyBackbone",
]

PAD_TOKEN_ID = 0


@dataclass
class TextEmbedding:
    """Token embedding matrix (n_tokens x d_embed); row 0 is the object token."""

    tokens: torch.Tensor

    object_token_index = 0

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 2:
            raise ValueError(f"embedding must be (n_tokens >= 2, d), got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("embedding contains non-finite values")

    def clone(self):
        return TextEmbedding(self.tokens.clone())

    @property
    def n_tokens(self):
        return self.tokens.shape[0]


@dataclass
class ConditioningInput:
    """Condition image (H x W x 3 in [0, 1]) plus its injection scale."""

    condition_image: np.ndarray
    control_scale: float = 1.0

    def __post_init__(self):
        if self.control_scale < 0:
            raise ValueError("control_scale must be >= 0")


class BackboneInterface(abc.ABC):
    """Behavioral contract shared by the toy backbone and adapters."""

    @abc.abstractmethod
    def encode_image(self, image):
        """Map an H x W x 3 image in [0, 1] to a latent tensor (C, H', W')."""

    @abc.abstractmethod
    def decode_latent(self, latent):
        """Map a latent back to an H x W x 3 image in [0, 1]."""

    @abc.abstractmethod
    def text_encode(self, token_ids):
        """Deterministically embed token ids; row 0 is the first prompt token."""

    @abc.abstractmethod
    def denoise(self, x_t, t, e, cond=None, hooks=None):
        """Predict the noise in ``x_t`` at training timestep ``t``.

        Every decoder cross-attention layer must invoke ``hooks`` with
        the softmaxed maps, per head; pure observers must not perturb
        the output in any bit.
        """

    @abc.abstractmethod
    def finetune_step(self, batch, e, schedule, rng_seed):
        """One seeded denoising-objective gradient update; returns the loss."""

    @property
    @abc.abstractmethod
    def attention_layer_count(self):
        ...

    @property
    @abc.abstractmethod
    def decoder_cross_attention_layer_ids(self):
        """Stable layer ids ordered from lowest resolution to highest."""


class PretrainedBackboneAdapter(BackboneInterface):
    """Contract notes for wrapping a full pretrained latent-diffusion stack.

    Codecs may be lossy (``decode(encode(img))`` approximate, unlike the
    toy identity codec). ``decoder_cross_attention_layer_ids`` must be
    enumerable in a stable order starting from the decoder layers closest
    to the bottleneck. Tokenizers that prepend a sequence-start token
    must set ``object_token_index`` to the index of the first prompt
    token so callers can keep addressing the object token as row 0 of
    the exposed embedding matrix.
    """

    object_token_index = 0


@dataclass
class ToyBackboneConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 3)
    heads: int = 4
    embed_dim: int = 32
    vocab_size: int = 64
    n_tokens: int = 8
    time_dim: int = 64
    seed: int = 0
    finetune_lr: float = 1e-3
    dtype: str = "float32"

    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def _sinusoidal_embedding(t, dim, dtype):
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / half
    )
    args = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _CrossAttentionLayer(nn.Module):
    """Spatial-query / token-key attention with hook points."""

    def __init__(self, channels, embed_dim, heads, layer_id):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.layer_id = layer_id
        self.heads = heads
        self.head_dim = channels // heads
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(embed_dim, channels, bias=False)
        self.to_v = nn.Linear(embed_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, h, tokens, t_scalar, hooks):
        b, c, height, width = h.shape
        n_q = height * width
        x = self.norm(h).reshape(b, c, n_q).transpose(1, 2)
        q = self.to_q(x).reshape(b, n_q, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(tokens).reshape(-1, self.heads, self.head_dim).transpose(0, 1)
        v = self.to_v(tokens).reshape(-1, self.heads, self.head_dim).transpose(0, 1)

        attn = cross_attention(q, k)
        if hooks is not None:
            attn = run_hooks(hooks, self.layer_id, attn[0], int(t_scalar), (height, width))
            attn = attn.unsqueeze(0)
        out = attn @ v
        out = out.transpose(1, 2).reshape(b, n_q, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, height, width)
        return h + out


class _ConditionEncoder(nn.Module):
    """Encodes concat(noisy latent, condition image) at decoder resolutions."""

    def __init__(self, in_channels, chans):
        super().__init__()
        c1, c2, c3 = chans
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c1, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c1, c1, 3, padding=1),
        )
        self.down1 = nn.Sequential(
            nn.SiLU(), nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c2, c2, 3, padding=1),
        )
        self.down2 = nn.Sequential(
            nn.SiLU(), nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c3, c3, 3, padding=1),
        )

    def forward(self, x):
        f_high = self.stem(x)
        f_mid = self.down1(f_high)
        f_low = self.down2(f_mid)
        return f_low, f_mid, f_high


class ToyBackbone(nn.Module, BackboneInterface):
    """Pixel-space toy denoiser; see the module docstring for the layout."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or ToyBackboneConfig()
        cfg = self.config
        torch.manual_seed(cfg.seed)

        c1, c2, c3 = (cfg.base_channels * m for m in cfg.channel_mults)
        td = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td * 2), nn.SiLU(), nn.Linear(td * 2, td))

        self.stem = nn.Conv2d(cfg.in_channels, c1, 3, padding=1)
        self.enc1 = _ResBlock(c1, c1, td)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = _ResBlock(c2, c2, td)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid = _ResBlock(c3, c3, td)

        self.dec0 = _ResBlock(c3, c3, td)
        self.attn0 = _CrossAttentionLayer(c3, cfg.embed_dim, cfg.heads, layer_id=0)
        self.up1 = nn.Conv2d(c3, c2, 3, padding=1)
        self.dec1 = _ResBlock(c2 * 2, c2, td)
        self.attn1 = _CrossAttentionLayer(c2, cfg.embed_dim, cfg.heads, layer_id=1)
        self.up2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec2 = _ResBlock(c1 * 2, c1, td)
        self.attn2 = _CrossAttentionLayer(c1, cfg.embed_dim, cfg.heads, layer_id=2)
        self.out_norm = nn.GroupNorm(8, c1)
        self.out_conv = nn.Conv2d(c1, cfg.in_channels, 3, padding=1)

        self.cond_encoder = _ConditionEncoder(cfg.in_channels * 2, (c1, c2, c3))
        self.zero_proj0 = nn.Conv2d(c3, c3, 1)
        self.zero_proj1 = nn.Conv2d(c2, c2, 1)
        self.zero_proj2 = nn.Conv2d(c1, c1, 1)
        for proj in (self.zero_proj0, self.zero_proj1, self.zero_proj2):
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)

        table_gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.register_buffer(
            "token_table", torch.randn(cfg.vocab_size, cfg.embed_dim, generator=table_gen)
        )
        self.register_buffer(
            "position_table",
            0.2 * torch.randn(cfg.n_tokens, cfg.embed_dim, generator=table_gen),
        )

        self.to(cfg.torch_dtype())
        self._optimizer = None

    # ------------------------------------------------------------------
    # interface surface

    @property
    def attention_layer_count(self):
        return 3

    @property
    def decoder_cross_attention_layer_ids(self):
        # Ordered from the layer closest to the bottleneck (lowest
        # resolution) outward.
        return (0, 1, 2)

    @property
    def latent_shape(self):
        s = self.config.image_size
        return (self.config.in_channels, s, s)

    def encode_image(self, image):
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != self.config.in_channels:
            raise ValueError(f"expected H x W x {self.config.in_channels} image, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        t = torch.as_tensor(arr, dtype=self.config.torch_dtype())
        return t.permute(2, 0, 1).contiguous()

    def decode_latent(self, latent):
        t = torch.as_tensor(latent).detach().clamp(0.0, 1.0)
        return t.permute(1, 2, 0).cpu().numpy()

    def text_encode(self, token_ids):
        ids = [int(i) for i in token_ids]
        cfg = self.config
        if not ids or len(ids) > cfg.n_tokens:
            raise ValueError(f"need 1..{cfg.n_tokens} token ids, got {len(ids)}")
        for i in ids:
            if not 0 <= i < cfg.vocab_size:
                raise ValueError(f"token id {i} outside vocabulary of size {cfg.vocab_size}")
        ids = ids + [PAD_TOKEN_ID] * (cfg.n_tokens - len(ids))
        emb = self.token_table[ids] + self.position_table
        return TextEmbedding(emb.clone())

    def denoise(self, x_t, t, e, cond=None, hooks=None):
        batched = x_t.ndim == 4
        x = x_t if batched else x_t[None]
        if hooks is not None and x.shape[0] != 1:
            raise ValueError("attention hooks require a batch of exactly one sample")
        if x.shape[1:] != self.latent_shape:
            raise ValueError(f"latent shape {tuple(x.shape[1:])} != {self.latent_shape}")
        t_vec = torch.as_tensor(
            [int(t)] * x.shape[0] if np.isscalar(t) or getattr(t, "ndim", 0) == 0 else t
        )
        cond_images = None
        control_scale = 0.0
        if cond is not None:
            ci = torch.as_tensor(cond.condition_image, dtype=x.dtype).permute(2, 0, 1)
            cond_images = ci[None].expand(x.shape[0], -1, -1, -1)
            control_scale = cond.control_scale
        out = self._forward(x, t_vec, e.tokens.to(x.dtype), cond_images, control_scale, hooks)
        return out if batched else out[0]

    def training_loss(self, batch, e, schedule, rng_seed):
        """Seeded denoising loss over one batch, without an update.

        Each sample draws its own timestep and noise; geometric and
        color augmentations hit the condition images only, never the
        denoising target.
        """
        if not batch:
            raise ValueError("batch must be non-empty")
        gen = torch.Generator().manual_seed(int(rng_seed))
        aug_rng = np.random.default_rng(int(rng_seed))
        dtype = self.config.torch_dtype()

        x0_list, cond_list = [], []
        for item in batch:
            img_like, cond_img = item
            img = getattr(img_like, "image", img_like)
            x0_list.append(self.encode_image(img))
            cond_list.append(
                torch.as_tensor(augment(cond_img, aug_rng), dtype=dtype).permute(2, 0, 1)
            )
        x0 = torch.stack(x0_list)
        cond_images = torch.stack(cond_list)

        b = x0.shape[0]
        t = torch.randint(0, schedule.t_train, (b,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
        a = torch.as_tensor(schedule.alpha_bar, dtype=dtype)[t][:, None, None, None]
        x_t = torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps

        eps_pred = self._forward(x_t, t, e.tokens.to(dtype), cond_images, 1.0, None)
        return ((eps - eps_pred) ** 2).flatten(1).sum(dim=1).mean()

    def finetune_step(self, batch, e, schedule, rng_seed):
        if self._optimizer is None:
            self._optimizer = torch.optim.Adam(self.parameters(), lr=self.config.finetune_lr)
        loss = self.training_loss(batch, e, schedule, rng_seed)
        self._optimizer.zero_grad()
        loss.backward()
        self._optimizer.step()
        return float(loss.detach())

    # ------------------------------------------------------------------
    # internals

    def _forward(self, x, t_vec, tokens, cond_images, control_scale, hooks):
        dtype = x.dtype
        temb = self.time_mlp(_sinusoidal_embedding(t_vec, self.config.time_dim, dtype))
        t_scalar = int(t_vec[0])

        f_low = f_mid = f_high = None
        if cond_images is not None and control_scale != 0.0:
            f_low, f_mid, f_high = self.cond_encoder(torch.cat([x, cond_images], dim=1))

        h = self.stem(x)
        h1 = self.enc1(h, temb)
        h2 = self.enc2(self.down1(h1), temb)
        h = self.mid(self.down2(h2), temb)

        h = self.dec0(h, temb)
        if f_low is not None:
            h = h + control_scale * self.zero_proj0(f_low)
        h = self.attn0(h, tokens, t_scalar, hooks)

        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec1(torch.cat([h, h2], dim=1), temb)
        if f_mid is not None:
            h = h + control_scale * self.zero_proj1(f_mid)
        h = self.attn1(h, tokens, t_scalar, hooks)

        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec2(torch.cat([h, h1], dim=1), temb)
        if f_high is not None:
            h = h + control_scale * self.zero_proj2(f_high)
        h = self.attn2(h, tokens, t_scalar, hooks)

        return self.out_conv(F.silu(self.out_norm(h)))

    # ------------------------------------------------------------------
    # persistence

    def save(self, path, extra_manifest=None):
        manifest = {"kind": "toy_backbone", "config": vars(self.config).copy()}
        manifest["config"]["channel_mults"] = list(self.config.channel_mults)
        if extra_manifest:
            manifest.update(extra_manifest)
        tensors = {name: value.detach().cpu().numpy() for name, value in self.state_dict().items()}
        save_checkpoint(path, manifest, tensors)

    @classmethod
    def load(cls, path):
        manifest, tensors = load_checkpoint(path)
        if manifest.get("kind") != "toy_backbone":
            raise ValueError(f"{path} is not a toy backbone checkpoint")
        raw = dict(manifest["config"])
        raw["channel_mults"] = tuple(raw["channel_mults"])
        config = ToyBackboneConfig(**raw)
        model = cls(config)
        state = {k: torch.as_tensor(v, dtype=config.torch_dtype()) for k, v in tensors.items()}
        model.load_state_dict(state)
        return model, manifest

    def spawn_copy(self):
        """Independent copy sharing the same initial weights and table."""
        return copy.deepcopy(self)
