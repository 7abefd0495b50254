"""Dual-timestep denoiser ``f(x_t, y_s, t, s) -> (x0_hat, y0_hat)``.

One network serves both directions: the two states are stacked along the
channel axis and the head emits twice the image channels, split into the
clear and hazy estimates.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import DenoiserEstimate


@dataclass
class DenoiserConfig:
    base_channels: int = 32
    channel_multipliers: List[int] = field(default_factory=lambda: [1, 2, 4])
    num_res_blocks_per_scale: int = 1
    timestep_embed_dim: int = 64
    image_channels: int = 3

    def __post_init__(self):
        self.channel_multipliers = [int(m) for m in self.channel_multipliers]
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be a non-empty list of positive ints")
        if self.base_channels < 1 or self.num_res_blocks_per_scale < 1:
            raise ValueError("base_channels and num_res_blocks_per_scale must be positive")
        if self.timestep_embed_dim < 2 or self.timestep_embed_dim % 2:
            raise ValueError("timestep_embed_dim must be even")
        if self.image_channels not in (1, 3):
            raise ValueError("image_channels must be 1 or 3")

    @property
    def num_scales(self) -> int:
        return len(self.channel_multipliers)

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos features of raw integer timesteps, shape ``(B, dim)``."""
    t = t.to(torch.float64).reshape(-1, 1)
    half = dim // 2
    if half == 0:
        emb = torch.zeros(t.shape[0], 0, dtype=torch.float64)
    else:
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
        args = t * freqs
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def embed_timesteps(t_x, t_y, dim: int):
    """Concatenate the embeddings of ``t_x`` and ``t_y``, ``dim // 2`` features each.

    Scalars give a 1-d numpy vector; tensors give a ``(B, dim)`` float64 tensor.
    """
    scalar = not torch.is_tensor(t_x)
    tx = torch.as_tensor(t_x).reshape(-1)
    ty = torch.as_tensor(t_y).reshape(-1)
    if torch.any(tx < 0) or torch.any(ty < 0):
        raise ValueError("timesteps must be non-negative")
    if dim % 2:
        raise ValueError("embedding dim must be even")
    emb = torch.cat([sinusoidal_embedding(tx, dim // 2), sinusoidal_embedding(ty, dim // 2)], dim=1)
    return emb[0].numpy() if scalar else emb


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_ch):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_ch, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, h, temb):
        out = self.conv1(F.silu(self.norm1(h)))
        out = out + self.temb(F.silu(temb))[:, :, None, None]
        out = self.conv2(F.silu(self.norm2(out)))
        return self.skip(h) + out


class DualUNet(nn.Module):
    """Encoder-decoder with skip connections and per-block timestep injection."""

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = config = config or DenoiserConfig()
        base = config.base_channels
        chans = [base * m for m in config.channel_multipliers]
        temb_ch = base * 4
        self.temb_mlp = nn.Sequential(
            nn.Linear(config.timestep_embed_dim, temb_ch), nn.SiLU(), nn.Linear(temb_ch, temb_ch)
        )
        self.conv_in = nn.Conv2d(2 * config.image_channels, base, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skip_chans = []
        cur = base
        for i, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(config.num_res_blocks_per_scale):
                blocks.append(ResBlock(cur, ch, temb_ch))
                cur = ch
            self.down.append(blocks)
            skip_chans.append(cur)
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(cur, cur, 3, stride=2, padding=1))

        self.mid = ResBlock(cur, cur, temb_ch)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, ch in reversed(list(enumerate(chans))):
            blocks = nn.ModuleList()
            blocks.append(ResBlock(cur + skip_chans[i], ch, temb_ch))
            cur = ch
            for _ in range(config.num_res_blocks_per_scale - 1):
                blocks.append(ResBlock(cur, ch, temb_ch))
            self.up.append(blocks)
            if i > 0:
                self.upsample.append(nn.Conv2d(cur, chans[i - 1], 3, padding=1))
                cur = chans[i - 1]

        self.norm_out = nn.GroupNorm(_groups(cur), cur)
        self.conv_out = nn.Conv2d(cur, 2 * config.image_channels, 3, padding=1)

    @property
    def multiple(self) -> int:
        return 2 ** (self.config.num_scales - 1)

    def forward(self, x_t, y_t, t_x, t_y):
        """Tensors ``(B, C, H, W)`` and integer timesteps ``(B,)``; returns ``(x0_hat, y0_hat)``."""
        if x_t.shape != y_t.shape:
            raise ValueError(f"state shapes differ: {tuple(x_t.shape)} vs {tuple(y_t.shape)}")
        if x_t.shape[1] != self.config.image_channels:
            raise ValueError(f"expected {self.config.image_channels} channels, got {x_t.shape[1]}")
        B, _, H, W = x_t.shape
        t_x = torch.as_tensor(t_x).reshape(-1).expand(B)
        t_y = torch.as_tensor(t_y).reshape(-1).expand(B)
        temb = embed_timesteps(t_x, t_y, self.config.timestep_embed_dim).to(x_t.dtype)
        temb = self.temb_mlp(temb)

        h = torch.cat([x_t, y_t], dim=1)
        m = self.multiple
        pad_h, pad_w = (-H) % m, (-W) % m
        if pad_h or pad_w:
            h = F.pad(h, (0, pad_w, 0, pad_h), mode="replicate")
        h = self.conv_in(h)
        skips = []
        for i, blocks in enumerate(self.down):
            for block in blocks:
                h = block(h, temb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, temb)
        for j, blocks in enumerate(self.up):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, temb)
            if j < len(self.upsample):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[j](h)
        out = self.conv_out(F.silu(self.norm_out(h)))[:, :, :H, :W]
        c = self.config.image_channels
        return out[:, :c], out[:, c:]


def l1_pair_loss(pred_x, pred_y, x0, y0):
    """Mean absolute error over both outputs, all pixels and the batch."""
    return 0.5 * ((pred_x - x0).abs().mean() + (pred_y - y0).abs().mean())


def gradient(model: DualUNet, x_t, y_t, t_x, t_y, x0, y0, scale: float = 1.0):
    """Gradients of ``scale * l1_pair_loss`` w.r.t. every weight, in parameter order."""
    model.zero_grad(set_to_none=True)
    px, py = model(x_t, y_t, t_x, t_y)
    loss = scale * l1_pair_loss(px, py, x0, y0)
    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def to_nchw(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    a = np.asarray(a)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).to(dtype)


def to_nhwc(t: torch.Tensor, squeeze: bool) -> np.ndarray:
    a = t.detach().to(torch.float64).numpy().transpose(0, 2, 3, 1)
    return a[0] if squeeze else a


class NetworkDenoiser:
    """Adapts a :class:`DualUNet` to the numpy ``(x, y, t_x, t_y)`` call signature.

    Accepts ``(H, W, C)`` or ``(N, H, W, C)`` arrays; returns float64 arrays
    of the same shape.
    """

    def __init__(self, model: DualUNet, max_batch: int = 64):
        self.model = model.eval()
        self.max_batch = max_batch
        self.calls = 0

    @torch.no_grad()
    def __call__(self, x_t, y_t, t_x, t_y) -> DenoiserEstimate:
        self.calls += 1
        x_t, y_t = np.asarray(x_t), np.asarray(y_t)
        if x_t.shape != y_t.shape:
            raise ValueError(f"state shapes differ: {x_t.shape} vs {y_t.shape}")
        squeeze = x_t.ndim == 3
        xs, ys = to_nchw(x_t), to_nchw(y_t)
        outs_x, outs_y = [], []
        for i in range(0, xs.shape[0], self.max_batch):
            px, py = self.model(xs[i : i + self.max_batch], ys[i : i + self.max_batch], int(t_x), int(t_y))
            outs_x.append(px)
            outs_y.append(py)
        return DenoiserEstimate(to_nhwc(torch.cat(outs_x), squeeze), to_nhwc(torch.cat(outs_y), squeeze))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def flatten_parameters(params: Sequence[torch.Tensor]) -> np.ndarray:
    return np.concatenate([p.detach().reshape(-1).cpu().numpy().astype("<f4") for p in params])
