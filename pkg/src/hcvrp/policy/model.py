"""Attention encoder with separate vehicle- and node-selection decoders."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from ..errors import ConfigurationError


@dataclass(frozen=True)
class ArchConfig:
    dim: int = 128
    heads: int = 8
    n_layers: int = 3
    ff_encoder: int = 512
    ff_decoder: int = 512
    tanh_clip: float = 10.0

    def __post_init__(self):
        if min(self.dim, self.heads, self.n_layers, self.ff_encoder, self.ff_decoder) <= 0:
            raise ConfigurationError("architecture widths must be positive")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.tanh_clip <= 0:
            raise ConfigurationError("tanh_clip must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with ``heads`` heads and an output projection."""

    def __init__(self, query_dim: int, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Linear(query_dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        # (B, L, dim) -> (B, heads, L, head_dim)
        b, length, _ = x.shape
        return x.view(b, length, self.heads, self.head_dim).transpose(1, 2)

    def project_kv(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.split(self.w_k(h)), self.split(self.w_v(h))

    def attend(self, query: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
               mask: torch.Tensor | None = None) -> torch.Tensor:
        """``mask`` (B, L_k) marks the keys that may be attended to."""
        q = self.split(self.w_q(query))
        scores = q @ keys.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        z = torch.softmax(scores, dim=-1) @ values
        b, _, length, _ = z.shape
        return self.w_o(z.transpose(1, 2).reshape(b, length, -1))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.attend(h, *self.project_kv(h))


class Normalization(nn.Module):
    """Batch normalization over every node of every instance in the batch."""

    def __init__(self, dim: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bn(x.reshape(-1, x.size(-1))).view_as(x)


def feed_forward(dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.mha = MultiHeadAttention(cfg.dim, cfg.dim, cfg.heads)
        self.norm1 = Normalization(cfg.dim)
        self.ff = feed_forward(cfg.dim, cfg.ff_encoder)
        self.norm2 = Normalization(cfg.dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        r = self.norm1(h + self.mha(h))
        return self.norm2(r + self.ff(r))


class Encoder(nn.Module):
    def __init__(self, cfg: ArchConfig, m: int):
        super().__init__()
        self.m = m
        self.embed = nn.Linear(2 + m, cfg.dim)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if features.size(-1) != 2 + self.m:
            raise ConfigurationError(
                f"feature width {features.size(-1)} does not match 2+m={2 + self.m}")
        h = self.embed(features)
        for layer in self.layers:
            h = layer(h)
        return h, h.mean(dim=1)


class VehicleDecoder(nn.Module):
    """Scores vehicles from their positions/times and the max-pooled embeddings of their routes."""

    def __init__(self, cfg: ArchConfig, m: int):
        super().__init__()
        self.vehicle_in = nn.Linear(3 * m, cfg.dim)
        self.vehicle_ff = feed_forward(cfg.dim, cfg.ff_decoder)
        self.route_in = nn.Linear(m * cfg.dim, cfg.dim)
        self.route_ff = feed_forward(cfg.dim, cfg.ff_decoder)
        self.out = nn.Linear(2 * cfg.dim, m)

    def forward(self, locations: torch.Tensor, times: torch.Tensor,
                route_max: torch.Tensor) -> torch.Tensor:
        """locations (B, m, 2), times (B, m), route_max (B, m, dim) -> logits (B, m)."""
        context = torch.cat([locations, times.unsqueeze(-1)], dim=-1).flatten(1)
        h_vehicle = self.vehicle_ff(self.vehicle_in(context))
        h_route = self.route_ff(self.route_in(route_max.flatten(1)))
        return self.out(torch.cat([h_vehicle, h_route], dim=-1))


class NodeDecoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.clip = cfg.tanh_clip
        self.head_dim = cfg.head_dim
        self.first_node = nn.Parameter(torch.empty(cfg.dim))
        self.glimpse = MultiHeadAttention(2 * cfg.dim + 1, cfg.dim, cfg.heads)
        self.w_q = nn.Linear(cfg.dim, cfg.dim, bias=False)
        self.w_k = nn.Linear(cfg.dim, cfg.dim, bias=False)

    def precompute(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        keys, values = self.glimpse.project_kv(h)
        return keys, values, self.w_k(h)

    def forward(self, graph: torch.Tensor, last: torch.Tensor, load: torch.Tensor,
                fixed: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
                mask: torch.Tensor | None = None) -> torch.Tensor:
        """Clipped compatibilities (B, n+1); ``mask`` restricts the glimpse to feasible nodes."""
        keys, values, logit_keys = fixed
        context = torch.cat([graph, last, load.unsqueeze(-1)], dim=-1).unsqueeze(1)
        glimpse = self.glimpse.attend(context, keys, values, mask)
        q = self.w_q(glimpse)
        compat = (q @ logit_keys.transpose(-1, -2)).squeeze(1) / math.sqrt(self.head_dim)
        return self.clip * torch.tanh(compat)


class HCVRPPolicy(nn.Module):
    def __init__(self, cfg: ArchConfig, m: int):
        super().__init__()
        if m < 1:
            raise ConfigurationError("need at least one vehicle")
        self.cfg = cfg
        self.m = m
        self.encoder = Encoder(cfg, m)
        self.vehicle_decoder = VehicleDecoder(cfg, m)
        self.node_decoder = NodeDecoder(cfg)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        """Uniform fan-in initialisation: U(-1/sqrt(d), 1/sqrt(d)) with d the last axis."""
        with torch.no_grad():
            for p in self.parameters():
                bound = 1.0 / math.sqrt(p.size(-1))
                p.copy_(torch.rand(p.shape, generator=generator, dtype=p.dtype) * 2 * bound - bound)

    def encode(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.encoder(features)
