"""Model blocks: per-modality encoders, the complete-input auxiliary encoder, the
feature enhancement block, the feature synthesis block and the two decoders.

Encoder stages are numbered from 1; stage ``s`` has ``base_channels * 2**(s-1)``
channels at ``1 / 2**s`` of the input resolution. The deepest stage is the
bottleneck where feature synthesis happens. Decoders use the (zero-filled)
input volume itself as the full-resolution skip.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ProtocolError, ShapeError
from .volume_data import MODALITIES, NUM_CLASSES, ModalityMask

N_MOD = len(MODALITIES)


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 8
    encoder_depth: int = 2
    class_count: int = NUM_CLASSES
    afeb_heads: int = 2
    stage_set: Optional[Tuple[int, ...]] = None  # None means bottleneck only

    def __post_init__(self):
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.afeb_heads < 1 or self.base_channels % self.afeb_heads:
            raise ConfigError(f"base_channels {self.base_channels} not divisible by afeb_heads {self.afeb_heads}")
        if self.encoder_depth < 1:
            raise ConfigError(f"encoder_depth must be >= 1, got {self.encoder_depth}")
        if self.stage_set is not None:
            stages = tuple(sorted(set(int(s) for s in self.stage_set)))
            if not stages or stages[0] < 1 or stages[-1] > self.encoder_depth:
                raise ConfigError(f"stage_set {self.stage_set} outside 1..{self.encoder_depth}")
            object.__setattr__(self, "stage_set", stages)

    @property
    def stages(self) -> Tuple[int, ...]:
        return self.stage_set if self.stage_set is not None else (self.encoder_depth,)

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** (stage - 1)

    @property
    def bottleneck_channels(self) -> int:
        return self.channels(self.encoder_depth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_set"] = list(self.stages)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled uniform weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=0.01, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = nn.InstanceNorm3d(out_ch, affine=True)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(out_ch, affine=True)

    def forward(self, x):
        x = F.leaky_relu(self.norm1(self.conv1(x)), 0.01)
        return F.leaky_relu(self.norm2(self.conv2(x)), 0.01)


class Encoder(nn.Module):
    def __init__(self, in_ch: int, cfg: ModelConfig):
        super().__init__()
        self.in_ch = in_ch
        chans = [in_ch] + [cfg.channels(s) for s in range(1, cfg.encoder_depth + 1)]
        self.stages = nn.ModuleList(ConvBlock(a, b, stride=2) for a, b in zip(chans[:-1], chans[1:]))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        if x.dim() != 5 or x.shape[1] != self.in_ch:
            raise ShapeError(f"encoder expects (B, {self.in_ch}, D, H, W), got {tuple(x.shape)}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """U-Net style decoder from stage features (shallow to deep) plus the input volume as final skip."""

    def __init__(self, stage_channels: Sequence[int], input_channels: int, class_count: int):
        super().__init__()
        self.stage_channels = list(stage_channels)
        self.input_channels = input_channels
        n = len(stage_channels)
        self.up = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(n - 1, 0, -1):
            self.up.append(nn.ConvTranspose3d(stage_channels[i], stage_channels[i - 1], 2, stride=2))
            self.blocks.append(ConvBlock(2 * stage_channels[i - 1], stage_channels[i - 1]))
        c0 = stage_channels[0]
        self.up.append(nn.ConvTranspose3d(c0, c0, 2, stride=2))
        self.blocks.append(ConvBlock(c0 + input_channels, c0))
        self.head = nn.Conv3d(c0, class_count, 1)

    def forward(self, feats: Sequence[torch.Tensor], volume: torch.Tensor) -> torch.Tensor:
        feats = list(feats)
        if len(feats) != len(self.stage_channels):
            raise ShapeError(f"decoder expects {len(self.stage_channels)} stages, got {len(feats)}")
        for f, c in zip(feats, self.stage_channels):
            if f.shape[1] != c:
                raise ShapeError(f"decoder stage expects {c} channels, got {f.shape[1]}")
        if volume.shape[1] != self.input_channels:
            raise ShapeError(f"decoder expects {self.input_channels}-channel input skip, got {volume.shape[1]}")
        x = feats[-1]
        skips = feats[-2::-1] + [volume]
        for up, block, skip in zip(self.up, self.blocks, skips):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)


class AFEB(nn.Module):
    """Feature enhancement: channel embedding, then a global self-attention branch and a
    local 3x3x3 convolution branch, summed and mixed by a 1x1x1 map.

    ``pool_tokens`` halves the token grid before attention (used above the bottleneck).
    """

    def __init__(self, channels: int, heads: int, pool_tokens: bool = False):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"{channels} channels not divisible by {heads} heads")
        self.channels, self.heads, self.pool_tokens = channels, heads, pool_tokens
        self.embed = nn.Conv3d(channels, channels, 1)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.local = nn.Conv3d(channels, channels, 3, padding=1)
        self.fuse = nn.Conv3d(channels, channels, 1)
        self.last_attention: Optional[torch.Tensor] = None

    def attention(self, x: torch.Tensor, return_weights: bool = False):
        """Multi-head self-attention over the flattened spatial grid of ``x``."""
        b, c, d, h, w = x.shape
        grid = x
        if self.pool_tokens and min(d, h, w) >= 2:
            grid = F.avg_pool3d(x, 2)
        gd, gh, gw = grid.shape[2:]
        tokens = grid.flatten(2).transpose(1, 2)  # (B, N, C)
        n = tokens.shape[1]
        hd = c // self.heads
        q, k, v = self.qkv(tokens).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)  # (B, heads, N, N)
        out = (weights @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj(out).transpose(1, 2).reshape(b, c, gd, gh, gw)
        if (gd, gh, gw) != (d, h, w):
            out = F.interpolate(out, size=(d, h, w), mode="nearest")
        if return_weights:
            return out, weights
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != self.channels:
            raise ShapeError(f"AFEB expects (B, {self.channels}, D, H, W), got {tuple(x.shape)}")
        e = self.embed(x)
        g = self.attention(e)
        l = F.leaky_relu(self.local(e), 0.01)
        return self.fuse(g + l)


class MFSB(nn.Module):
    """Feature synthesis for missing modalities.

    For each modality: a channel prior from pooled available features, a squeeze
    of the re-weighted concatenation down to one modality's width, then a learned
    sigmoid-gated affine style ``(1 + alpha) * f + beta``.
    """

    def __init__(self, channels: int):
        super().__init__()
        c4 = N_MOD * channels
        self.channels = channels
        self.prior = nn.ModuleList(nn.Conv3d(c4, c4, 1) for _ in range(N_MOD))  # W1
        self.squeeze = nn.ModuleList(nn.Conv3d(c4, channels, 1) for _ in range(N_MOD))  # W2
        self.scale = nn.ModuleList(nn.Conv3d(channels, channels, 1) for _ in range(N_MOD))  # W3
        self.shift = nn.ModuleList(nn.Conv3d(channels, channels, 1) for _ in range(N_MOD))  # W4

    def forward(self, feats: Sequence[Optional[torch.Tensor]], mask: ModalityMask, return_details: bool = False):
        feats = list(feats)
        if len(feats) != N_MOD:
            raise ShapeError(f"MFSB needs {N_MOD} modality features, got {len(feats)}")
        mask.require_nonempty()
        ref = next(f for f, a in zip(feats, mask.available) if a)
        if ref is None:
            raise ProtocolError("available modality has no feature")
        for f, a in zip(feats, mask.available):
            if a and f.shape != ref.shape:
                raise ShapeError(f"modality features differ in shape: {tuple(f.shape)} vs {tuple(ref.shape)}")
        if ref.shape[1] != self.channels:
            raise ShapeError(f"MFSB built for {self.channels} channels, got {ref.shape[1]}")
        filled = [f if a else torch.zeros_like(ref) for f, a in zip(feats, mask.available)]
        f_ava = torch.cat(filled, dim=1)
        gap = f_ava.mean(dim=(2, 3, 4), keepdim=True)

        synth, details = [], {"gap": gap, "prior": [], "alpha": [], "beta": [], "f_cha": []}
        for m in range(N_MOD):
            p = torch.sigmoid(self.prior[m](gap))
            f_cha = self.squeeze[m](p * f_ava)
            alpha = torch.sigmoid(self.scale[m](f_cha))
            beta = torch.sigmoid(self.shift[m](f_cha))
            synth.append((1 + alpha) * f_cha + beta)
            if return_details:
                for key, val in (("prior", p), ("alpha", alpha), ("beta", beta), ("f_cha", f_cha)):
                    details[key].append(val)

        f_comp = torch.cat([f if a else s for f, s, a in zip(filled, synth, mask.available)], dim=1)
        if return_details:
            return f_comp, synth, details
        return f_comp, synth


def _check_complete(volume: torch.Tensor) -> None:
    empty = (volume.flatten(2) == 0).all(-1)  # (B, 4)
    if bool(empty.any()):
        raise ProtocolError("training forward needs complete modalities; some modality channel is all zero")


def mask_volume(volume: torch.Tensor, mask: ModalityMask) -> torch.Tensor:
    mask.require_nonempty()
    out = volume.clone()
    for i, a in enumerate(mask.available):
        if not a:
            out[:, i] = 0
    return out


class ACDIS(nn.Module):
    """Four mono-modal encoders with enhancement blocks, synthesis, and a fusion decoder,
    plus the training-only auxiliary encoder/decoder pair."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        depth = cfg.encoder_depth
        stage_ch = [cfg.channels(s) for s in range(1, depth + 1)]
        self.encoders = nn.ModuleList(Encoder(1, cfg) for _ in range(N_MOD))
        self.aux_encoder = Encoder(N_MOD, cfg)
        # lifts teacher features to the fusion decoder's 4x width so the shared decoder can read them
        self.aux_proj = nn.ModuleList(nn.Conv3d(c, N_MOD * c, 1) for c in stage_ch)
        self.afeb = nn.ModuleDict({
            str(s): nn.ModuleList(AFEB(cfg.channels(s), cfg.afeb_heads, pool_tokens=s < depth) for _ in range(N_MOD))
            for s in cfg.stages
        })
        self.mfsb = MFSB(cfg.bottleneck_channels)
        self.aux_decoder = Decoder(stage_ch, 1, cfg.class_count)
        self.fuse_decoder = Decoder([N_MOD * c for c in stage_ch], N_MOD, cfg.class_count)
        init_weights(self)

    # -- pieces

    def encode_mono(self, x: torch.Tensor, m: int) -> List[torch.Tensor]:
        return self.encoders[m](x)

    def encode_aux(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.aux_encoder(x)

    def enhance(self, feats: List[torch.Tensor], m: int) -> List[torch.Tensor]:
        out = list(feats)
        for s in self.cfg.stages:
            out[s - 1] = self.afeb[str(s)][m](out[s - 1])
        return out

    def decode_aux(self, feats: List[torch.Tensor], volume_channel: torch.Tensor) -> torch.Tensor:
        return self.aux_decoder(feats, volume_channel)

    def decode_fuse(self, bottleneck: torch.Tensor, skips: List[torch.Tensor], volume: torch.Tensor) -> torch.Tensor:
        return self.fuse_decoder(list(skips) + [bottleneck], volume)

    def _fuse(self, mono: List[Optional[List[torch.Tensor]]], volume: torch.Tensor, mask: ModalityMask):
        ref = next(f for f, a in zip(mono, mask.available) if a)
        depth = self.cfg.encoder_depth
        skips = []
        for s in range(depth - 1):
            skips.append(torch.cat([
                f[s] if a else torch.zeros_like(ref[s]) for f, a in zip(mono, mask.available)
            ], dim=1))
        bottleneck = [f[-1] if a else None for f, a in zip(mono, mask.available)]
        f_comp, synth = self.mfsb(bottleneck, mask)
        logits = self.decode_fuse(f_comp, skips, mask_volume(volume, mask))
        return logits, f_comp, synth

    # -- full passes

    def forward_full(self, volume: torch.Tensor, mask: ModalityMask = ModalityMask.full(), mode: str = "train") -> Dict[str, object]:
        """Training: six heads (four mono via the auxiliary decoder, teacher, fusion) plus the
        features the distillation and synthesis losses need. Inference: fusion head only."""
        if volume.dim() != 5 or volume.shape[1] != N_MOD:
            raise ShapeError(f"expected (B, 4, D, H, W) volume, got {tuple(volume.shape)}")
        mask.require_nonempty()
        if mode == "infer":
            mono = [
                self.enhance(self.encode_mono(volume[:, i:i + 1], i), i) if a else None
                for i, a in enumerate(mask.available)
            ]
            logits, f_comp, synth = self._fuse(mono, volume, mask)
            return {"heads": [logits], "f_comp": f_comp, "synth": synth}
        if mode != "train":
            raise ValueError(f"unknown mode {mode!r}")

        _check_complete(volume)
        raw = [self.encode_mono(volume[:, i:i + 1], i) for i in range(N_MOD)]
        mono = [self.enhance(f, i) for i, f in enumerate(raw)]
        teacher = self.encode_aux(volume)
        mono_heads = [self.decode_aux(mono[i], volume[:, i:i + 1]) for i in range(N_MOD)]
        teacher_head = self.fuse_decoder([p(t) for p, t in zip(self.aux_proj, teacher)], volume)
        fusion_head, f_comp, synth = self._fuse(mono, volume, mask)
        stages = self.cfg.stages
        return {
            "heads": mono_heads + [teacher_head, fusion_head],
            "student": [[mono[i][s - 1] for s in stages] for i in range(N_MOD)],
            "teacher": [teacher[s - 1] for s in stages],
            "synth": synth,
            "synth_target": [mono[i][-1] for i in range(N_MOD)],
            "f_comp": f_comp,
        }

    def forward(self, volume, mask: ModalityMask = ModalityMask.full()):
        return self.forward_full(volume, mask, mode="infer")["heads"][0]

    @torch.no_grad()
    def predict(self, volume: torch.Tensor, mask: ModalityMask) -> torch.Tensor:
        """Inference logits for arbitrary spatial dims (zero-padded up to a multiple of 2**depth)."""
        mult = 2 ** self.cfg.encoder_depth
        d, h, w = volume.shape[2:]
        pads = [(-n) % mult for n in (d, h, w)]
        if any(pads):
            volume = F.pad(volume, (0, pads[2], 0, pads[1], 0, pads[0]))
        logits = self.forward_full(volume, mask, mode="infer")["heads"][0]
        return logits[:, :, :d, :h, :w]


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
