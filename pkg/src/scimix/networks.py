"""Network architectures: semantic/non-semantic encoders, linear classifier
head, style-modulated generator, discriminator, and the weight-demodulation
primitive.

GroupNorm is used instead of BatchNorm so forward passes are per-sample
independent and deterministic in both train and eval mode.
"""

from __future__ import annotations

import io
import json
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def _gn(channels):
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    """Pre-activation residual block."""

    def __init__(self, ch):
        super().__init__()
        self.net = nn.Sequential(
            _gn(ch), nn.ReLU(),
            nn.Conv2d(ch, ch, 3, padding=1),
            _gn(ch), nn.ReLU(),
            nn.Conv2d(ch, ch, 3, padding=1),
        )

    def forward(self, x):
        return x + self.net(x)


class _Trunk(nn.Module):
    """Shared encoder trunk: stem + 3 stages with configurable strides."""

    def __init__(self, in_ch, width, strides):
        super().__init__()
        chs = [width, 2 * width, 4 * width]
        layers = [nn.Conv2d(in_ch, width, 3, padding=1)]
        prev = width
        for ch, stride in zip(chs, strides):
            layers.append(nn.Conv2d(prev, ch, 3, stride=stride, padding=1))
            layers.append(ResBlock(ch))
            prev = ch
        layers += [_gn(prev), nn.ReLU()]
        self.net = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, x):
        return self.net(x)


class SemanticEncoder(nn.Module):
    """Image -> semantic code z_c [B, d_c] via global average pooling."""

    def __init__(self, in_ch=3, width=16, d_c=128):
        super().__init__()
        # early downsampling keeps the trunk cheap on CPU
        self.trunk = _Trunk(in_ch, width, strides=(2, 2, 1))
        self.proj = nn.Conv2d(self.trunk.out_channels, d_c, 1)
        self.d_c = d_c

    def forward(self, x):
        h = self.proj(self.trunk(x))
        return h.mean(dim=(2, 3))


class NonSemanticEncoder(nn.Module):
    """Image -> spatial context code z_r [B, c_r, H/s, W/s]."""

    def __init__(self, in_ch=3, width=16, c_r=64, downsample=8):
        super().__init__()
        n_strided = int(math.log2(downsample))
        if 2 ** n_strided != downsample or not 1 <= n_strided <= 3:
            raise ValueError("downsample must be 2, 4 or 8")
        strides = tuple(2 if i < n_strided else 1 for i in range(3))
        self.trunk = _Trunk(in_ch, width, strides=strides)
        self.proj = nn.Conv2d(self.trunk.out_channels, c_r, 1)
        self.c_r = c_r
        self.downsample = downsample

    def forward(self, x):
        return self.proj(self.trunk(x))


class ClassifierHead(nn.Module):
    """Single affine map from semantic code to class logits."""

    def __init__(self, d_c=128, n_classes=4):
        super().__init__()
        self.fc = nn.Linear(d_c, n_classes)

    def forward(self, z_c):
        if z_c.shape[-1] != self.fc.in_features:
            raise ValueError(
                f"expected width {self.fc.in_features}, got {z_c.shape[-1]}")
        return self.fc(z_c)


def modulate_weights(weights, style_scales, eps=1e-8):
    """Scale conv weights per input channel, then renormalize each output
    channel to unit Euclidean norm (StyleGAN2 demodulation).

    weights: [C_out, C_in, k, k]; style_scales: [C_in].
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    w = weights * style_scales[None, :, None, None]
    demod = torch.rsqrt(w.pow(2).sum(dim=(1, 2, 3), keepdim=True) + eps)
    return w * demod


class ModulatedConv2d(nn.Module):
    """Conv whose weights are modulated by a per-sample style vector.

    Implemented as a grouped convolution over the batch.
    """

    def __init__(self, in_ch, out_ch, kernel_size, style_dim, demodulate=True,
                 eps=1e-8):
        super().__init__()
        self.weight = nn.Parameter(
            torch.randn(out_ch, in_ch, kernel_size, kernel_size)
            / math.sqrt(in_ch * kernel_size ** 2))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = nn.Linear(style_dim, in_ch)
        nn.init.zeros_(self.affine.weight)
        nn.init.ones_(self.affine.bias)
        self.demodulate = demodulate
        self.eps = eps
        self.padding = kernel_size // 2

    def forward(self, x, style):
        b, c_in, h, w_sp = x.shape
        scales = self.affine(style)  # [B, C_in]
        w = self.weight[None] * scales[:, None, :, None, None]
        if self.demodulate:
            demod = torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4), keepdim=True) + self.eps)
            w = w * demod
        out_ch = self.weight.shape[0]
        x = x.reshape(1, b * c_in, h, w_sp)
        w = w.reshape(b * out_ch, c_in, *self.weight.shape[2:])
        out = F.conv2d(x, w, padding=self.padding, groups=b)
        out = out.reshape(b, out_ch, *out.shape[2:])
        return out + self.bias[None, :, None, None]


class StyleModulatedGenerator(nn.Module):
    """Synthesis stack consuming the spatial code as input activation and the
    style vector through per-layer modulated convolutions. Output is squashed
    to [-1, 1] by tanh.
    """

    def __init__(self, in_ch=64, style_dim=128, out_ch=3, upsamples=3,
                 width=32):
        super().__init__()
        self.convs = nn.ModuleList()
        # channel count halves with each upsample (min 16)
        chs = [max(width * 2 // (2 ** i), 16) for i in range(upsamples + 1)]
        prev = in_ch
        for ch in chs:
            self.convs.append(ModulatedConv2d(prev, ch, 3, style_dim))
            prev = ch
        self.to_rgb = ModulatedConv2d(prev, out_ch, 1, style_dim,
                                      demodulate=False)
        self.upsamples = upsamples
        self.in_ch = in_ch
        self.style_dim = style_dim

    def forward(self, style, spatial):
        if style.shape[0] != spatial.shape[0]:
            raise ValueError("style/spatial batch sizes differ")
        if spatial.shape[1] != self.in_ch:
            raise ValueError(
                f"expected spatial input with {self.in_ch} channels, got {spatial.shape[1]}")
        h = F.leaky_relu(self.convs[0](spatial, style), 0.2)
        for conv in self.convs[1:]:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.leaky_relu(conv(h, style), 0.2)
        return torch.tanh(self.to_rgb(h, style))


class Discriminator(nn.Module):
    """Image -> realness logit [B, 1]."""

    def __init__(self, in_ch=3, width=16, image_size=32):
        super().__init__()
        layers = []
        prev = in_ch
        size = image_size
        ch = width
        while size > 4:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                       nn.LeakyReLU(0.2)]
            prev, ch, size = ch, min(2 * ch, 8 * width), size // 2
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(prev * size * size, 1)

    def forward(self, x):
        h = self.features(x)
        return self.fc(h.flatten(1))


class LatentRouter(nn.Module):
    """Maps (z_c, z_r) to the generator's (style, spatial) interface.

    The standard wiring feeds z_c as the style code and z_r as the spatial
    input. The swapped wiring (the structural-semantic ablation) pools z_r
    into the style code and projects z_c into the spatial input.
    """

    def __init__(self, d_c, c_r, spatial_size, swapped=False):
        super().__init__()
        self.swapped = swapped
        self.spatial_size = spatial_size
        if swapped:
            self.project = nn.Linear(d_c, c_r * spatial_size * spatial_size)
        else:
            self.project = None
        self.c_r = c_r

    def forward(self, z_c, z_r):
        if not self.swapped:
            return z_c, z_r
        style = z_r.mean(dim=(2, 3))  # [B, c_r]
        spatial = self.project(z_c).reshape(
            z_c.shape[0], self.c_r, self.spatial_size, self.spatial_size)
        return style, spatial


def ema_update(teacher, student, beta):
    """In-place convex combination: teacher <- beta*teacher + (1-beta)*student.

    Accepts two nn.Modules or two lists of tensors with identical structure.
    """
    if isinstance(teacher, nn.Module):
        t_params = list(teacher.parameters()) + list(teacher.buffers())
        s_params = list(student.parameters()) + list(student.buffers())
    else:
        t_params, s_params = list(teacher), list(student)
    if len(t_params) != len(s_params):
        raise ValueError("parameter structures do not match")
    with torch.no_grad():
        for t, s in zip(t_params, s_params):
            if t.shape != s.shape:
                raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
            if t.dtype.is_floating_point:
                t.mul_(beta).add_(s, alpha=1.0 - beta)
            else:
                t.copy_(s)
    return teacher


class NetworkBundle(nn.Module):
    """The five SciMix networks plus latent routing, built from config dims."""

    def __init__(self, image_size=32, channels=3, n_classes=4, d_c=128,
                 c_r=64, downsample=8, width=16, gen_width=32, disc_width=16,
                 swapped_latents=False):
        super().__init__()
        self.dims = dict(image_size=image_size, channels=channels,
                         n_classes=n_classes, d_c=d_c, c_r=c_r,
                         downsample=downsample, width=width,
                         gen_width=gen_width, disc_width=disc_width,
                         swapped_latents=swapped_latents)
        spatial = image_size // downsample
        self.e_c = SemanticEncoder(channels, width, d_c)
        self.e_r = NonSemanticEncoder(channels, width, c_r, downsample)
        self.head = ClassifierHead(d_c, n_classes)
        self.router = LatentRouter(d_c, c_r, spatial, swapped=swapped_latents)
        style_dim = c_r if swapped_latents else d_c
        self.gen = StyleModulatedGenerator(
            in_ch=c_r, style_dim=style_dim, out_ch=channels,
            upsamples=int(math.log2(downsample)), width=gen_width)
        self.disc = Discriminator(channels, disc_width, image_size)

    @classmethod
    def from_config(cls, cfg, swapped_latents=False):
        d = cfg["data"]
        m = cfg["model"]
        return cls(image_size=d["image_size"], channels=d["channels"],
                   n_classes=d["n_classes"], d_c=m["d_c"], c_r=m["c_r"],
                   downsample=m["downsample"], width=m["width"],
                   gen_width=m["gen_width"], disc_width=m["disc_width"],
                   swapped_latents=swapped_latents)

    def generate(self, z_c, z_r):
        style, spatial = self.router(z_c, z_r)
        return self.gen(style, spatial)

    def reconstruct(self, x):
        return self.generate(self.e_c(x), self.e_r(x))


_CKPT_GROUPS = {"E_c": "e_c", "E_r": "e_r", "C": "head", "G": "gen",
                "D": "disc", "R": "router"}


def save_checkpoint(bundle, path, step=0, seed=0, config_hash="", ema_step=0,
                    split_hash="", protocol_hash="", extra_state=None):
    """Write all networks as a single npz archive of named arrays plus a
    JSON metadata block.
    """
    arrays = {}
    for prefix, attr in _CKPT_GROUPS.items():
        module = getattr(bundle, attr)
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    if extra_state:
        for name, tensor in extra_state.items():
            arrays[f"X/{name}"] = tensor.detach().cpu().numpy()
    meta = dict(step=int(step), seed=int(seed), config_hash=config_hash,
                ema_step=int(ema_step), split_hash=split_hash,
                protocol_hash=protocol_hash, dims=bundle.dims)
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Rebuild a NetworkBundle (and metadata) from a checkpoint archive."""
    data = np.load(path)
    meta = json.loads(bytes(data["__meta__"]).decode())
    bundle = NetworkBundle(**meta["dims"])
    for prefix, attr in _CKPT_GROUPS.items():
        module = getattr(bundle, attr)
        state = {}
        for key in data.files:
            if key.startswith(prefix + "/"):
                state[key[len(prefix) + 1:]] = torch.from_numpy(data[key])
        module.load_state_dict(state)
    extra = {key[2:]: torch.from_numpy(data[key])
             for key in data.files if key.startswith("X/")}
    return bundle, meta, extra
