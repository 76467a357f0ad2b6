"""Self-describing byte container for one coded image.

Layout (all multi-byte fields little-endian):

    magic    4 bytes  b"RDPB"
    version  u8
    height   u16
    width    u16
    arch     8 bytes  truncated arch-config hash
    frozen   8 bytes  truncated hash of the rate-determining sub-networks
    z_length u32      hyper-latent payload bytes
    y_length u32      latent payload bytes
    z payload, y payload

A stream decodes with nothing but a codec whose frozen sub-networks match
the recorded hash; decoders fine-tuned under different perceptual weights
share the identical stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from . import rangecoder as rc
from .codec import (
    Codec,
    HYPER_SUPPORT,
    LATENT_SUPPORT,
    QuantizedLatents,
    arch_hash,
    subnet_hash,
)
from .errors import BitstreamError, DimensionMismatchError

MAGIC = b"RDPB"
VERSION = 1
_HEADER_FMT = "<4sBHH8s8sII"
HEADER_LEN = struct.calcsize(_HEADER_FMT)

# Sub-networks whose parameters determine the coded bytes.
RATE_SUBNETS = ("analysis", "hyper_analysis", "hyper_synthesis", "factorized_prior")


@dataclass(frozen=True)
class Header:
    height: int
    width: int
    arch_tag: bytes
    frozen_tag: bytes
    z_length: int
    y_length: int

    def pack(self) -> bytes:
        return struct.pack(
            _HEADER_FMT,
            MAGIC,
            VERSION,
            self.height,
            self.width,
            self.arch_tag,
            self.frozen_tag,
            self.z_length,
            self.y_length,
        )

    @classmethod
    def unpack(cls, data: bytes) -> "Header":
        if len(data) < HEADER_LEN:
            raise BitstreamError("bitstream shorter than its header")
        magic, version, h, w, atag, ftag, zlen, ylen = struct.unpack(
            _HEADER_FMT, data[:HEADER_LEN]
        )
        if magic != MAGIC:
            raise BitstreamError("bad magic: not an rdplab bitstream")
        if version != VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        return cls(h, w, atag, ftag, zlen, ylen)


def frozen_hash(codec: Codec) -> str:
    """Hash of everything that determines coded bytes (the rate identity)."""
    return subnet_hash(codec, RATE_SUBNETS)


def _tags(codec: Codec) -> Tuple[bytes, bytes]:
    a = bytes.fromhex(arch_hash(codec.arch))[:8]
    f = bytes.fromhex(frozen_hash(codec))[:8]
    return a, f


def _single_image(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1:
        raise DimensionMismatchError(
            f"the coder takes one image at a time, got {tuple(x.shape)}"
        )
    return x


def _z_tables(codec: Codec) -> np.ndarray:
    loc, scale = codec.factorized_prior.location_scale()
    return rc.logistic_cum_matrix(
        loc.detach().numpy(), scale.detach().numpy(), HYPER_SUPPORT
    )


def encode_latents_arrays(
    codec: Codec, latents: QuantizedLatents
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integer symbol grids (z, y residual) and the sigma field for tables."""
    z = torch.round(latents.z_hat[0]).long().numpy()
    residual = torch.round(latents.y_hat - latents.gaussian.mu)[0].long().numpy()
    sigma = latents.gaussian.sigma[0].detach().double().numpy()
    return z, residual, sigma


def encode_image(x: torch.Tensor, codec: Codec) -> bytes:
    """Run the eval-mode pipeline and code the latents into a bitstream."""
    x = _single_image(x)
    with torch.no_grad():
        latents = codec.encode_latents(x)
        z, residual, sigma = encode_latents_arrays(codec, latents)

    z_cums = _z_tables(codec)
    cz = z.shape[0]
    z_rows = np.repeat(np.arange(cz), z.shape[1] * z.shape[2])
    z_payload = rc.encode_indexed(z.ravel(), z_cums, z_rows, HYPER_SUPPORT[0])

    sig = sigma.ravel()
    y_cums = rc.gaussian_cum_matrix(np.zeros_like(sig), sig, LATENT_SUPPORT)
    y_rows = np.arange(sig.shape[0])
    y_payload = rc.encode_indexed(
        residual.ravel(), y_cums, y_rows, LATENT_SUPPORT[0]
    )

    atag, ftag = _tags(codec)
    header = Header(
        height=x.shape[2],
        width=x.shape[3],
        arch_tag=atag,
        frozen_tag=ftag,
        z_length=len(z_payload),
        y_length=len(y_payload),
    )
    return header.pack() + z_payload + y_payload


def decode_latents(data: bytes, codec: Codec) -> QuantizedLatents:
    """Recover the exact integer latents coded by ``encode_image``."""
    header = Header.unpack(data)
    atag, ftag = _tags(codec)
    if header.arch_tag != atag:
        raise BitstreamError("bitstream was coded with a different architecture")
    if header.frozen_tag != ftag:
        raise BitstreamError(
            "frozen-parameter hash mismatch: refusing to decode with these weights"
        )
    if len(data) != HEADER_LEN + header.z_length + header.y_length:
        raise BitstreamError("bitstream length does not match its header")

    arch = codec.arch
    fy = 2 ** arch.downsampling_stages
    fz = 2 ** (arch.downsampling_stages + arch.hyper_downsampling_stages)
    if header.height % fz or header.width % fz:
        raise BitstreamError("recorded image dims incompatible with architecture")
    hy, wy = header.height // fy, header.width // fy
    hz, wz = header.height // fz, header.width // fz

    z_payload = data[HEADER_LEN : HEADER_LEN + header.z_length]
    y_payload = data[HEADER_LEN + header.z_length :]

    cz, cy = arch.hyper_channels, arch.latent_channels
    z_cums = _z_tables(codec)
    z_rows = np.repeat(np.arange(cz), hz * wz)
    z_vals = rc.decode_indexed(
        z_payload, z_cums, z_rows, HYPER_SUPPORT[0], cz * hz * wz
    )
    dtype = next(codec.parameters()).dtype
    z_hat = torch.from_numpy(z_vals.reshape(1, cz, hz, wz)).to(dtype)

    with torch.no_grad():
        g = codec.run_hyper_synthesis(z_hat)
    sig = g.sigma[0].double().numpy().ravel()
    y_cums = rc.gaussian_cum_matrix(np.zeros_like(sig), sig, LATENT_SUPPORT)
    y_rows = np.arange(sig.shape[0])
    res = rc.decode_indexed(
        y_payload, y_cums, y_rows, LATENT_SUPPORT[0], cy * hy * wy
    )
    residual = torch.from_numpy(res.reshape(1, cy, hy, wy)).to(dtype)
    y_hat = residual + g.mu
    return QuantizedLatents(y_hat, z_hat, g)


def decode_image(data: bytes, codec: Codec) -> torch.Tensor:
    """Decode a bitstream to an image in [0, 1]."""
    latents = decode_latents(data, codec)
    with torch.no_grad():
        x_hat = codec.run_synthesis(latents.y_hat)
    return torch.clamp(x_hat, 0.0, 1.0)


def actual_bpp(data: bytes, num_pixels: int) -> float:
    """Real rate of a coded stream: total bytes * 8 / source pixels."""
    return len(data) * 8.0 / num_pixels


def payload_overhead_bytes() -> int:
    """Framing bytes that do not scale with content: header + two flushes."""
    return HEADER_LEN + 2 * rc.FLUSH_BYTES
