"""Gaussian mechanism on client gradient packets: global L2 clipping, then noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import ConfigurationError

SITES = ("client", "server", "both")


@dataclass(frozen=True)
class DPConfig:
    enabled: bool = False
    clip_norm: float = 1.0
    noise_multiplier: float = 0.5
    site: str = "client"

    def __post_init__(self):
        if self.enabled and not self.clip_norm > 0:
            raise ConfigurationError("dp.clip_norm must be > 0")
        if self.noise_multiplier < 0:
            raise ConfigurationError("dp.noise_multiplier must be >= 0")
        if self.site not in SITES:
            raise ConfigurationError(f"dp.site must be one of {SITES}")


def _tensors(packet):
    return packet.tensors if hasattr(packet, "tensors") else packet


def _rebuild(packet, tensors):
    return replace(packet, tensors=tensors) if hasattr(packet, "tensors") else tensors


def global_norm(packet):
    return math.sqrt(sum(float((v * v).sum()) for v in _tensors(packet).values()))


def clip_packet(packet, clip_norm):
    """Scale the whole packet by ``C / norm`` if its global L2 norm exceeds ``C``."""
    norm = global_norm(packet)
    if norm <= clip_norm:
        return packet
    scale = clip_norm / norm
    return _rebuild(packet, {k: v * scale for k, v in _tensors(packet).items()})


def gaussianize(packet, noise_multiplier, clip_norm, rng):
    """Add i.i.d. N(0, (sigma C)^2) to every entry, unused-head zeros included.

    Tensors are visited in sorted name order so a seeded ``rng`` always
    produces the same noise.
    """
    if noise_multiplier == 0:
        return packet
    std = noise_multiplier * clip_norm
    t = _tensors(packet)
    return _rebuild(packet, {k: t[k] + std * rng.normal(size=t[k].shape) for k in sorted(t)})


def privatize(packet, dp: DPConfig, rng):
    """Client side: always clip when enabled, add noise unless only the server noises."""
    if not dp.enabled:
        return packet
    packet = clip_packet(packet, dp.clip_norm)
    if dp.site == "server":
        return packet
    return gaussianize(packet, dp.noise_multiplier, dp.clip_norm, rng)


def server_noise(mean_tensors, dp: DPConfig, num_clients, rng):
    """Noise on the averaged update, calibrated to the mean's sensitivity ``C / U``."""
    if not dp.enabled or dp.site == "client" or dp.noise_multiplier == 0:
        return mean_tensors
    std = dp.noise_multiplier * dp.clip_norm / num_clients
    return {k: mean_tensors[k] + std * rng.normal(size=mean_tensors[k].shape) for k in sorted(mean_tensors)}
