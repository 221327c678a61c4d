"""Service configuration."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class HostConfig:
    """Where to listen and which model checkpoints to load.

    Checkpoint selectors are provider specs: the built-in deterministic
    providers load as "toy"; any other value is treated as a checkpoint
    identifier for the corresponding optional real-model wrapper.
    """

    host: str = "127.0.0.1"
    port: int = 8080
    encoder: str = "toy"
    generator: str = "toy"
    extractor: str = "toy"
    image_size: int = 384
    device: str = "cpu"
    max_batch: int = 64

    def __post_init__(self):
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if not (0 <= self.port <= 65535):
            raise ValueError("port must be a valid TCP port")
