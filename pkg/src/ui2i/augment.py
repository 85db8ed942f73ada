"""Differentiable scale augmentation and replay buffers for generated images
and bottleneck features."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class ScaleAugmentConfig:
    scale_min: float = 0.75
    scale_max: float = 1.5
    enabled: bool = True

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("require 0 < scale_min <= scale_max")


def scale_augment(x: torch.Tensor, s: float, crop_frac=None,
                  generator=None) -> torch.Tensor:
    """Rescale by factor ``s`` while preserving the spatial size.

    Zoom-out (s < 1) bilinearly downscales and reflection-pads back to the
    original size; zoom-in (s > 1) upscales and crops a random window
    (``crop_frac`` fixes the window for reuse across images). The whole
    operation is differentiable in ``x``.
    """
    if s <= 0:
        raise ValueError("scale factor must be positive")
    if s == 1.0:
        return x
    h, w = x.shape[2], x.shape[3]
    h2, w2 = max(1, round(h * s)), max(1, round(w * s))
    if (h2, w2) == (h, w):
        return x
    y = F.interpolate(x, size=(h2, w2), mode="bilinear", align_corners=False)
    if s < 1:
        pad_h, pad_w = h - h2, w - w2
        top, left = pad_h // 2, pad_w // 2
        return F.pad(y, (left, pad_w - left, top, pad_h - top), mode="reflect")
    if crop_frac is None:
        crop_frac = tuple(torch.rand(2, generator=generator).tolist())
    top = min(int(crop_frac[0] * (h2 - h + 1)), h2 - h)
    left = min(int(crop_frac[1] * (w2 - w + 1)), w2 - w)
    return y[:, :, top:top + h, left:left + w]


class ScaleTransform:
    """One sampled scale transform, reusable so that all images entering a
    discriminator evaluation share the same geometry."""

    def __init__(self, s: float, crop_frac):
        self.s = s
        self.crop_frac = crop_frac

    def __call__(self, x):
        return scale_augment(x, self.s, crop_frac=self.crop_frac)


def sample_scale_transform(cfg: ScaleAugmentConfig, generator=None) -> ScaleTransform:
    if not cfg.enabled:
        return ScaleTransform(1.0, (0.0, 0.0))
    draws = torch.rand(3, generator=generator).tolist()
    s = cfg.scale_min + draws[0] * (cfg.scale_max - cfg.scale_min)
    return ScaleTransform(s, (draws[1], draws[2]))


class ReplayBuffer:
    """Bounded store of detached tensors with uniform replacement and
    uniform sampling."""

    def __init__(self, capacity: int = 50, generator: torch.Generator | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.storage: list[torch.Tensor] = []
        self.generator = generator if generator is not None else torch.Generator()

    def __len__(self):
        return len(self.storage)

    def _randint(self, n: int) -> int:
        return int(torch.randint(n, (1,), generator=self.generator).item())

    def push_sample(self, current: torch.Tensor):
        """Insert ``current`` (detached), evicting a uniformly random element
        when full, then return ``(stored, sampled)`` where ``sampled`` is a
        uniform draw from the buffer after insertion."""
        stored = current.detach().clone()
        if len(self.storage) < self.capacity:
            self.storage.append(stored)
        else:
            self.storage[self._randint(self.capacity)] = stored
        sampled = self.storage[self._randint(len(self.storage))].clone()
        return stored, sampled

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "storage": [t.clone() for t in self.storage],
            "generator_state": self.generator.get_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.capacity = state["capacity"]
        self.storage = [t.clone() for t in state["storage"]]
        self.generator.set_state(state["generator_state"])
