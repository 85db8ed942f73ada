"""Dataset ingestion (lossless image IO, random-crop patch streams) and the
synthetic two-domain unmixing dataset used for desk-scale end-to-end checks."""

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageSequence

IMAGE_SUFFIXES = {".png", ".tif", ".tiff"}


def read_image(path) -> tuple[np.ndarray, int]:
    """Load a PNG/TIFF image as a (C, H, W) float array in [0, 1].

    Multi-page TIFFs are stacked page-per-channel. Returns the array and the
    source bit depth (8 or 16).
    """
    with Image.open(path) as im:
        frames = [np.array(f) for f in ImageSequence.Iterator(im)]
    planes = []
    bit_depth = 8
    for frame in frames:
        if frame.ndim == 3:
            planes.extend(frame[..., c] for c in range(frame.shape[2]))
        else:
            planes.append(frame)
    out = []
    for plane in planes:
        if plane.dtype == np.uint8:
            out.append(plane.astype(np.float32) / 255.0)
        else:
            # 16-bit data; PIL may surface it as uint16 or int32.
            bit_depth = 16
            out.append(plane.astype(np.float32) / 65535.0)
    return np.stack(out), bit_depth


def write_image(path, array: np.ndarray, bit_depth: int = 16) -> None:
    """Write a (C, H, W) float array in [0, 1] losslessly: grayscale or RGB
    for 1/3 channels, multi-page TIFF otherwise."""
    path = Path(path)
    arr = np.clip(np.asarray(array, dtype=np.float32), 0.0, 1.0)
    if arr.ndim == 2:
        arr = arr[None]
    if bit_depth == 8:
        quant = (arr * 255.0 + 0.5).astype(np.uint8)
    elif bit_depth == 16:
        quant = (arr * 65535.0 + 0.5).astype(np.uint16)
    else:
        raise ValueError("bit_depth must be 8 or 16")
    channels = quant.shape[0]
    if channels == 3 and bit_depth == 8:
        Image.fromarray(np.moveaxis(quant, 0, 2)).save(path)
        return
    pages = [Image.fromarray(quant[c]) for c in range(channels)]
    if channels == 1:
        pages[0].save(path)
        return
    if path.suffix.lower() not in (".tif", ".tiff"):
        raise ValueError(f"{channels}-channel images require a TIFF path, got {path.suffix}")
    pages[0].save(path, save_all=True, append_images=pages[1:])


def list_image_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValueError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def probe_channels(directory) -> int:
    """Channel count of the first readable image in a directory."""
    for path in list_image_files(directory):
        try:
            arr, _ = read_image(path)
        except Exception:
            continue
        return arr.shape[0]
    raise ValueError(f"no readable images in {directory}")


def read_mask(path) -> np.ndarray:
    """Load an instance-label mask as an integer (H, W) array, ids unscaled."""
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValueError(f"instance masks must be single-channel, got shape {arr.shape}")
    return arr.astype(np.int64)


def _resize(array: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(array).unsqueeze(0)
    t = F.interpolate(t, size=(size, size), mode="bilinear",
                      align_corners=False, antialias=True)
    return t.squeeze(0).numpy()


class PatchStream:
    """Infinite shuffled stream of normalized random crops from one domain
    directory.

    Pixels are mapped from storage range to [-1, 1]; crops get independent
    random horizontal/vertical flips. The stream is deterministic given its
    seed and serializes its RNG state for checkpoint resume.
    """

    def __init__(self, directory, patch_size: int, seed: int, resize_to=None):
        self.patch_size = patch_size
        self.images = []
        for path in list_image_files(directory):
            try:
                arr, _ = read_image(path)
            except Exception as exc:  # unreadable file: skip, keep going
                warnings.warn(f"skipping unreadable image {path}: {exc}")
                continue
            if resize_to is not None:
                arr = _resize(arr, resize_to)
            if arr.shape[1] < patch_size or arr.shape[2] < patch_size:
                raise ValueError(
                    f"{path} is {arr.shape[1]}x{arr.shape[2]}, smaller than "
                    f"patch size {patch_size}")
            self.images.append(arr)
        if not self.images:
            raise ValueError(f"no readable images in {directory}")
        channel_counts = {im.shape[0] for im in self.images}
        if len(channel_counts) != 1:
            raise ValueError(f"inconsistent channel counts in {directory}: {channel_counts}")
        self.channels = channel_counts.pop()
        self.generator = torch.Generator().manual_seed(seed)

    def __iter__(self):
        return self

    def __next__(self) -> torch.Tensor:
        draws = torch.rand(5, generator=self.generator).tolist()
        image = self.images[min(int(draws[0] * len(self.images)), len(self.images) - 1)]
        _, h, w = image.shape
        top = min(int(draws[1] * (h - self.patch_size + 1)), h - self.patch_size)
        left = min(int(draws[2] * (w - self.patch_size + 1)), w - self.patch_size)
        patch = image[:, top:top + self.patch_size, left:left + self.patch_size]
        if draws[3] < 0.5:
            patch = patch[:, :, ::-1]
        if draws[4] < 0.5:
            patch = patch[:, ::-1, :]
        return torch.from_numpy(patch.copy()) * 2.0 - 1.0

    def state_dict(self) -> dict:
        return {"generator_state": self.generator.get_state()}

    def load_state_dict(self, state: dict) -> None:
        self.generator.set_state(state["generator_state"])


def domain_median(directory, resize_to=None) -> float:
    """Median pixel value of a domain's images in the [-1, 1] network range."""
    values = []
    for path in list_image_files(directory):
        try:
            arr, _ = read_image(path)
        except Exception:
            continue
        if resize_to is not None:
            arr = _resize(arr, resize_to)
        values.append(arr.ravel())
    if not values:
        raise ValueError(f"no readable images in {directory}")
    return float(np.median(np.concatenate(values)) * 2.0 - 1.0)


@dataclass
class SyntheticUnmixSpec:
    """Desk-scale two-marker scene: soft disks on channel 1, soft rings on
    channel 2, mixed into one channel by clipped addition plus noise."""
    canvas: int = 64
    disks_min: int = 3
    disks_max: int = 8
    disk_r_min: float = 3.0
    disk_r_max: float = 7.0
    rings_min: int = 2
    rings_max: int = 5
    ring_r_min: float = 6.0
    ring_r_max: float = 12.0
    ring_width: float = 2.0
    noise_sigma: float = 0.02


def _render_scene(spec: SyntheticUnmixSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one (2, canvas, canvas) scene: disks in channel 0, rings in channel 1."""
    n = spec.canvas
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    scene = np.zeros((2, n, n), dtype=np.float32)

    def center(radius):
        margin = min(radius, n / 2 - 1)
        return rng.uniform(margin, n - margin, size=2)

    for _ in range(rng.integers(spec.disks_min, spec.disks_max + 1)):
        r = rng.uniform(spec.disk_r_min, spec.disk_r_max)
        cy, cx = center(r)
        d = np.hypot(yy - cy, xx - cx)
        mask = np.clip(r - d + 0.5, 0.0, 1.0)  # 1-px soft edge
        scene[0] = np.maximum(scene[0], rng.uniform(0.6, 1.0) * mask)
    for _ in range(rng.integers(spec.rings_min, spec.rings_max + 1)):
        r = rng.uniform(spec.ring_r_min, spec.ring_r_max)
        cy, cx = center(r + spec.ring_width)
        d = np.hypot(yy - cy, xx - cx)
        mask = np.clip(spec.ring_width / 2 - np.abs(d - r) + 0.5, 0.0, 1.0)
        scene[1] = np.maximum(scene[1], rng.uniform(0.6, 1.0) * mask)
    return scene


def mix_channels(scene: np.ndarray, rng=None, sigma: float = 0.0) -> np.ndarray:
    mixed = scene[0] + scene[1]
    if rng is not None and sigma > 0:
        mixed = mixed + rng.normal(0.0, sigma, size=mixed.shape)
    return np.clip(mixed, 0.0, 1.0)[None].astype(np.float32)


def generate_unmix_dataset(spec: SyntheticUnmixSpec, out_dir, n_train_mixed: int,
                           n_train_unmixed: int, n_test_pairs: int, seed: int) -> dict:
    """Write an unpaired synthetic dataset: two-channel images under
    ``domainA/``, single-channel mixed images under ``domainB/``, and aligned
    held-out pairs under ``test_pairs/`` for evaluation only. The three
    splits draw from disjoint RNG streams, so the training domains are
    content-unpaired by construction."""
    out = Path(out_dir)
    dirs = {
        "domain_a": out / "domainA",
        "domain_b": out / "domainB",
        "test_mixed": out / "test_pairs" / "mixed",
        "test_ch1": out / "test_pairs" / "ch1",
        "test_ch2": out / "test_pairs" / "ch2",
    }
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    unmixed_rng, mixed_rng, test_rng = (
        np.random.Generator(np.random.PCG64(s))
        for s in np.random.SeedSequence(seed).spawn(3))

    for i in range(n_train_unmixed):
        scene = _render_scene(spec, unmixed_rng)
        write_image(dirs["domain_a"] / f"unmixed_{i:04d}.tif", scene)
    for i in range(n_train_mixed):
        scene = _render_scene(spec, mixed_rng)
        mixed = mix_channels(scene, mixed_rng, spec.noise_sigma)
        write_image(dirs["domain_b"] / f"mixed_{i:04d}.png", mixed)
    for i in range(n_test_pairs):
        scene = _render_scene(spec, test_rng)
        mixed = mix_channels(scene, test_rng, spec.noise_sigma)
        stem = f"pair_{i:04d}.png"
        write_image(dirs["test_mixed"] / stem, mixed)
        write_image(dirs["test_ch1"] / stem, scene[0:1])
        write_image(dirs["test_ch2"] / stem, scene[1:2])
    return {k: str(v) for k, v in dirs.items()}


def _pad_axis_symmetric(x: torch.Tensor, dim: int, pad: int) -> torch.Tensor:
    # Edge-inclusive mirror padding, applied in chunks so it also works when
    # the padding exceeds the axis length (e.g. padding a length-1 axis).
    while pad > 0:
        take = min(pad, x.shape[dim])
        tail = x.narrow(dim, x.shape[dim] - take, take).flip(dim)
        x = torch.cat([x, tail], dim=dim)
        pad -= take
    return x


def pad_to_divisible(x: torch.Tensor, factor: int):
    """Mirror-pad the bottom/right of (..., H, W) up to the next multiple of
    ``factor``; the returned record inverts the padding exactly."""
    h, w = x.shape[-2], x.shape[-1]
    pad_h = (-h) % factor
    pad_w = (-w) % factor
    if pad_h:
        x = _pad_axis_symmetric(x, x.ndim - 2, pad_h)
    if pad_w:
        x = _pad_axis_symmetric(x, x.ndim - 1, pad_w)
    return x, (h, w)


def unpad(x: torch.Tensor, record) -> torch.Tensor:
    h, w = record
    return x[..., :h, :w]
