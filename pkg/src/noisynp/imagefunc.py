"""Images as functions from pixel coordinates to normalized channel values."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError
from .funcdata import NoiseSpec, PointSet, TaskBatch, _noise_plan, inject_noise

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
SUPPORTED_DTYPES = (np.uint8, np.uint16, np.float16, np.float32)


@dataclass
class NormStats:
    mean: np.ndarray   # [C]
    std: np.ndarray    # [C]


@dataclass
class ImageFunctionSet:
    images: np.ndarray          # [N, H, W, C], raw values
    stats: NormStats

    @property
    def shape(self):
        return self.images.shape[1:]

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def from_arrays(cls, images, stats: Optional[NormStats] = None) -> "ImageFunctionSet":
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4:
            raise ConfigError(f"images must be [N, H, W, C], got {images.shape}")
        if images.dtype.type not in SUPPORTED_DTYPES:
            raise ConfigError(f"unsupported image dtype {images.dtype}")
        if stats is None:
            flat = images.reshape(-1, images.shape[-1]).astype(np.float64)
            std = flat.std(axis=0)
            stats = NormStats(flat.mean(axis=0), np.where(std > 0, std, 1.0))
        return cls(images, stats)

    @classmethod
    def from_directory(cls, directory, size: int = 32, stats: Optional[NormStats] = None
                       ) -> "ImageFunctionSet":
        files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ConfigError(f"no images found in {directory}")
        arrays = []
        for f in files:
            with Image.open(f) as im:
                arrays.append(np.asarray(im.convert("RGB").resize((size, size), Image.BILINEAR)))
        return cls.from_arrays(np.stack(arrays), stats)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Coordinates in [-1, 1]^2, row-major, shape [H*W, 2]."""
    rows = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    cols = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=-1)


def image_to_function(image, stats: NormStats, shape: Optional[Sequence[int]] = None) -> PointSet:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    if shape is not None and tuple(image.shape) != tuple(shape):
        raise ConfigError(f"image shape {image.shape} does not match set shape {tuple(shape)}")
    h, w, c = image.shape
    if c != stats.mean.shape[0]:
        raise ConfigError(f"image has {c} channels, stats have {stats.mean.shape[0]}")
    y = (image.reshape(h * w, c).astype(np.float64) - stats.mean) / stats.std
    return PointSet(pixel_grid(h, w)[None], y[None])


def function_to_image(values, stats: NormStats, height: int, width: int, dtype=np.uint8,
                      clamp: bool = False) -> np.ndarray:
    """Inverse of :func:`image_to_function` for ``[H*W, C]`` normalized values."""
    values = np.asarray(values, dtype=np.float64).reshape(height, width, -1)
    raw = values * stats.std + stats.mean
    dtype = np.dtype(dtype)
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        raw = np.rint(raw)
        if clamp:
            raw = np.clip(raw, info.min, info.max)
    elif clamp:
        raw = np.clip(raw, 0.0, 1.0)
    return raw.astype(dtype)


def sample_image_task(images: ImageFunctionSet, n_ctx: int, n_tar: Optional[int],
                      noise: NoiseSpec, setup: int, phase: str, rng: np.random.Generator,
                      batch_size: int = 1, image_index=None) -> TaskBatch:
    """Disjoint random pixel subsets as context/targets, noised per setup and phase.

    ``n_tar=None`` takes every pixel not in the context as a target.
    """
    h, w, c = images.shape
    n_pix = h * w
    if n_tar is None:
        n_tar = n_pix - n_ctx
    if n_ctx < 0 or n_tar < 1 or n_ctx + n_tar > n_pix:
        raise ConfigError(f"{n_ctx} context + {n_tar} target pixels exceed {n_pix} pixels")
    noise_ctx_on, noise_tar_on = _noise_plan(setup, phase)
    if image_index is None:
        image_index = rng.integers(0, len(images), size=batch_size)
    image_index = np.atleast_1d(image_index)
    grid = pixel_grid(h, w)
    bsz = image_index.shape[0]
    xc = np.empty((bsz, n_ctx, 2)); yc = np.empty((bsz, n_ctx, c))
    xt = np.empty((bsz, n_tar, 2)); yt = np.empty((bsz, n_tar, c))
    mask_c = np.zeros((bsz, n_ctx), dtype=bool)
    mask_t = np.zeros((bsz, n_tar), dtype=bool)
    clean_c = np.empty_like(yc); clean_t = np.empty_like(yt)
    for b, i in enumerate(image_index):
        fn = image_to_function(images.images[i], images.stats)
        perm = rng.permutation(n_pix)
        ci, ti = perm[:n_ctx], perm[n_ctx:n_ctx + n_tar]
        xc[b], xt[b] = grid[ci], grid[ti]
        clean_c[b], clean_t[b] = fn.y[0, ci], fn.y[0, ti]
        yc[b], yt[b] = clean_c[b], clean_t[b]
        if noise_ctx_on:
            yc[b], mask_c[b] = inject_noise(clean_c[b], noise, rng)
        if noise_tar_on:
            yt[b], mask_t[b] = inject_noise(clean_t[b], noise, rng)
    return TaskBatch(PointSet(xc, yc), PointSet(xt, yt), clean_t, mask_c, mask_t,
                     setup, phase, clean_ctx_y=clean_c)


def _mixture_moments(mean: torch.Tensor, std: torch.Tensor):
    """Mean and std of an equal-weight mixture over the leading axis."""
    mu = mean.mean(0)
    var = (std ** 2).mean(0) + mean.var(0, unbiased=False)
    return mu, var.sqrt()


@torch.no_grad()
def render_prediction(model, images: ImageFunctionSet, task: TaskBatch, K: int = 30,
                      rng: Optional[np.random.Generator] = None, dtype=None):
    """Predict every pixel of the task's image from its context.

    Latent models sample ``z`` from the context-conditioned prior; bootstrap
    models average their members. Returns ``(image, std_map)`` where the image
    is de-normalized and clamped to the valid range, and ``std_map`` is the
    per-pixel mixture std in normalized units ``[H, W, C]``.
    """
    from .models import TaskTensors

    rng = rng or np.random.default_rng(0)
    h, w, c = images.shape
    param = next(iter(model.parameters()), None)
    ft = param.dtype if param is not None else torch.get_default_dtype()
    grid = torch.as_tensor(pixel_grid(h, w), dtype=ft)[None]
    t = TaskTensors(
        xc=torch.as_tensor(task.ctx.x[:1], dtype=ft),
        yc=torch.as_tensor(task.ctx.y[:1], dtype=ft),
        xt=grid, yt=torch.zeros(1, h * w, c, dtype=ft), yt_clean=torch.zeros(1, h * w, c, dtype=ft))
    mean, std = predict_from_context(model, t, K, rng)
    mu, sd = _mixture_moments(mean[:, 0], std[:, 0])
    out_dtype = dtype or images.images.dtype
    image = function_to_image(mu.double().numpy(), images.stats, h, w, out_dtype, clamp=True)
    return image, sd.double().numpy().reshape(h, w, c)


def predict_from_context(model, batch, K: int, rng):
    """Predictive means/stds ``[S, B, m, d_y]`` without looking at target values."""
    variant = getattr(model, "variant", None)
    if variant is not None and variant.has_latent:
        p = model.encode_latent(batch.xc, batch.yc)
        eps = torch.as_tensor(rng.standard_normal((K,) + tuple(p.mean.shape)), dtype=p.mean.dtype)
        z = p.mean + p.std * eps
        out = model(batch, K, rng, z=z)
    else:
        out = model(batch, K, rng)
    return out.pred.mean, out.pred.std


def context_image(task: TaskBatch, stats: NormStats, height: int, width: int,
                  dtype=np.uint8, background=None) -> np.ndarray:
    """Image showing only the (possibly noisy) context pixels."""
    c = stats.mean.shape[0]
    vals = np.zeros((height * width, c)) if background is None else np.broadcast_to(
        (np.asarray(background, dtype=np.float64) - stats.mean) / stats.std, (height * width, c)).copy()
    rows = np.rint((task.ctx.x[0, :, 0] + 1) / 2 * (height - 1)).astype(int)
    cols = np.rint((task.ctx.x[0, :, 1] + 1) / 2 * (width - 1)).astype(int)
    vals[rows * width + cols] = task.ctx.y[0]
    return function_to_image(vals, stats, height, width, dtype, clamp=True)


def save_strip(path, panels: Sequence[np.ndarray], sidecar: Optional[dict] = None,
               scale: int = 4, gap: int = 2) -> Path:
    """Write panels side by side as a PNG, plus an optional JSON sidecar."""
    path = Path(path)
    h, w = panels[0].shape[:2]
    strip = np.full((h * scale, len(panels) * (w * scale + gap) - gap, 3), 255, dtype=np.uint8)
    for i, p in enumerate(panels):
        p = np.asarray(p)
        if p.ndim == 2:
            p = p[..., None]
        if p.shape[-1] == 1:
            p = np.repeat(p, 3, axis=-1)
        if p.dtype != np.uint8:
            p = np.clip(np.rint(p * 255 if p.dtype.kind == "f" else p), 0, 255).astype(np.uint8)
        big = np.kron(p, np.ones((scale, scale, 1), dtype=np.uint8))
        x0 = i * (w * scale + gap)
        strip[:, x0:x0 + w * scale] = big
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(strip).save(path)
    if sidecar is not None:
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path
