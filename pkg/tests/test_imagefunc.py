import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from PIL import Image

from conftest import tiny_model
from noisynp.errors import ConfigError
from noisynp.funcdata import NoiseSpec, PointSet
from noisynp.imagefunc import (
    ImageFunctionSet, NormStats, context_image, function_to_image, image_to_function, pixel_grid,
    render_prediction, sample_image_task, save_strip,
)
from noisynp.models import PredictiveDistribution


def random_images(dtype, n=3, h=6, w=5, c=3, seed=0):
    rng = np.random.default_rng(seed)
    if np.issubdtype(dtype, np.integer):
        return rng.integers(0, np.iinfo(dtype).max, size=(n, h, w, c), endpoint=True).astype(dtype)
    return rng.uniform(0, 1, size=(n, h, w, c)).astype(dtype)


@pytest.mark.parametrize("dtype", [np.uint8, np.uint16, np.float16, np.float32])
def test_round_trip_bit_exact(dtype):
    imgs = random_images(dtype)
    s = ImageFunctionSet.from_arrays(imgs)
    for img in imgs:
        fn = image_to_function(img, s.stats, s.shape)
        back = function_to_image(fn.y[0], s.stats, 6, 5, dtype)
        assert back.dtype == imgs.dtype
        np.testing.assert_array_equal(back, img)


def test_grayscale_round_trip():
    imgs = random_images(np.uint8, c=1)[..., 0]
    s = ImageFunctionSet.from_arrays(imgs)
    fn = image_to_function(imgs[1], s.stats)
    np.testing.assert_array_equal(function_to_image(fn.y[0], s.stats, 6, 5)[..., 0], imgs[1])


def test_corner_coordinates():
    fn = image_to_function(random_images(np.uint8)[0], ImageFunctionSet.from_arrays(random_images(np.uint8)).stats)
    x = fn.x[0]
    assert x.shape == (30, 2)
    corners = {tuple(x[i]) for i in (0, 4, 25, 29)}
    assert corners == {(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)}
    assert x.min() == -1 and x.max() == 1


def test_normalization_statistics():
    imgs = random_images(np.uint8, n=40, h=16, w=16, seed=3)
    s = ImageFunctionSet.from_arrays(imgs)
    y = np.concatenate([image_to_function(i, s.stats).y[0] for i in imgs])
    np.testing.assert_allclose(y.mean(0), 0, atol=1e-2)
    np.testing.assert_allclose(y.std(0), 1, atol=1e-2)


def test_constant_channel_does_not_divide_by_zero():
    imgs = np.zeros((2, 3, 3, 3), dtype=np.uint8)
    imgs[..., 0] = 7
    s = ImageFunctionSet.from_arrays(imgs)
    fn = image_to_function(imgs[0], s.stats)
    assert np.isfinite(fn.y).all()
    np.testing.assert_array_equal(function_to_image(fn.y[0], s.stats, 3, 3), imgs[0])


def test_shape_and_dtype_errors():
    s = ImageFunctionSet.from_arrays(random_images(np.uint8))
    with pytest.raises(ConfigError):
        image_to_function(np.zeros((4, 4, 3), np.uint8), s.stats, s.shape)
    with pytest.raises(ConfigError):
        image_to_function(np.zeros((6, 5, 1), np.uint8), s.stats)
    with pytest.raises(ConfigError):
        ImageFunctionSet.from_arrays(np.zeros((2, 3, 3, 3), dtype=np.int64))


def test_from_directory(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(3):
        Image.fromarray(rng.integers(0, 256, (20, 20, 3), dtype=np.uint8)).save(tmp_path / f"{i}.png")
    (tmp_path / "notes.txt").write_text("skip me")
    s = ImageFunctionSet.from_directory(tmp_path, size=8)
    assert len(s) == 3 and s.shape == (8, 8, 3)
    (tmp_path / "empty").mkdir()
    with pytest.raises(ConfigError):
        ImageFunctionSet.from_directory(tmp_path / "empty")


# -- tasks ----------------------------------------------------------------------------


def image_set(size=32, n=4, seed=0):
    return ImageFunctionSet.from_arrays(random_images(np.uint8, n=n, h=size, w=size, seed=seed))


def test_clean_context_equals_image_values():
    s = image_set()
    task = sample_image_task(s, 50, 20, NoiseSpec.level(0.0), 3, "train", np.random.default_rng(0), image_index=[2])
    fn = image_to_function(s.images[2], s.stats)
    lookup = {tuple(x): y for x, y in zip(fn.x[0], fn.y[0])}
    for x, y in zip(task.ctx.x[0], task.ctx.y[0]):
        np.testing.assert_array_equal(y, lookup[tuple(x)])
    assert not task.noise_mask_ctx.any()


def test_complement_targets_and_disjointness():
    s = image_set()
    task = sample_image_task(s, 100, None, NoiseSpec.level(0.3), 3, "eval", np.random.default_rng(1), batch_size=3)
    assert task.tar.x.shape == (3, 32 * 32 - 100, 2)
    for b in range(3):
        ctx = {tuple(x) for x in task.ctx.x[b]}
        tar = {tuple(x) for x in task.tar.x[b]}
        assert len(ctx) == 100 and len(tar) == 924
        assert not ctx & tar
        assert len(ctx | tar) == 1024


def test_oversubscription_rejected():
    with pytest.raises(ConfigError):
        sample_image_task(image_set(size=4), 10, 7, NoiseSpec.level(0.0), 3, "train", np.random.default_rng(0))


def test_noise_statistics_over_tasks():
    s = image_set()
    rng = np.random.default_rng(0)
    devs = []
    for _ in range(20):
        task = sample_image_task(s, 1000, 24, NoiseSpec.level(0.6), 3, "train", rng)
        mask = task.noise_mask_ctx[0]
        assert mask.sum() == 600
        dev = task.ctx.y[0] - task.clean_ctx_y[0]
        assert np.all(dev[~mask] == 0)
        devs.append(dev[mask].ravel())
    devs = np.concatenate(devs)
    assert abs(devs.std(ddof=1) - 0.6) < 0.01   # 36000 deviations: SE about 0.0022


@pytest.mark.parametrize("setup,phase,ctx_noisy,tar_noisy", [
    (1, "train", False, False), (2, "train", True, False), (3, "train", True, True),
    (1, "eval", True, False), (3, "eval", True, False)])
def test_setup_phase_matrix(setup, phase, ctx_noisy, tar_noisy):
    task = sample_image_task(image_set(), 200, 200, NoiseSpec.level(0.6), setup, phase, np.random.default_rng(0))
    assert task.noise_mask_ctx.any() == ctx_noisy
    assert task.noise_mask_tar.any() == tar_noisy
    np.testing.assert_array_equal(task.tar.y[~task.noise_mask_tar], task.clean_tar_y[~task.noise_mask_tar])


# -- rendering --------------------------------------------------------------------------


class OracleStub(torch.nn.Module):
    """Predicts the clean pixel values exactly, with the smallest allowed std."""

    def __init__(self, images: ImageFunctionSet, index: int):
        super().__init__()
        fn = image_to_function(images.images[index], images.stats)
        self.y = torch.as_tensor(fn.y[0])
        self.variant = None

    def forward(self, batch, K, rng, **kw):
        mean = self.y.to(batch.xt.dtype)[None, None].expand(K, 1, -1, -1)
        return SimpleNamespace(pred=PredictiveDistribution(mean, torch.full_like(mean, 0.1)))


def test_oracle_stub_render_recovers_image():
    s = image_set(size=8)
    task = sample_image_task(s, 10, 5, NoiseSpec.level(0.6), 3, "eval", np.random.default_rng(0), image_index=[1])
    img, std = render_prediction(OracleStub(s, 1), s, task, K=4)
    np.testing.assert_array_equal(img, s.images[1])
    np.testing.assert_allclose(std, 0.1, rtol=0, atol=1e-6)


def _image_model(variant):
    return tiny_model(variant, dtype=torch.float32, dim_x=2, dim_y=3)


@pytest.mark.parametrize("variant", ["cnp", "anp", "banp"])
def test_render_deterministic(variant):
    s = image_set(size=8)
    m = _image_model(variant)
    task = sample_image_task(s, 12, 5, NoiseSpec.level(0.3), 3, "eval", np.random.default_rng(0))
    a, sa = render_prediction(m, s, task, K=5, rng=np.random.default_rng(3))
    b, sb = render_prediction(m, s, task, K=5, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(sa, sb)
    assert a.shape == (8, 8, 3) and a.dtype == np.uint8
    if variant == "cnp":
        c, _ = render_prediction(m, s, task, K=1, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a, c)


def test_render_ignores_target_values():
    s = image_set(size=8)
    m = _image_model("anp")
    task = sample_image_task(s, 12, 5, NoiseSpec.level(0.3), 3, "eval", np.random.default_rng(0))
    other = dataclasses.replace(task, tar=PointSet(task.tar.x, task.tar.y + 100), clean_tar_y=task.clean_tar_y - 5)
    a, _ = render_prediction(m, s, task, K=3, rng=np.random.default_rng(0))
    b, _ = render_prediction(m, s, other, K=3, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)


def test_context_image_and_strip(tmp_path):
    s = image_set(size=8)
    task = sample_image_task(s, 63, 1, NoiseSpec.level(0.0), 3, "eval", np.random.default_rng(0), image_index=[0])
    ctx = context_image(task, s.stats, 8, 8)
    grid = pixel_grid(8, 8)
    hidden = [i for i in range(64) if tuple(grid[i]) == tuple(task.tar.x[0, 0])][0]
    flat_ctx, flat_img = ctx.reshape(64, 3), s.images[0].reshape(64, 3)
    keep = np.arange(64) != hidden
    np.testing.assert_array_equal(flat_ctx[keep], flat_img[keep])
    out = save_strip(tmp_path / "strip.png", [s.images[0], ctx, np.zeros((8, 8, 1), np.float32)],
                     sidecar={"task_seed": 0}, scale=2)
    arr = np.asarray(Image.open(out))
    assert arr.shape == (16, 3 * 16 + 2 * 2, 3)
    assert (tmp_path / "strip.json").exists()


def test_render_follows_model_dtype():
    s = image_set(size=8)
    task = sample_image_task(s, 12, 5, NoiseSpec.level(0.3), 3, "eval", np.random.default_rng(0))
    m32 = _image_model("anp")
    m64 = tiny_model("anp", dtype=torch.float64, dim_x=2, dim_y=3)
    m64.load_state_dict({k: v.double() for k, v in m32.state_dict().items()})
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float32)
    try:
        a, _ = render_prediction(m32, s, task, K=3, rng=np.random.default_rng(0))
        b, _ = render_prediction(m64, s, task, K=3, rng=np.random.default_rng(0))
    finally:
        torch.set_default_dtype(prev)
    # same weights, so only rounding can move a pixel
    assert np.abs(a.astype(int) - b.astype(int)).max() <= 1
