import numpy as np
import pytest
import torch

from glmatch.backbone import Backbone, extract_feature_maps, image_to_tensor


def test_image_to_tensor_layouts():
    gray = np.full((40, 50), 255, np.uint8)
    t = image_to_tensor(gray)
    assert t.shape == (1, 40, 50) and float(t.max()) == 1.0
    assert image_to_tensor(np.zeros((40, 50, 3), np.float32)).shape == (3, 40, 50)
    with pytest.raises(ValueError):
        image_to_tensor(np.zeros((40, 50, 2)))


def test_strides_and_shapes():
    bb = Backbone()
    maps = extract_feature_maps(np.zeros((128, 96), np.uint8), bb)
    assert (maps.shallow_stride, maps.deep_stride) == (4, 16)
    assert maps.shallow.shape == (32, 32, 24) and maps.deep.shape == (64, 8, 6)
    assert bb.out_channels == (32, 64)


def test_rejects_small_and_non_finite_images():
    bb = Backbone()
    with pytest.raises(ValueError, match="minimum"):
        bb(torch.zeros(1, 16, 64))
    img = torch.zeros(1, 64, 64)
    img[0, 3, 3] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        bb(img)
    with pytest.raises(ValueError, match="channels"):
        bb(torch.zeros(3, 64, 64))


def test_tap_standardisation():
    bb = Backbone(tap_norm=True)
    maps = bb(torch.rand(1, 64, 64))
    mean = maps.deep.mean(dim=(1, 2))
    assert torch.allclose(mean, torch.zeros_like(mean), atol=1e-5)


def test_bad_taps():
    with pytest.raises(ValueError):
        Backbone(taps=(4, 2))


def test_rgb_example_shapes():
    bb = Backbone(in_channels=3)
    maps = bb(torch.rand(3, 256, 256))
    assert maps.shallow.shape[1:] == (64, 64) and maps.deep.shape[1:] == (16, 16)


@pytest.mark.parametrize("h, w", [(32, 32), (33, 47), (100, 61), (255, 129)])
def test_shapes_are_ceil_division(h, w):
    maps = Backbone()(torch.rand(1, h, w))
    assert maps.shallow.shape[1:] == (-(-h // 4), -(-w // 4))
    assert maps.deep.shape[1:] == (-(-h // 16), -(-w // 16))


def test_deterministic_and_zero_in_zero_out():
    bb = Backbone(tap_norm=True)
    img = torch.rand(1, 64, 64)
    a, b = bb(img), bb(img)
    assert torch.equal(a.shallow, b.shallow) and torch.equal(a.deep, b.deep)
    with torch.no_grad():
        for conv in bb.stages:
            conv.bias.zero_()
    z = bb(torch.zeros(1, 64, 64))
    assert not z.shallow.any() and not z.deep.any()


def test_parameter_gradients_match_finite_differences():
    from oracles import grad_rel_error

    bb = Backbone(channels=(4, 4, 4, 4, 4), tap_norm=True).double()
    img = torch.rand(1, 40, 40, dtype=torch.float64)
    for k in (0, 3):
        conv = bb.stages[k]

        def fn(weight, conv=conv):
            saved = conv.weight
            del conv.weight
            conv.weight = weight
            maps = bb(img)
            conv.weight = saved
            return maps.shallow.square().sum() + maps.deep.sin().sum()

        assert grad_rel_error(fn, conv.weight.detach()) < 1e-4
