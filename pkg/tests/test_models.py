import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from astrogan.colorspace import ContractError
from astrogan.models import (
    ChecksumError,
    ModelKind,
    ModelSpec,
    SpecMismatchError,
    WeightsError,
    build_model,
    build_patch_discriminator,
    build_sr_generator,
    build_unet_generator,
    forward,
    load_params,
    patch_output_size,
    save_params,
)

SMALL_UNET = dict(base_width=8, encoder_stages=4)


def unet(out_channels=2, **kw):
    return build_unet_generator(
        ModelSpec(ModelKind.UNET_COLORIZER, out_channels=out_channels, **{**SMALL_UNET, **kw})
    )


def sr(kind, scale=4, **kw):
    spec = dict(in_channels=3, base_width=8, n_res_blocks=2, scale=scale)
    return build_sr_generator(ModelSpec(kind, **{**spec, **kw}))


def patch(in_channels=3, layers=3, width=8):
    return build_patch_discriminator(
        ModelSpec(ModelKind.PATCH_DISCRIMINATOR, in_channels=in_channels, base_width=width, patch_layers=layers)
    )


@pytest.mark.parametrize("out_channels", [2, 3])
def test_unet_shapes_and_range(out_channels):
    x = np.random.default_rng(0).uniform(-1, 1, (1, 256, 256, 1))
    y = forward(unet(out_channels), x)
    assert y.shape == (1, 256, 256, out_channels)
    assert np.all(np.abs(y) < 1) and np.isfinite(y).all()


def test_unet_default_width_shape():
    params = unet(base_width=64)
    assert forward(params, np.zeros((1, 64, 64, 1))).shape == (1, 64, 64, 2)


@pytest.mark.parametrize("stages", [1, 2, 3, 4])
def test_unet_depths(stages):
    y = forward(unet(encoder_stages=stages), np.zeros((2, 32, 48, 1)))
    assert y.shape == (2, 32, 48, 2)


def test_unet_rejects_deep_encoder():
    with pytest.raises(ContractError):
        ModelSpec(ModelKind.UNET_COLORIZER, encoder_stages=5)


def test_unet_encoder_uses_resnet_names():
    names = set(unet().arrays)
    assert {"encoder.conv1.weight", "encoder.bn1.weight", "encoder.layer4.1.conv2.weight"} <= names
    assert not any(n.startswith("encoder.fc") for n in names)


def test_pretrained_encoder_loads(tmp_path):
    from torchvision.models import resnet18

    torch.manual_seed(3)
    ref = resnet18()
    path = tmp_path / "r18.pt"
    torch.save(ref.state_dict(), path)
    params = build_unet_generator(
        ModelSpec(ModelKind.UNET_COLORIZER, pretrained_encoder=True, encoder_weights=str(path))
    )
    sd = params.module.encoder.state_dict()
    assert torch.equal(sd["layer3.0.conv1.weight"], ref.layer3[0].conv1.weight)
    # the RGB stem folds to one channel by summing, so a gray image R=G=B=v
    # produces the same first-layer activations as before
    assert torch.allclose(sd["conv1.weight"], ref.conv1.weight.sum(dim=1, keepdim=True))


def test_pretrained_encoder_missing_file(tmp_path):
    missing = tmp_path / "nope.pt"
    spec = ModelSpec(ModelKind.UNET_COLORIZER, pretrained_encoder=True, encoder_weights=str(missing))
    with pytest.raises(WeightsError, match="nope.pt"):
        build_unet_generator(spec)


@pytest.mark.parametrize("kind", [ModelKind.SRRESNET, ModelKind.EDSR, ModelKind.WDSR])
@pytest.mark.parametrize("scale, size", [(4, 64), (2, 128)])
def test_sr_shapes(kind, scale, size):
    x = np.random.default_rng(0).uniform(0, 1, (1, size, size, 3))
    y = forward(sr(kind, scale), x)
    assert y.shape == (1, 256, 256, 3)
    assert y.min() >= 0 and y.max() <= 1


@settings(max_examples=10, deadline=None)
@given(st.integers(3, 20), st.integers(3, 20), st.sampled_from([2, 4]))
def test_sr_output_is_scaled_input(h, w, scale):
    y = forward(sr(ModelKind.EDSR, scale), np.zeros((1, h, w, 3)))
    assert y.shape == (1, h * scale, w * scale, 3)


def test_edsr_param_count_by_hand():
    width, ch = 8, 3
    conv = lambda i, o, k: i * o * k * k + o  # noqa: E731
    expected = (
        conv(ch, width, 3)  # head
        + 2 * 2 * conv(width, width, 3)  # two residual blocks of two convs
        + conv(width, width, 3)  # body tail
        + 2 * conv(width, 4 * width, 3)  # two x2 pixel-shuffle stages
        + conv(width, ch, 3)  # tail
    )
    assert expected == 8035
    params = sr(ModelKind.EDSR, 4)
    assert params.param_count == expected
    assert params.param_count == sum(a.size for a in params.arrays.values())


def test_edsr_has_no_batchnorm_srresnet_does():
    assert not any(isinstance(m, torch.nn.BatchNorm2d) for m in sr(ModelKind.EDSR).module.modules())
    assert any(isinstance(m, torch.nn.BatchNorm2d) for m in sr(ModelKind.SRRESNET).module.modules())


def test_wdsr_is_wide_and_weight_normalized():
    params = sr(ModelKind.WDSR)
    block = params.module.body[0].body
    assert block[0].out_channels == 6 * 8
    assert any("parametrizations.weight.original0" in n for n in params.arrays)


def test_sr_rejects_bad_scale():
    with pytest.raises(ContractError):
        ModelSpec(ModelKind.EDSR, scale=3)
    with pytest.raises(ContractError):
        ModelSpec(ModelKind.UNET_COLORIZER, scale=4)


@pytest.mark.parametrize("layers", [1, 2, 3, 4, 5])
def test_patch_geometry_matches_oracle(layers):
    out = forward(patch(3, layers), np.zeros((1, 256, 256, 3)))
    assert out.shape == (1, oracles.patch_grid(256, layers), oracles.patch_grid(256, layers), 1)
    assert patch_output_size(256, layers) == oracles.patch_grid(256, layers)


def test_patch_known_sizes():
    assert oracles.patch_grid(256, 3) == 30
    assert oracles.patch_grid(512, 3) == 62
    assert forward(patch(3, 3), np.zeros((1, 512, 512, 3))).shape[1:3] == (62, 62)


@settings(max_examples=30, deadline=None)
@given(st.integers(64, 700), st.integers(1, 5))
def test_patch_arithmetic_property(size, layers):
    assert patch_output_size(size, layers) == oracles.patch_grid(size, layers)


def test_patch_50_grid_configuration():
    # a 50 x 50 map needs a 416-pixel input at three layers
    assert patch_output_size(416, 3) == 50
    assert all(patch_output_size(256, n) != 50 for n in range(1, 6))


def test_patch_rejects_bad_channels():
    with pytest.raises(ContractError):
        ModelSpec(ModelKind.PATCH_DISCRIMINATOR, in_channels=0)


def test_resnet_discriminator():
    spec = ModelSpec(ModelKind.RESNET_DISCRIMINATOR, in_channels=3, patch_layers=2)
    out = forward(build_model(spec), np.zeros((1, 64, 64, 3)))
    assert out.ndim == 4 and out.shape[-1] == 1


def test_forward_deterministic_and_batch_preserving():
    params = unet()
    x = np.random.default_rng(1).uniform(-1, 1, (3, 32, 32, 1))
    a, b = forward(params, x), forward(params, x)
    assert a.shape[0] == 3 and np.array_equal(a, b)


def test_forward_rejects_wrong_channels():
    with pytest.raises(ContractError, match="channels"):
        forward(unet(), np.zeros((1, 32, 32, 3)))


def test_same_seed_same_weights():
    a, b = unet(seed=5), unet(seed=5)
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
    c = unet(seed=6)
    assert not np.array_equal(a.arrays["encoder.conv1.weight"], c.arrays["encoder.conv1.weight"])


def test_weights_finite():
    for params in (unet(), sr(ModelKind.WDSR), patch()):
        assert all(np.isfinite(a).all() for a in params.arrays.values())


@pytest.mark.parametrize("build", [unet, lambda: sr(ModelKind.WDSR), patch])
def test_save_load_bitwise(tmp_path, build):
    params = build()
    save_params(params, tmp_path / "w")
    loaded = load_params(tmp_path / "w")
    assert loaded.spec == params.spec
    assert loaded.param_count == params.param_count
    for k, v in params.arrays.items():
        assert loaded.arrays[k].dtype == v.dtype and np.array_equal(loaded.arrays[k], v)


def test_save_is_byte_deterministic(tmp_path):
    save_params(unet(), tmp_path / "a")
    save_params(unet(), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_load_into_mismatched_spec(tmp_path):
    params = unet()
    save_params(params, tmp_path / "w")
    other = ModelSpec(ModelKind.UNET_COLORIZER, base_width=16)
    with pytest.raises(SpecMismatchError) as err:
        load_params(tmp_path / "w", other)
    assert "base_width=16" in str(err.value) and "base_width=8" in str(err.value)


@pytest.mark.parametrize("damage", ["truncate", "flip"])
def test_corrupt_file_rejected(tmp_path, damage):
    save_params(unet(), tmp_path / "w")
    data = bytearray((tmp_path / "w").read_bytes())
    if damage == "truncate":
        data = data[: len(data) // 2]
    else:
        data[len(data) // 2] ^= 0xFF
    (tmp_path / "w").write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_params(tmp_path / "w")


def test_copy_is_independent():
    params = unet()
    clone = params.copy()
    with torch.no_grad():
        next(clone.module.parameters()).add_(1.0)
    assert not np.array_equal(
        params.arrays["encoder.conv1.weight"], clone.arrays["encoder.conv1.weight"]
    )
