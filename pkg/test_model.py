import numpy as np
import pytest

from conftest import tiny_arch
from data import pad_to_multiple
from errors import ValidationError
from model import (
    ABLATIONS,
    ArchConfig,
    Discriminator,
    Generator,
    IdentityTransfer,
    TransferModel,
    ablation_arch,
    build_ablation,
)
from nn import TransformerEncoder
from tensor_autodiff import Tensor, no_grad


def motion_batch(rng, n=2, length=32):
    return rng.normal(size=(n, length, 63))


def music_batch(rng, n=2, length=32):
    return rng.normal(size=(n, length, 35))


def tiny_generator(name="cycledance", seed=0):
    arch, _ = ablation_arch(name, tiny_arch())
    return Generator(arch, np.random.default_rng(seed))


# ==============================================================================
# --- 形状与取值 ---
# ==============================================================================

def test_generator_preserves_shape(rng):
    g = tiny_generator()
    out = g(motion_batch(rng), music_batch(rng))
    assert out.shape == (2, 32, 63)


def test_generator_accepts_unbatched_input(rng):
    g = tiny_generator("baseline")
    assert g(rng.normal(size=(32, 63))).shape == (1, 32, 63)


def test_discriminator_patch_grid_and_range(rng):
    d = Discriminator(tiny_arch(), rng)
    assert d.patch_grid(64) == (16, 16)
    out = d(motion_batch(rng, length=64))
    assert out.shape == (2, 16, 16)
    assert np.all((out.data > 0.0) & (out.data < 1.0))


def test_discriminator_with_zero_weights_outputs_half(rng):
    d = Discriminator(tiny_arch(), rng)
    for p in d.parameters():
        p.assign_(np.zeros_like(p.data))
    np.testing.assert_array_equal(d(motion_batch(rng)).data, 0.5)


def test_discriminator_rejects_short_input(rng):
    d = Discriminator(tiny_arch(), rng)
    with pytest.raises(ValidationError):
        d(motion_batch(rng, length=8))


@pytest.mark.parametrize("length", [12, 30, 34])
def test_generator_rejects_bad_length(rng, length):
    g = tiny_generator("baseline")
    with pytest.raises(ValidationError, match="divisible"):
        g(motion_batch(rng, length=length))


def test_generator_with_music_pathway_requires_music(rng):
    g = tiny_generator()
    with pytest.raises(ValidationError, match="requires music"):
        g(motion_batch(rng))
    with pytest.raises(ValidationError, match="align"):
        g(motion_batch(rng), music_batch(rng, length=16))


def test_arch_config_validation_and_round_trip():
    with pytest.raises(ValidationError, match="divisible"):
        ArchConfig(transformer={"layers": 1, "heads": 3, "model_dim": 8, "ff_dim": 8})
    with pytest.raises(ValidationError):
        ArchConfig(base_channels=0)
    arch = tiny_arch(use_two_step_adv=False)
    assert ArchConfig.from_dict(arch.to_dict()) == arch
    assert arch.length_multiple == 4


# ==============================================================================
# --- 音乐通路 ---
# ==============================================================================

def test_motion_only_generator_ignores_music(rng):
    g = tiny_generator("transgan")
    x = motion_batch(rng)
    with no_grad():
        plain = g(x).data
        a = g(x, music_batch(rng)).data
        b = g(x, music_batch(rng)).data
    np.testing.assert_array_equal(plain, a)
    np.testing.assert_array_equal(a, b)


def test_cross_modal_generator_depends_on_music(rng):
    g = tiny_generator()
    x = motion_batch(rng)
    with no_grad():
        a = g(x, music_batch(rng)).data
        b = g(x, music_batch(rng)).data
    assert not np.allclose(a, b)


# ==============================================================================
# --- 感受野 ---
# ==============================================================================

def _first_frame_sensitivity(name):
    g = tiny_generator(name)
    x = Tensor(np.random.default_rng(3).normal(size=(1, 128, 63)), requires_grad=True)
    music = np.random.default_rng(4).normal(size=(1, 128, 35))
    g(x, music)[0, 0].sum().backward()
    return np.abs(x.grad[0]).sum(axis=1)


def test_convolutional_generator_is_local():
    sensitivity = _first_frame_sensitivity("baseline")
    assert sensitivity[0] > 0.0
    assert sensitivity[127] == 0.0


@pytest.mark.parametrize("name", ["transgan", "cycledance"])
def test_transformer_generator_sees_whole_sequence(name):
    assert _first_frame_sensitivity(name)[127] > 0.0


def test_positional_encoding_breaks_permutation_equivariance(rng):
    encoder = TransformerEncoder(1, 8, 2, 8, rng)
    tokens = rng.normal(size=(1, 6, 8))
    perm = [1, 0, 2, 3, 4, 5]
    with no_grad():
        base = encoder(Tensor(tokens)).data
        permuted = encoder(Tensor(tokens[:, perm])).data
        # 没有位置编码时注意力对 token 顺序等变
        flat = encoder(Tensor(tokens), positions=np.zeros((6, 8))).data
        flat_permuted = encoder(Tensor(tokens[:, perm]), positions=np.zeros((6, 8))).data
    assert not np.allclose(permuted, base[:, perm])
    np.testing.assert_allclose(flat_permuted, flat[:, perm], atol=1e-12)


# ==============================================================================
# --- 消融与整体模型 ---
# ==============================================================================

def test_ablation_table():
    assert list(ABLATIONS) == ["baseline", "transgan", "transgan_cl", "crosstransgan", "cycledance"]
    assert not ABLATIONS["baseline"].use_motion_transformer
    assert ABLATIONS["transgan_cl"].curriculum and not ABLATIONS["transgan"].curriculum
    assert ABLATIONS["cycledance"].use_music_pathway and ABLATIONS["cycledance"].curriculum
    with pytest.raises(ValidationError, match="unknown ablation"):
        ablation_arch("cyclegan")


def test_generator_size_grows_with_components():
    counts = {name: build_ablation(name, tiny_arch())[0].generator_param_count() for name in ABLATIONS}
    assert counts["baseline"] < counts["transgan"] < counts["crosstransgan"]
    assert counts["transgan"] == counts["transgan_cl"]
    assert counts["crosstransgan"] == counts["cycledance"]


def test_model_init_is_seeded():
    a = TransferModel(tiny_arch(), seed=5).state_dict()
    b = TransferModel(tiny_arch(), seed=5).state_dict()
    c = TransferModel(tiny_arch(), seed=6).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(b[k], c[k]) for k in b)


def test_two_step_discriminators_are_optional():
    full = TransferModel(tiny_arch())
    plain = TransferModel(tiny_arch(use_two_step_adv=False))
    assert len(full.discriminators()) == 4
    assert plain.D2_x is None and plain.D2_y is None
    assert len(plain.discriminators()) == 2
    assert plain.generator_param_count() == full.generator_param_count()


def test_transfer_pads_then_crops(rng):
    model, _ = build_ablation("baseline", tiny_arch())
    motion = rng.normal(size=(50, 63))
    out = model.transfer("x2y", motion)
    padded, n = pad_to_multiple(motion, 4)
    with no_grad():
        expected = model.G_xy(padded).data[0, :n]
    assert out.shape == (50, 63)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_transfer_validation(rng):
    model, _ = build_ablation("cycledance", tiny_arch())
    motion = rng.normal(size=(32, 63))
    with pytest.raises(ValidationError, match="music"):
        model.transfer("x2y", motion)
    with pytest.raises(ValidationError, match="direction"):
        model.transfer("sideways", motion, rng.normal(size=(32, 35)))
    assert model.transfer("y2x", motion, rng.normal(size=(32, 35))).shape == (32, 63)


def test_identity_transfer_returns_copy(rng):
    motion = rng.normal(size=(20, 63))
    out = IdentityTransfer().transfer("x2y", motion)
    np.testing.assert_array_equal(out, motion)
    assert out is not motion
