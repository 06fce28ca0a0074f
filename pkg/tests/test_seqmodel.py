import numpy as np
import pytest

from posestitch import autodiff as ad
from posestitch.pose_core import flatten
from posestitch.seqmodel import (ModelParams, NetworkConfig, TrainingOptions, decode, denoise_step_net,
                                 encode, init_autoencoder, init_denoiser, multi_head,
                                 pretrain_autoencoder, reconstruction_loss, windowed_means)
from posestitch.synthcorpus import CorpusConfig, generate_corpus

DEFAULT = NetworkConfig(feature_dim=9)
TOY = NetworkConfig(feature_dim=9, latent_dim=16, head_count=2, feed_forward_dim=24)


@pytest.fixture(scope="module")
def ae():
    return init_autoencoder(DEFAULT, seed=0)


@pytest.fixture(scope="module")
def den():
    return init_denoiser(DEFAULT, seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(feature_dim=9, latent_dim=10, head_count=4)
    with pytest.raises(ValueError):
        NetworkConfig(feature_dim=0)


def test_encode_decode_shapes(ae):
    x = np.random.default_rng(0).standard_normal((30, 9))
    z = encode(x, ae, DEFAULT)
    assert z.shape == (30, 64)
    assert decode(z.data, ae, DEFAULT).shape == (30, 9)


def test_networks_are_deterministic(ae):
    x = np.random.default_rng(1).standard_normal((30, 9))
    a, b = encode(x, ae, DEFAULT).data, encode(x, ae, DEFAULT).data
    assert a.tobytes() == b.tobytes()
    assert decode(a, ae, DEFAULT).data.tobytes() == decode(b, ae, DEFAULT).data.tobytes()


def test_frame_swap_changes_encoding(ae):
    x = np.random.default_rng(2).standard_normal((30, 9))
    swapped = x.copy()
    swapped[[3, 17]] = swapped[[17, 3]]
    a = encode(x, ae, DEFAULT).data
    b = encode(swapped, ae, DEFAULT).data
    # without positional terms, rows 3 and 17 of b would equal rows 17 and 3 of a
    assert np.abs(a[[17, 3]] - b[[3, 17]]).max() > 1e-6


def test_sequence_too_long(ae):
    cfg = NetworkConfig(feature_dim=9, max_sequence_length=8)
    with pytest.raises(ValueError, match="max_sequence_length"):
        encode(np.zeros((9, 9)), init_autoencoder(cfg, 0), cfg)


def test_denoiser_shape_and_sensitivity(den):
    rng = np.random.default_rng(3)
    z = rng.standard_normal((30, 64))
    cond = rng.standard_normal((30, 65))
    out = denoise_step_net(z, 5, cond, den, DEFAULT, num_steps=100).data
    assert out.shape == (30, 64)
    late = denoise_step_net(z, 99, cond, den, DEFAULT, num_steps=100).data
    assert np.abs(out - late).max() > 1e-6
    blind = denoise_step_net(z, 5, np.zeros_like(cond), den, DEFAULT, num_steps=100).data
    assert np.abs(out - blind).max() > 1e-6


def test_denoiser_step_range(den):
    z = np.zeros((4, 64))
    with pytest.raises(ValueError):
        denoise_step_net(z, 100, np.zeros((4, 65)), den, DEFAULT, num_steps=100)
    with pytest.raises(ValueError):
        denoise_step_net(z, -1, np.zeros((4, 65)), den, DEFAULT, num_steps=100)


def test_batched_denoiser_matches_single_items(den):
    rng = np.random.default_rng(4)
    z = rng.standard_normal((3, 10, 64)).astype(np.float32)
    cond = rng.standard_normal((3, 10, 65)).astype(np.float32)
    steps = np.array([0, 40, 99])
    batched = denoise_step_net(z, steps, cond, den, DEFAULT, 100).data
    for b in range(3):
        single = denoise_step_net(z[b], int(steps[b]), cond[b], den, DEFAULT, 100).data
        np.testing.assert_allclose(batched[b], single, atol=1e-5)


def test_parameter_schema_and_init():
    p = init_autoencoder(TOY, seed=5).tensors
    assert p["enc.in.w"].shape == (9, 16)
    assert p["enc.layer1.attn.q.w"].shape == (16, 16)
    assert not np.any(p["enc.in.b"])
    bound = np.sqrt(6.0 / (9 + 16))
    assert np.abs(p["enc.in.w"]).max() <= bound
    d = init_denoiser(TOY, seed=5).tensors
    assert d["den.cond.w"].shape == (17, 16)
    assert {f"den.block{i}.cross.q.w" for i in range(2)} <= d.keys()
    assert "den.block0.cross.k.b" not in d


def test_checkpoint_roundtrip(tmp_path):
    model = init_denoiser(TOY, seed=1)
    model.meta["mask_ratio"] = "0.3"
    model.save(tmp_path / "d.params")
    back = ModelParams.load(tmp_path / "d.params")
    assert back.kind == "denoiser" and back.config == TOY
    assert back.meta["mask_ratio"] == "0.3"
    assert all(back.tensors[k].tobytes() == v.tobytes() for k, v in model.tensors.items())


# --- gradient checks at toy shapes (F=6, N=3, W=16) -------------------------

def _f64(params):
    return {k: v.astype(np.float64) for k, v in params.items()}


def test_grad_reconstruction_loss():
    x = np.random.default_rng(6).standard_normal((6, 9))
    params = _f64(init_autoencoder(TOY, seed=2).tensors)
    err = ad.grad_check(lambda p: reconstruction_loss(x, p, TOY), params, probe_count=40, seed=1)
    assert err < 1e-4


def test_grad_single_denoiser_block():
    cfg = NetworkConfig(feature_dim=9, latent_dim=16, head_count=2, feed_forward_dim=24, denoiser_blocks=1)
    rng = np.random.default_rng(7)
    z, cond = rng.standard_normal((6, 16)), rng.standard_normal((6, 17))
    target = rng.standard_normal((6, 16))
    params = _f64(init_denoiser(cfg, seed=3).tensors)
    err = ad.grad_check(
        lambda p: ad.mean_abs_error(denoise_step_net(z, 4, cond, p, cfg, 10), target),
        params, probe_count=40, seed=2)
    assert err < 1e-4


def test_grad_multi_head_attention():
    rng = np.random.default_rng(8)
    params = {f"m.{k}.{s}": rng.standard_normal((16, 16) if s == "w" else 16) * 0.3
              for k in "qkvo" for s in ("w", "b") if (k, s) != ("k", "b")}
    params["x"] = rng.standard_normal((2, 6, 16))
    params["ctx"] = rng.standard_normal((2, 5, 16))
    weight = rng.standard_normal((2, 6, 16))
    err = ad.grad_check(lambda p: ad.total(multi_head(p["x"], p["ctx"], p, "m", 4) * weight),
                        params, probe_count=40)
    assert err < 1e-4


# --- pre-training -----------------------------------------------------------

@pytest.fixture(scope="module")
def toy_corpus():
    return generate_corpus(CorpusConfig(sequence_count=8, frames_per_sequence=30, keypose_count=4,
                                        skeleton=__import__("posestitch").Skeleton.chain(3), seed=11))


def test_zero_steps_returns_seeded_init(toy_corpus):
    model = pretrain_autoencoder(toy_corpus, TOY, TrainingOptions(steps=0), seed=4)
    ref = init_autoencoder(TOY, seed=4)
    assert all(model.tensors[k].tobytes() == v.tobytes() for k, v in ref.tensors.items())


def test_pretraining_reduces_loss_and_is_reproducible(toy_corpus):
    opts = TrainingOptions(steps=500, batch_size=4, learning_rate=2e-3)
    a = pretrain_autoencoder(toy_corpus, TOY, opts, seed=9)
    b = pretrain_autoencoder(toy_corpus, TOY, opts, seed=9)
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)
    windows = windowed_means(a.loss_history, 50)
    assert windows[-1] < windows[0]
    assert all(later <= earlier for earlier, later in zip(windows, windows[1:])), windows
    x = flatten(toy_corpus[0])
    initial = reconstruction_loss(x, init_autoencoder(TOY, 9), TOY).item()
    assert reconstruction_loss(x, a, TOY).item() < initial
    assert a.final_loss is not None


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        pretrain_autoencoder([], TOY, TrainingOptions(steps=1), seed=0)
