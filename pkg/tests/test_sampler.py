import math

import numpy as np
import pytest
import torch

from layerstack.layerspace import validate
from layerstack.sampler import (
    Conditions,
    GuidanceConfig,
    SampleTrace,
    SamplingError,
    cfg_combine,
    denoise_loop,
    extract_predicted_masks,
    gaussian_blur,
    initial_noise,
    make_generators,
    sample,
    sample_batch,
    smg_combine,
    smg_degrade,
)
from layerstack.schedule import build_schedule, ddim_timesteps, predict_x0, q_sample
from layerstack.textcond import PromptBundle, PromptTexts, Vocabulary

from _oracles import NoiseOracle, random_model, reference_loop, tiny_config

SCHED = build_schedule()
VOCAB = Vocabulary.default()


def texts(n=2):
    fg = ["a red circle", "a blue star", "a green square"][: n - 1]
    return PromptTexts.build("a gray plain background with " + " and ".join(fg), ["the background"] + fg)


# --- arithmetic ----------------------------------------------------------------

def test_cfg_combine_examples():
    assert cfg_combine(torch.tensor(2.0), torch.tensor(1.0), 3).item() == 4.0
    c, u = torch.randn(3, 4), torch.randn(3, 4)
    assert torch.equal(cfg_combine(c, u, 0), u)
    assert torch.equal(cfg_combine(c, u, 1), c)
    assert torch.allclose(cfg_combine(c, u, 2.5), u + 2.5 * (c - u))
    with pytest.raises(ValueError):
        cfg_combine(torch.zeros(2), torch.zeros(3), 2)


def test_smg_combine_examples():
    assert smg_combine(torch.tensor(1.0), torch.tensor(2.0), 3).item() == 5.0
    e, h = torch.randn(5), torch.randn(5)
    assert torch.equal(smg_combine(h, e, 0), e)
    assert torch.allclose(smg_combine(e, e, 7.0), e)
    with pytest.raises(ValueError):
        smg_combine(torch.zeros(2, 2), torch.zeros(4), 1)


def test_guidance_config_validation_and_blur_scaling():
    for bad in (dict(steps=0), dict(blur_kernel=4), dict(cfg_scale=-1), dict(smg_scale=-0.1)):
        with pytest.raises(ValueError):
            GuidanceConfig(**bad)
    g = GuidanceConfig()
    assert g.blur_for(256) == (31, 3.0)
    assert g.blur_for(32) == (3, 0.375)
    assert g.blur_for(64) == (7, 0.75)
    assert g.blur_for(512) == (63, 6.0)  # 62 is equidistant; ties round up


# --- blur and degradation -----------------------------------------------------

def loop_blur(img, k, sigma):
    r = k // 2
    w1 = np.array([math.exp(-0.5 * ((i - r) / sigma) ** 2) for i in range(k)])
    w1 /= w1.sum()
    pad = np.pad(img, r, mode="reflect")
    out = np.zeros_like(img)
    for y in range(img.shape[0]):
        for x in range(img.shape[1]):
            acc = 0.0
            for dy in range(k):
                for dx in range(k):
                    acc += w1[dy] * w1[dx] * pad[y + dy, x + dx]
            out[y, x] = acc
    return out


def test_gaussian_blur_matches_loop():
    img = np.random.default_rng(0).normal(size=(9, 11))
    out = gaussian_blur(torch.tensor(img)[None, None], 5, 1.2)[0, 0].numpy()
    assert np.abs(out - loop_blur(img, 5, 1.2)).max() < 1e-12


def test_gaussian_blur_preserves_constants_and_identity():
    c = torch.full((2, 3, 8, 8), 0.25, dtype=torch.float64)
    assert torch.allclose(gaussian_blur(c, 7, 2.0), c, atol=1e-14)
    x = torch.randn(1, 3, 8, 8)
    assert torch.equal(gaussian_blur(x, 1, 3.0), x)
    with pytest.raises(ValueError):
        gaussian_blur(x, 4, 1.0)


def test_smg_degrade_mask_extremes():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(2, 3, 8, 8, generator=g)
    eps = torch.randn(2, 3, 8, 8, generator=g)
    noise = torch.randn(2, 3, 8, 8, generator=g)
    t = 300
    ones = torch.ones(2, 1, 8, 8)
    assert torch.equal(smg_degrade(SCHED, z, eps, t, ones, (3, 0.5), noise=noise), z)
    expected = q_sample(SCHED, gaussian_blur(predict_x0(SCHED, z, t, eps), 3, 0.5), t, noise)
    assert torch.equal(smg_degrade(SCHED, z, eps, t, torch.zeros(2, 1, 8, 8), (3, 0.5), noise=noise), expected)


def test_smg_degrade_mixes_by_mask_and_is_seeded():
    z = torch.randn(1, 3, 6, 6)
    eps = torch.randn(1, 3, 6, 6)
    m = torch.zeros(1, 1, 6, 6)
    m[..., :3] = 1
    a = smg_degrade(SCHED, z, eps, 500, m, (3, 0.5), generator=torch.Generator().manual_seed(4))
    b = smg_degrade(SCHED, z, eps, 500, m, (3, 0.5), generator=torch.Generator().manual_seed(4))
    assert torch.equal(a, b)
    assert torch.equal(a[..., :3], z[..., :3])
    assert not torch.allclose(a[..., 3:], z[..., 3:])
    with pytest.raises(ValueError):
        smg_degrade(SCHED, z, eps, 500, m * 0.5, (3, 0.5))


# --- mask extraction ------------------------------------------------------------

def test_extract_masks_recovers_truth_with_true_noise():
    rng = np.random.default_rng(1)
    owner = rng.integers(0, 3, size=(8, 8))
    masks = np.stack([(owner == i) for i in range(3)]).astype(np.float32)
    latent = torch.tensor(masks * 2 - 1)[:, None].expand(3, 3, 8, 8)
    eps = torch.randn(3, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    for t in (10, 500, 900):
        z = q_sample(SCHED, latent, t, eps)
        binary, soft = extract_predicted_masks(SCHED, z, eps, t)
        assert np.array_equal(binary.numpy(), masks)
        assert soft.min() >= 0 and soft.max() <= 1


def test_extract_masks_ties_and_partition():
    z = torch.zeros(3, 3, 4, 4)
    binary, _ = extract_predicted_masks(SCHED, z, torch.zeros_like(z), 200)
    assert binary[0].sum() == 16 and binary[1:].sum() == 0
    g = torch.Generator().manual_seed(2)
    z, e = torch.randn(4, 3, 5, 5, generator=g), torch.randn(4, 3, 5, 5, generator=g)
    binary, _ = extract_predicted_masks(SCHED, z, e, 700)
    ab = SCHED.alpha_bar[700]
    for y in range(5):
        for x in range(5):
            col = binary[:, y, x]
            assert col.sum() == 1
            means = []
            for layer in range(4):
                vals = [(z[layer, c, y, x].item() - math.sqrt(1 - ab) * e[layer, c, y, x].item()) / math.sqrt(ab) for c in range(3)]
                means.append(sum((v + 1) / 2 for v in vals) / 3)
            assert col[int(np.argmax(means))] == 1


# --- oracle sampling -------------------------------------------------------------

def test_oracle_denoiser_recovers_x0_in_50_steps():
    g = torch.Generator().manual_seed(3)
    x0 = torch.rand(1, 2, 6, 8, 8, generator=g) * 2 - 1
    eps = torch.randn(1, 2, 6, 8, 8, generator=g)
    x_T = q_sample(SCHED, x0, 1000, eps)
    stub = NoiseOracle(eps)
    bundle = PromptBundle.stack([PromptBundle.from_texts(texts(2), VOCAB)])
    cond = Conditions.encode(stub, bundle)
    gcfg = GuidanceConfig(cfg_scale=1.0, smg_scale=0.0)
    trace = SampleTrace()
    out, _ = denoise_loop(stub, SCHED, cond, x_T, ddim_timesteps(1000, 50), gcfg, make_generators([0]), trace=trace)
    assert (out - x0).abs().max() <= 1e-3
    assert trace.forward_passes == 50 == stub.calls


def test_sample_batch_oracle_end_to_end():
    g = torch.Generator().manual_seed(4)
    owner = torch.randint(0, 2, (8, 8), generator=g)
    masks = torch.stack([(owner == i).float() for i in range(2)]) * 2 - 1
    imgs = torch.rand(2, 3, 8, 8, generator=g) * 2 - 1
    x0 = torch.cat([imgs, masks[:, None].expand(2, 3, 8, 8)], 1)[None]
    eps = torch.randn(x0.shape, generator=g)
    res = sample_batch(
        NoiseOracle(eps), SCHED, VOCAB, [texts(2)], GuidanceConfig(cfg_scale=3.0, smg_scale=0.0), [0], 8,
        x_init=q_sample(SCHED, x0, 1000, eps),
    )
    ls = res.layer_sets[0]
    validate(ls)
    assert np.abs(ls.background_image - x0[0, 0, :3].permute(1, 2, 0).numpy()).max() <= 1e-3
    assert np.array_equal(ls.foregrounds[0].mask.grid, (owner == 1).float().numpy())


def test_non_finite_prediction_aborts():
    stub = NoiseOracle(None, value=float("nan"))
    with pytest.raises(SamplingError):
        sample_batch(stub, SCHED, VOCAB, [texts(2)], GuidanceConfig(steps=2), [0], 8)


def test_layer_count_rejected():
    stub = NoiseOracle(None, value=0.0)
    with pytest.raises(ValueError):
        sample_batch(stub, SCHED, VOCAB, [PromptTexts("g", ("bg",), "", ("",))], GuidanceConfig(steps=2), [0], 8)
    with pytest.raises(ValueError):
        sample_batch(stub, SCHED, VOCAB, [texts(2), texts(3)], GuidanceConfig(steps=2), [0, 1], 8)


# --- guidance neutrality on a real network ---------------------------------------

@pytest.fixture(scope="module")
def tiny_model():
    return random_model(21, tiny_config())


@pytest.mark.parametrize("w", [3.0, 1.0])
def test_smg_zero_is_bit_identical_to_reference(tiny_model, w):
    tx = [texts(3)]
    gcfg = GuidanceConfig(steps=8, cfg_scale=w, smg_scale=0.0, seed=5)
    res = sample_batch(tiny_model, SCHED, VOCAB, tx, gcfg, [5], 8)
    bundle = PromptBundle.stack([PromptBundle.from_texts(t, VOCAB, 4) for t in tx])
    x = initial_noise((3, 6, 8, 8), make_generators([5]))
    assert torch.equal(res.latents, reference_loop(tiny_model, bundle, x, 8, w))
    assert res.trace.forward_passes == 8 * (1 if w == 1 else 2)


def test_x0_clipping_bounds_the_result_and_can_be_disabled(tiny_model):
    tx = [texts(2)]
    bundle = PromptBundle.stack([PromptBundle.from_texts(t, VOCAB, 4) for t in tx])
    x = initial_noise((2, 6, 8, 8), make_generators([9]))
    clipped = sample_batch(tiny_model, SCHED, VOCAB, tx, GuidanceConfig(steps=6, smg_scale=0.0), [9], 8)
    assert clipped.latents.abs().max() <= 1.0
    plain = sample_batch(
        tiny_model, SCHED, VOCAB, tx, GuidanceConfig(steps=6, smg_scale=0.0, clip_x0=False), [9], 8
    )
    assert torch.equal(plain.latents, reference_loop(tiny_model, bundle, x, 6, 3.0, clip=False))
    assert not torch.equal(plain.latents, clipped.latents)


def test_smg_changes_trajectory_and_costs_a_pass(tiny_model):
    base = sample_batch(tiny_model, SCHED, VOCAB, [texts(2)], GuidanceConfig(steps=6, smg_scale=0.0), [1], 8)
    smg = sample_batch(tiny_model, SCHED, VOCAB, [texts(2)], GuidanceConfig(steps=6, smg_scale=3.0), [1], 8)
    assert smg.trace.forward_passes == 18 and base.trace.forward_passes == 12
    assert not torch.equal(base.latents, smg.latents)


def test_sampling_is_deterministic_and_trace_is_ordered(tiny_model):
    gcfg = GuidanceConfig(steps=6, seed=9)
    a, ta = sample(tiny_model, SCHED, VOCAB, texts(3), gcfg, resolution=8)
    b, _ = sample(tiny_model, SCHED, VOCAB, texts(3), gcfg, resolution=8)
    for la, lb in zip([a.background_image] + [f.image for f in a.foregrounds], [b.background_image] + [f.image for f in b.foregrounds]):
        assert np.array_equal(la, lb)
    assert np.array_equal(a.masks(), b.masks())
    ts = ta.timesteps
    assert ts[0] == 1000 and all(x > y for x, y in zip(ts, ts[1:]))
    for step in ta.steps:
        assert torch.all(step.masks.sum(dim=-3) == 1)
        assert torch.all(torch.isfinite(step.x0))
    validate(a)
