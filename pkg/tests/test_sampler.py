"""Reverse chains: guidance gating, recording, determinism, gradients."""

import numpy as np
import pytest

from selfguide import autodiff as ad
from selfguide.denoiser import Denoiser, ModelConfig
from selfguide.diffusion import GuidanceConfig, make_schedule
from selfguide.energies import EnergySpec, EnergyTerm
from selfguide.rng import stream
from selfguide.sampler import (InternalsSequence, _ddim_timesteps,
                               extract_real_internals, grad_energy,
                               make_guidance_schedule, sample)

from test_denoiser import MINI, rand_input


def model_with(cfg, seed=0):
    """Small Denoiser with re-randomized output layers (see test_denoiser)."""
    m = Denoiser(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name, t in m.params.items():
        if t.data.size and not t.data.any() and name != "pos_emb":
            t.data = rng.standard_normal(t.data.shape).astype(t.data.dtype) * 0.2
    m.set_requires_grad(False)
    return m


MINI32 = ModelConfig(image_size=8, widths=(8, 8, 8), token_dim=8, time_dim=16,
                     groups=4, sched_T=32)

CENTROID_PULL = EnergySpec([
    EnergyTerm(kind="match_centroid", tokens=(1,), weight=1.0, target=(0.25, 0.75)),
])


# -- guidance schedule -------------------------------------------------------

def test_guidance_schedule_structure_1024():
    flags = make_guidance_schedule(1024)
    assert flags.dtype == bool and len(flags) == 1024
    assert flags[:192].all()                       # leading guided block
    assert not flags[-32:].any()                   # trailing untouched block
    mid = flags[192:992]
    assert len(mid) == 800
    assert mid[0::2].all() and not mid[1::2].any()  # alternation, guided first


def test_guidance_schedule_structure_256():
    flags = make_guidance_schedule(256)
    assert flags[:48].all()
    assert not flags[-8:].any()
    mid = flags[48:248]
    assert len(mid) == 200
    assert mid[0::2].all() and not mid[1::2].any()


def test_guidance_schedule_minimum_length():
    with pytest.raises(ValueError):
        make_guidance_schedule(31)
    flags = make_guidance_schedule(32)
    assert flags[:6].all() and not flags[-1:].any()
    assert len(flags) == 32


# -- recorded sequences ------------------------------------------------------

def test_internals_sequence_nearest_with_tie():
    seq = InternalsSequence()
    seq.append(10, "lo")
    seq.append(20, "hi")
    assert seq.timesteps == [10, 20]
    assert seq.at(11) == "lo"
    assert seq.at(19) == "hi"
    assert seq.at(15) == "lo"  # equidistant: first recorded wins


def test_internals_sequence_empty_lookup():
    with pytest.raises(ValueError):
        InternalsSequence().at(4)


# -- timestep grids ----------------------------------------------------------

def test_ddim_grid_even_subsample():
    assert _ddim_timesteps(8, 4).tolist() == [8, 6, 4, 2, 0]
    assert _ddim_timesteps(8, 8).tolist() == [8, 7, 6, 5, 4, 3, 2, 1, 0]


def test_ddim_grid_rejects_oversampling():
    with pytest.raises(ValueError):
        _ddim_timesteps(8, 9)


# -- plain chains ------------------------------------------------------------

def test_sample_is_deterministic():
    m = model_with(MINI)
    _, ids = rand_input()
    sched = make_schedule(8)
    a, _ = sample(m, ids, sched, seed=7)
    b, _ = sample(m, ids, sched, seed=7)
    c, _ = sample(m, ids, sched, seed=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_recording_does_not_perturb_the_chain():
    m = model_with(MINI)
    _, ids = rand_input()
    sched = make_schedule(8)
    plain, none_seq = sample(m, ids, sched, seed=3)
    recorded, seq = sample(m, ids, sched, seed=3, record=True)
    assert none_seq is None
    assert np.array_equal(plain, recorded)
    assert seq.timesteps == [8, 7, 6, 5, 4, 3, 2, 1]
    assert seq.provenance == "sampled"
    assert seq.at(8).attn[0].data.dtype == np.float32


def test_ddpm_requires_every_timestep():
    m = model_with(MINI)
    _, ids = rand_input()
    with pytest.raises(ValueError):
        sample(m, ids, make_schedule(8), seed=0, n_steps=4, method="ddpm")


def test_unknown_method_rejected():
    m = model_with(MINI)
    _, ids = rand_input()
    with pytest.raises(ValueError):
        sample(m, ids, make_schedule(8), seed=0, method="euler")


def test_flag_length_must_match_steps():
    m = model_with(MINI)
    _, ids = rand_input()
    with pytest.raises(ValueError):
        sample(m, ids, make_schedule(8), seed=0, flags=np.ones(5, bool))


# -- guided chains -----------------------------------------------------------

def test_conditioning_mix_changes_output():
    m = model_with(MINI)
    _, ids = rand_input()
    sched = make_schedule(8)
    flags = np.ones(8, bool)
    plain, _ = sample(m, ids, sched, seed=0)
    mixed, _ = sample(m, ids, sched, seed=0,
                      guidance=GuidanceConfig(s=2.0, v=0.0), flags=flags)
    assert not np.array_equal(plain, mixed)


def test_all_false_flags_disable_guidance_bitwise():
    m = model_with(MINI)
    _, ids = rand_input()
    sched = make_schedule(8)
    plain, _ = sample(m, ids, sched, seed=0)
    gated, _ = sample(m, ids, sched, seed=0,
                      guidance=GuidanceConfig(s=3.0, v=100.0),
                      energy=CENTROID_PULL, srcs={}, flags=np.zeros(8, bool))
    assert np.array_equal(plain, gated)


def test_default_flags_follow_standard_schedule():
    m = model_with(MINI32)
    _, ids = rand_input()
    sched = make_schedule(32)
    auto, _ = sample(m, ids, sched, seed=1, n_steps=32, method="ddim",
                     guidance=GuidanceConfig(s=1.5, v=0.0))
    manual, _ = sample(m, ids, sched, seed=1, n_steps=32, method="ddim",
                       guidance=GuidanceConfig(s=1.5, v=0.0),
                       flags=make_guidance_schedule(32))
    assert np.array_equal(auto, manual)


def test_energy_guided_chain_is_deterministic_and_distinct():
    m = model_with(MINI)
    _, ids = rand_input()
    sched = make_schedule(8)
    kw = dict(guidance=GuidanceConfig(s=0.0, v=50.0), energy=CENTROID_PULL,
              srcs={}, flags=np.ones(8, bool), clip_x0=False)
    a, _ = sample(m, ids, sched, seed=2, **kw)
    b, _ = sample(m, ids, sched, seed=2, **kw)
    plain, _ = sample(m, ids, sched, seed=2, clip_x0=False)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, plain)


# -- energy gradients --------------------------------------------------------

def test_grad_energy_matches_finite_differences():
    cfg = ModelConfig(image_size=8, widths=(8, 8, 8), token_dim=8, time_dim=16,
                      groups=4, sched_T=8, dtype="float64")
    m = model_with(cfg)
    _, ids = rand_input()
    z = stream(11, "init").standard_normal((3, 8, 8))
    g, grad, eps, internals = grad_energy(m, z, 3, ids, CENTROID_PULL, {})
    assert eps.shape == z.shape
    assert grad.shape == z.shape
    assert np.any(grad != 0.0)

    def g_of(zv):
        with ad.no_grad():
            _, rec = m.forward(zv, 3, ids, record=True)
        from selfguide.energies import eval_energy
        return float(eval_energy(CENTROID_PULL, rec, {}, 3).item())

    h = 1e-6
    coords = [(0, 1, 2), (1, 4, 4), (2, 7, 0), (0, 0, 0), (2, 3, 5)]
    for c in coords:
        zp = z.copy(); zp[c] += h
        zm = z.copy(); zm[c] -= h
        fd = (g_of(zp) - g_of(zm)) / (2 * h)
        denom = max(abs(fd), abs(grad[c]), 1e-12)
        assert abs(fd - grad[c]) / denom < 1e-4, (c, fd, grad[c])


# -- extraction from existing images -----------------------------------------

def test_extraction_covers_every_timestep_deterministically():
    m = model_with(MINI)
    _, ids = rand_input()
    sched = make_schedule(8)
    image = stream(5, "scene").standard_normal((3, 8, 8)) * 0.5
    seq = extract_real_internals(m, image, ids, sched, seed=9)
    assert seq.provenance == "extracted"
    assert seq.timesteps == list(range(1, 9))
    again = extract_real_internals(m, image, ids, sched, seed=9)
    other = extract_real_internals(m, image, ids, sched, seed=10)
    for t in (1, 4, 8):
        assert np.array_equal(seq.at(t).attn[0].data, again.at(t).attn[0].data)
    assert not all(
        np.array_equal(seq.at(t).attn[0].data, other.at(t).attn[0].data)
        for t in range(1, 9))
