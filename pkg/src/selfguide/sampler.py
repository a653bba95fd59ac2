"""Guided reverse-diffusion sampling.

The guidance schedule front-loads guided steps, leaves the final
steps untouched, and alternates through the middle.  On a guided step
the conditional forward runs once with recording enabled, the energy
is differentiated through the recorded internals back to the latent,
and the unconditional prediction is blended in; on an unguided step
the conditional prediction is used as-is, bit for bit, and the
unconditional branch is never evaluated.  The unconditional forward
never records internals.

All stochasticity is drawn from counter-based streams keyed by the
caller's seed and the step index, so a chain is a pure function of
(model weights, tokens, seed, config).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import GuidanceConfig, ddim_step, ddpm_step, guided_epsilon, noise_image
from .energies import eval_energy
from .rng import stream


def make_guidance_schedule(n_steps):
    """Boolean guidance gate per step, earliest step first.

    The first floor(3n/16) steps are guided, the last floor(n/32) are
    not, and the stretch between alternates starting with a guided
    step.
    """
    if n_steps < 32:
        raise ValueError("guidance schedule needs at least 32 steps")
    lead = (3 * n_steps) // 16
    tail = n_steps // 32
    flags = np.zeros(n_steps, dtype=bool)
    flags[:lead] = True
    for i in range(lead, n_steps - tail):
        flags[i] = (i - lead) % 2 == 0
    return flags


@dataclass
class InternalsSequence:
    """Recorded internals along a chain, indexed by diffusion timestep."""

    steps: list = field(default_factory=list)  # (t, ModelInternals)
    provenance: str = "sampled"

    def append(self, t, internals):
        self.steps.append((int(t), internals))

    @property
    def timesteps(self):
        return [t for t, _ in self.steps]

    def at(self, t):
        """Internals recorded nearest to timestep t (first on ties)."""
        if not self.steps:
            raise ValueError("empty internals sequence")
        best = min(self.steps, key=lambda item: abs(item[0] - t))
        return best[1]


def grad_energy(model, z_t, t, tokens, energy, srcs):
    """Energy value, d(energy)/dz_t, and the conditional eps at z_t.

    Runs one recorded conditional forward with the latent marked
    differentiable, evaluates the energy on the recorded internals,
    and backpropagates.  The prediction is returned so a sampler can
    reuse it without a second forward.
    """
    z = Tensor(np.asarray(z_t, dtype=model.config.np_dtype()), requires_grad=True)
    eps, internals = model.forward(z, t, tokens, record=True)
    g = eval_energy(energy, internals, srcs, t)
    g.backward()
    grad = z.grad.copy()
    z.zero_grad()
    return float(g.item()), grad, eps.data, internals


def _ddim_timesteps(T, n_steps):
    ts = np.unique(np.linspace(0, T, n_steps + 1).round().astype(int))[::-1]
    if len(ts) != n_steps + 1:
        raise ValueError("n_steps too large for this schedule")
    return ts


def sample(model, tokens, sched, seed, n_steps=None, method="ddpm",
           guidance=None, energy=None, srcs=None, record=False,
           clip_x0=True, flags=None):
    """Run a reverse chain; returns (image, internals or None).

    method "ddpm" requires n_steps == sched.T; "ddim" subsamples the
    timestep grid evenly.  `guidance` is a GuidanceConfig; its s scales
    classifier-free mixing and its v scales the energy gradient.  When
    either effect is active, `flags` (default: the standard guidance
    schedule) gates both per step.
    """
    guidance = guidance or GuidanceConfig(s=0.0, v=0.0)
    n_steps = n_steps or sched.T
    if method == "ddpm" and n_steps != sched.T:
        raise ValueError("ddpm sampling must use every timestep")
    if method not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampling method {method!r}")
    guided_active = energy is not None or guidance.s != 0.0
    if flags is None:
        flags = make_guidance_schedule(n_steps) if guided_active else np.zeros(n_steps, bool)
    flags = np.asarray(flags, dtype=bool)
    if len(flags) != n_steps:
        raise ValueError("guidance flags length must equal n_steps")

    shape = (model.config.channels, model.config.image_size, model.config.image_size)
    z = stream(seed, "init").standard_normal(shape).astype(model.config.np_dtype())
    seq = InternalsSequence() if record else None
    if method == "ddim":
        grid = _ddim_timesteps(sched.T, n_steps)
    null = model.null_tokens()

    for n in range(n_steps):
        if method == "ddpm":
            t, t_next = sched.T - n, None
        else:
            t, t_next = int(grid[n]), int(grid[n + 1])
        use_guidance = bool(flags[n]) and guided_active
        if use_guidance and energy is not None:
            _, grad, eps_c, internals = grad_energy(model, z, t, tokens, energy, srcs)
        else:
            with ad.no_grad():
                eps_t, internals = model.forward(z, t, tokens, record=record)
            eps_c, grad = eps_t.data, None
        if record:
            seq.append(t, internals.detached())
        if use_guidance:
            if guidance.s != 0.0:
                with ad.no_grad():
                    eps_u = model.forward(z, t, null)[0].data
            else:
                eps_u = eps_c
            eps_hat = guided_epsilon(eps_c, eps_u, guidance.s, grad,
                                     guidance.v, sched.sigma_t(t))
        else:
            eps_hat = eps_c
        if method == "ddpm":
            noise = stream(seed, "step", n).standard_normal(shape) if t > 1 else None
            z = ddpm_step(z, eps_hat, t, sched, noise, clip_x0=clip_x0)
        else:
            z = ddim_step(z, eps_hat, t, t_next, sched, clip_x0=clip_x0)
        z = z.astype(model.config.np_dtype())
    return z, seq


def extract_real_internals(model, image, tokens, sched, seed):
    """Record internals for an existing image at every noise level.

    The image is independently re-noised to each timestep with
    stream-keyed noise, so extraction is deterministic and any one
    timestep can be reproduced in isolation.
    """
    image = np.asarray(image, dtype=model.config.np_dtype())
    seq = InternalsSequence(provenance="extracted")
    with ad.no_grad():
        for t in range(1, sched.T + 1):
            eps = stream(seed, "extract", t).standard_normal(image.shape)
            z_t = noise_image(image, t, eps, sched)
            _, internals = model.forward(z_t, t, tokens, record=True)
            seq.append(t, internals.detached())
    return seq
