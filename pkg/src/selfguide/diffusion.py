"""Variance-preserving diffusion: schedules, noising, losses, updates.

Timesteps are 1-based: t runs over 1..T, with t=0 denoting clean data
(alpha=1, sigma=0).  All schedule math is float64; callers may cast.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .rng import stream


@dataclass
class NoiseSchedule:
    """Per-timestep (alpha_t, sigma_t) with alpha_t^2 + sigma_t^2 = 1."""

    T: int
    alpha: np.ndarray
    sigma: np.ndarray

    def alpha_t(self, t):
        return 1.0 if t == 0 else float(self.alpha[t - 1])

    def sigma_t(self, t):
        return 0.0 if t == 0 else float(self.sigma[t - 1])

    def alpha_bar(self, t):
        a = self.alpha_t(t)
        return a * a


@dataclass
class GuidanceConfig:
    """Strengths for the combined sampling update.

    s: classifier-free guidance strength; v: weight on the energy
    gradient; schedule: optional per-step on/off mask (defaults to
    always-on when absent).
    """

    s: float = 2.0
    v: float = 7500.0
    schedule: np.ndarray = None

    def __post_init__(self):
        if self.s < 0 or self.v < 0:
            raise ValueError("guidance strengths must be non-negative")


def make_schedule(T, kind="cosine"):
    """Build a variance-preserving schedule of T steps.

    kind "linear-beta" discretizes the classic linearly-growing noise
    rate; "cosine" uses the squared-cosine signal curve.  Both reach
    sigma_T >= 0.99 for any T >= 2.
    """
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    u = np.arange(1, T + 1, dtype=np.float64) / T
    if kind == "linear-beta":
        # integral of beta(u) = bmin + (bmax - bmin) u over [0, u]
        bmin, bmax = 0.1, 20.0
        integral = bmin * u + 0.5 * (bmax - bmin) * u * u
        alpha_bar = np.exp(-0.5 * integral)
    elif kind == "cosine":
        s = 0.008
        f = np.cos((u + s) / (1.0 + s) * np.pi / 2.0) ** 2
        f0 = np.cos(s / (1.0 + s) * np.pi / 2.0) ** 2
        # floor keeps alpha_T ~ 0.1: reconstructing x0 = (z - sigma*eps)/alpha
        # divides by alpha_t, and a raw cosine tail (~1e-5) turns a small
        # prediction miss at the top steps into a many-hundredfold blowup
        # that unclipped chains never recover from
        alpha_bar = np.clip(f / f0, 1e-2, 1.0)
        # cap per-step destruction so late-step posteriors stay sane
        ratios = np.minimum(alpha_bar / np.concatenate(([1.0], alpha_bar[:-1])), 0.999)
        ratios = np.maximum(ratios, 1e-6)
        alpha_bar = np.cumprod(ratios)
    else:
        raise ValueError(f"unknown schedule kind: {kind}")
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma)


def noise_image(x, t, eps, sched):
    """z_t = alpha_t x + sigma_t eps."""
    xd = x.data if isinstance(x, Tensor) else x
    ed = eps.data if isinstance(eps, Tensor) else eps
    if xd.shape != ed.shape:
        raise ValueError("image and noise shapes differ")
    return sched.alpha_t(t) * xd + sched.sigma_t(t) * ed


def ddpm_step(z_t, eps_hat, t, sched, noise, clip_x0=True):
    """One ancestral reverse step t -> t-1.

    Estimates x0 from the noise prediction (optionally clamped to
    [-1,1]), then samples the forward-process posterior.  At t=1 the
    posterior is deterministic and `noise` is ignored.  clip_x0=False
    exists for data that is not image-ranged, e.g. scalar oracle chains.
    """
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t - 1)
    a_step = ab_t / ab_prev
    beta = 1.0 - a_step
    x0 = (z_t - sched.sigma_t(t) * eps_hat) / sched.alpha_t(t)
    if clip_x0:
        x0 = np.clip(x0, -1.0, 1.0)
    if t == 1:
        return x0
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    c1 = np.sqrt(a_step) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0 * x0 + c1 * z_t + np.sqrt(var) * noise


def ddim_step(z_t, eps_hat, t, t_next, sched, clip_x0=True):
    """Deterministic (eta=0) update from level t to t_next <= t."""
    if t_next > t:
        raise ValueError("ddim_step requires t_next <= t")
    x0 = (z_t - sched.sigma_t(t) * eps_hat) / sched.alpha_t(t)
    if clip_x0:
        x0 = np.clip(x0, -1.0, 1.0)
    return sched.alpha_t(t_next) * x0 + sched.sigma_t(t_next) * eps_hat


def guided_epsilon(eps_cond, eps_uncond, s, grad_g, v, sigma_t):
    """Combined update direction.

    Computes (1+s)*eps_cond - s*eps_uncond + v*sigma_t*grad_g.  The
    degenerate cases take dedicated branches so that s=0 returns the
    conditional prediction bitwise and v=0 returns the plain CFG
    combination bitwise.
    """
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("prediction shapes differ")
    if s == 0:
        out = eps_cond
    else:
        out = (1.0 + s) * eps_cond - s * eps_uncond
    if v != 0 and grad_g is not None:
        if grad_g.shape != eps_cond.shape:
            raise ValueError("gradient shape differs from predictions")
        out = out + v * sigma_t * grad_g
    return out


def analytic_optimal_eps(z_t, t, sched):
    """Posterior-optimal noise estimate when the data is unit Gaussian.

    For x ~ N(0,1) and a variance-preserving schedule, E[eps | z_t]
    = sigma_t z_t / (alpha_t^2 + sigma_t^2) = sigma_t z_t.
    """
    return sched.sigma_t(t) * z_t


def training_loss(model, batch, sched, rng, p_uncond=0.1):
    """Mean over the batch of ||eps - eps_theta(z_t; t, y)||^2.

    batch: list of (image, token_ids).  t ~ Uniform{1..T} and eps ~
    N(0,I) per sample; with probability p_uncond the caption is replaced
    by the null sequence so the unconditional branch gets trained too.
    The squared norm sums over pixels (so an all-zero predictor scores
    about the pixel count); w(t) = 1.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    images = np.stack([b[0] for b in batch]).astype(np.float32)
    tokens = np.stack([b[1] for b in batch])
    n = len(batch)
    ts = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(images.shape, dtype=np.float32)
    drop = rng.random(n) < p_uncond
    tokens = tokens.copy()
    tokens[drop] = model.null_tokens()
    a = sched.alpha[ts - 1].astype(np.float32).reshape(n, 1, 1, 1)
    sg = sched.sigma[ts - 1].astype(np.float32).reshape(n, 1, 1, 1)
    z = a * images + sg * eps
    pred = model.forward_batch(Tensor(z), ts, tokens)
    diff = pred - Tensor(eps)
    return (diff * diff).sum(axis=(1, 2, 3)).mean()


def sample_prior(shape, seed, tag="init"):
    return stream(seed, tag).standard_normal(shape)
