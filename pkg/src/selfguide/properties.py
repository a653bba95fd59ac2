"""Differentiable per-token properties of attention maps.

Given a softmaxed cross-attention channel A_k (H x W), these extract
quantities that can serve as guidance targets: a soft-binarized mask
(shape), its mean coverage (size), the mass centroid of the raw map
(centroid), and a mask-weighted average of activation features
(appearance).  All are Tensor-in Tensor-out and backpropagate to the
attention logits, except where a stop-gradient is deliberate.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, stop_gradient
from .transforms import Affine2D


@dataclass
class PropertyConfig:
    sharpness: float = 10.0
    eps_guard: float = 1e-12
    # pixel centers live at ((w+0.5)/W, (h+0.5)/H), x right, y down
    coord_convention: str = "pixel-center"
    # the centroid uses the raw map by default; thresholding it first is
    # available but empirically unnecessary
    centroid_thresholded: bool = False
    # average attention channels over a multi-token concept before
    # extraction instead of extracting per token
    pool_tokens: bool = False

    def __post_init__(self):
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")


DEFAULT_CONFIG = PropertyConfig()


def normalize_map(x):
    """Affinely rescale a map to min 0, max 1; constant maps go to zero.

    For non-constant maps the division is exact, (X - min)/(max - min),
    so the extremes land on 0.0 and 1.0 bit-exactly; the guard epsilon
    is reserved for genuinely degenerate denominators elsewhere.
    """
    x = as_tensor(x)
    if x.data.max() == x.data.min():
        return Tensor(np.zeros_like(x.data))
    mn = x.min()
    mx = x.max()
    return (x - mn) / (mx - mn)


def threshold_map(a_k, cfg=DEFAULT_CONFIG):
    """Soft-binarize a map at the midpoint of its range.

    normalize(sigmoid(sharpness * (normalize(A) - 0.5))): binary maps
    are exact fixed points, everything else lands in [0,1] with a sharp
    but differentiable transition.
    """
    inner = normalize_map(a_k)
    return normalize_map(ad.sigmoid((inner - 0.5) * cfg.sharpness))


def _coord_grids(h, w, dtype):
    xs = ((np.arange(w, dtype=np.float64) + 0.5) / w).astype(dtype)
    ys = ((np.arange(h, dtype=np.float64) + 0.5) / h).astype(dtype)
    return np.broadcast_to(xs, (h, w)), np.broadcast_to(ys[:, None], (h, w))


def centroid(a_k, cfg=DEFAULT_CONFIG):
    """Mass centroid (x, y) of a non-negative map in [0,1]^2 coordinates.

    The raw (non-thresholded) map is used unless the config says
    otherwise.  An all-zero map has no centroid and raises.
    """
    a_k = as_tensor(a_k)
    if not np.any(a_k.data):
        raise ValueError("all-zero map")
    if cfg.centroid_thresholded:
        a_k = threshold_map(a_k, cfg)
    h, w = a_k.data.shape
    gx, gy = _coord_grids(h, w, a_k.data.dtype)
    mass = a_k.sum()
    cx = (a_k * gx).sum() / mass
    cy = (a_k * gy).sum() / mass
    return ad.concatenate([cx.reshape(1), cy.reshape(1)])


def size(a_k, cfg=DEFAULT_CONFIG):
    """Mean coverage of the thresholded map: scalar in [0,1]."""
    return threshold_map(a_k, cfg).mean()


def shape(a_k, cfg=DEFAULT_CONFIG):
    """The thresholded attention map itself."""
    return threshold_map(a_k, cfg)


def appearance(a_k, psi, cfg=DEFAULT_CONFIG):
    """Mask-weighted mean of activation features: vector of length D.

    The mask is the thresholded attention resampled to the activation
    resolution, wrapped in a stop-gradient so only the activation path
    carries gradient.
    """
    a_k = as_tensor(a_k)
    psi = as_tensor(psi)
    ph, pw, _ = psi.data.shape
    if a_k.data.shape != (ph, pw):
        a_k = ad.bilinear_resample(a_k, Affine2D.identity(), ph, pw)
    mask = stop_gradient(shape(a_k, cfg))
    weighted = (mask.reshape(ph, pw, 1) * psi).sum(axis=(0, 1))
    return weighted / (mask.sum() + cfg.eps_guard)
