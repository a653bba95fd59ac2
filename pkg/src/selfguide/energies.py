"""Differentiable guidance energies over recorded model internals.

An energy is a weighted sum of terms.  Each term names a property
(shape, appearance, size, centroid), the caption token positions it
constrains, and where its reference values come from: a recorded
source run, an affine transform of one, an explicit target, or a
cross-run token mapping.  Terms average spatially over shape maps,
across activation dimensions for appearance, and over the layers and
tokens they touch, so weights stay comparable across term kinds.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .properties import PropertyConfig, appearance, centroid, shape, size
from .transforms import Affine2D

TERM_KINDS = (
    "fix_shape",
    "fix_appearance",
    "fix_size",
    "match_shape_transformed",
    "match_centroid",
    "match_size",
    "match_appearance_cross",
    "copy_shape_source",
    "copy_appearance_source",
)


@dataclass
class EnergyTerm:
    kind: str
    tokens: tuple
    weight: float
    source: str = "orig"
    mapping: dict = None
    target: object = None
    factor: float = None
    transform: Affine2D = None

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValueError(f"unknown energy term kind {self.kind!r}")
        self.tokens = tuple(int(k) for k in self.tokens)
        if not self.tokens:
            raise ValueError("energy term needs at least one token")


@dataclass
class EnergySpec:
    terms: list
    prop_config: PropertyConfig = field(default_factory=PropertyConfig)

    def __post_init__(self):
        total = sum(t.weight for t in self.terms)
        if total > 5.0:
            warnings.warn(
                f"combined energy weight {total:.3g} exceeds 5; "
                "guidance this strong usually degrades samples",
                stacklevel=2,
            )


def _at(source, t):
    """Nearest-timestep lookup on a recorded sequence; pass-through else."""
    return source.at(t) if hasattr(source, "at") else source


def _tok_map(internals, layer, k):
    return internals.attn[layer][:, :, k]


def _appearances(internals, k, cfg):
    """One appearance vector per recorded activation map.

    The mask comes from the final attention layer, which shares the
    activations' resolution, so no cross-resolution resampling happens
    in the common case.
    """
    if not internals.acts:
        raise ValueError("appearance term needs recorded activations")
    a_k = internals.attn[-1][:, :, k]
    return [appearance(a_k, psi, cfg) for psi in internals.acts]


def eval_term(term, cur, srcs, t, cfg):
    """Scalar energy of one term at timestep t.  Differentiable in cur."""
    src = _at(srcs[term.source], t) if term.source in srcs else None
    if term.kind in ("fix_shape", "copy_shape_source", "match_shape_transformed"):
        if src is None:
            raise KeyError(f"energy term needs source {term.source!r}")
        acc = []
        for k in term.tokens:
            for layer in range(len(cur.attn)):
                s_src = shape(_tok_map(src, layer, k), cfg)
                if term.kind == "match_shape_transformed":
                    h, w = s_src.shape
                    s_src = ad.bilinear_resample(s_src, term.transform or Affine2D.identity(), h, w)
                s_cur = shape(_tok_map(cur, layer, k), cfg)
                acc.append(ad.absolute(ad.stop_gradient(s_src) - s_cur).mean())
        return _mean(acc)

    if term.kind in ("fix_appearance", "copy_appearance_source", "match_appearance_cross"):
        if src is None:
            raise KeyError(f"energy term needs source {term.source!r}")
        acc = []
        for k in term.tokens:
            k_src = term.mapping.get(k, k) if term.mapping else k
            for a_src, a_cur in zip(_appearances(src, k_src, cfg), _appearances(cur, k, cfg)):
                acc.append(ad.absolute(ad.stop_gradient(a_src) - a_cur).mean())
        return _mean(acc)

    if term.kind == "fix_size":
        if src is None:
            raise KeyError(f"energy term needs source {term.source!r}")
        acc = []
        for k in term.tokens:
            for layer in range(len(cur.attn)):
                s_src = ad.stop_gradient(size(_tok_map(src, layer, k), cfg))
                acc.append(ad.absolute(s_src - size(_tok_map(cur, layer, k), cfg)))
        return _mean(acc)

    if term.kind == "match_size":
        # factor targets read the source at its cleanest recorded step:
        # the soft coverage of a heavily noised map saturates near one
        # half no matter what the image holds, so scaling the
        # current-step reading would chase a meaningless number
        if term.target is None and term.source not in srcs:
            raise KeyError(f"energy term needs source {term.source!r}")
        fin = _at(srcs[term.source], 1) if term.target is None else None
        acc = []
        for k in term.tokens:
            for layer in range(len(cur.attn)):
                if term.target is not None:
                    tgt = float(term.target)
                else:
                    tgt = float(size(_tok_map(fin, layer, k), cfg).item()) * term.factor
                acc.append(ad.absolute(size(_tok_map(cur, layer, k), cfg) - tgt))
        return _mean(acc)

    if term.kind == "match_centroid":
        acc = []
        for k in term.tokens:
            for layer in range(len(cur.attn)):
                if term.target is not None:
                    tgt = np.asarray(term.target, dtype=np.float64)
                    if term.transform is not None:
                        tgt = np.asarray(term.transform.apply(tgt[0], tgt[1]))
                else:
                    if src is None:
                        raise KeyError(f"energy term needs source {term.source!r}")
                    c_src = centroid(_tok_map(src, layer, k), cfg).data
                    tr = term.transform or Affine2D.identity()
                    tgt = np.asarray(tr.apply(c_src[0], c_src[1]))
                acc.append(ad.absolute(centroid(_tok_map(cur, layer, k), cfg) - tgt).mean())
        return _mean(acc)

    raise ValueError(f"unknown energy term kind {term.kind!r}")


def _mean(parts):
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (1.0 / len(parts))


def eval_energy(spec, cur, srcs, t):
    """Weighted sum of all terms; differentiable w.r.t. cur internals."""
    cfg = spec.prop_config
    total = None
    for term in spec.terms:
        contrib = eval_term(term, cur, srcs, t, cfg) * term.weight
        total = contrib if total is None else total + contrib
    if total is None:
        raise ValueError("energy spec has no terms")
    return total


# -- edit construction ------------------------------------------------------

# default weights sit at the geometric midpoint of each kind's useful range
_SQRT = lambda lo, hi: float(np.sqrt(lo * hi))

EDIT_KINDS = (
    "move", "resize", "move_via_centroid", "new_appearance", "new_layout",
    "merge_layout_appearance", "collage", "collage_with_layout",
    "appearance_transfer",
)


def build_edit(kind, tokens, moved=None, transform=None, target=None,
               factor=None, parts=None, mapping=None, weights=None,
               prop_config=None):
    """Assemble the energy for a named edit.

    tokens: caption positions of all object tokens in play.
    moved: the subset being repositioned / resized (move and resize kinds).
    transform / target / factor: where the moved subset should end up.
    parts: for collages, a list of {"tokens": ..., "source": ...} dicts.
    mapping: for appearance transfer, current-token -> source-token.
    weights: optional per-slot overrides, in the order the terms are built.
    """
    tokens = tuple(int(k) for k in tokens)
    if kind not in EDIT_KINDS:
        raise ValueError(f"unknown edit kind {kind!r}")
    w = list(weights) if weights is not None else None

    def pick(i, default):
        return default if w is None or i >= len(w) or w[i] is None else w[i]

    terms = []
    if kind in ("move", "resize", "move_via_centroid"):
        moved = tuple(int(k) for k in (tokens if moved is None else moved))
        others = tuple(k for k in tokens if k not in moved)
        if others:
            terms.append(EnergyTerm("fix_shape", others, pick(0, _SQRT(0.5, 2.0))))
        terms.append(EnergyTerm("fix_appearance", tokens, pick(1, _SQRT(0.03, 0.3))))
        if kind == "move":
            if transform is None:
                raise ValueError("move needs a transform")
            terms.append(EnergyTerm("match_shape_transformed", moved,
                                    pick(2, _SQRT(0.5, 5.0)), transform=transform))
        elif kind == "move_via_centroid":
            terms.append(EnergyTerm("fix_size", moved, pick(2, _SQRT(0.5, 2.0))))
            terms.append(EnergyTerm("match_centroid", moved, pick(3, _SQRT(1.0, 3.0)),
                                    target=target, transform=transform))
        else:  # resize: retarget the size, keep everything else anchored
            if factor is None and target is None:
                raise ValueError("resize needs a factor or absolute size target")
            terms.append(EnergyTerm("match_size", moved, pick(2, _SQRT(1.0, 3.0)),
                                    target=target, factor=factor))
    elif kind == "new_appearance":
        terms.append(EnergyTerm("fix_shape", tokens, pick(0, _SQRT(0.1, 1.0))))
    elif kind == "new_layout":
        terms.append(EnergyTerm("fix_appearance", tokens, pick(0, _SQRT(0.05, 0.25))))
    elif kind == "merge_layout_appearance":
        terms.append(EnergyTerm("fix_shape", tokens, pick(0, _SQRT(1.0, 2.0)),
                                source="layout"))
        terms.append(EnergyTerm("fix_appearance", tokens, pick(1, _SQRT(0.1, 0.3)),
                                source="appearance"))
    elif kind in ("collage", "collage_with_layout"):
        if not parts:
            raise ValueError("collage needs parts")
        j = len(parts)
        w_shape = pick(0, _SQRT(0.5, 1.0))
        w_app = pick(1, _SQRT(0.05, 0.3))
        if kind == "collage_with_layout":
            terms.append(EnergyTerm("copy_shape_source", tokens, w_shape,
                                    source="layout"))
        for part in parts:
            ptoks = tuple(int(k) for k in part["tokens"])
            if kind == "collage":
                terms.append(EnergyTerm("copy_shape_source", ptoks, w_shape / j,
                                        source=part["source"]))
            terms.append(EnergyTerm("copy_appearance_source", ptoks, w_app / j,
                                    source=part["source"],
                                    mapping=part.get("mapping")))
    elif kind == "appearance_transfer":
        terms.append(EnergyTerm("match_appearance_cross", tokens,
                                pick(0, _SQRT(0.01, 0.1)), mapping=mapping))
    return EnergySpec(terms, prop_config or PropertyConfig())
