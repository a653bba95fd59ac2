"""Command-line entry points.

Subcommands: train, sample, edit, extract, eval-props, selftest.
Every command is a pure function of its config document plus the
explicit seed(s): re-running writes byte-identical outputs.  Output
filenames are fixed per command (see each cmd_* docstring).  The env
var SELFGUIDE_THREADS caps how many independent sampling chains run
concurrently when a config lists several seeds; results are identical
regardless of the setting.

Config documents are JSON with a strict schema: unknown keys are
rejected at every level, and parsing then re-emitting reproduces the
canonical form byte for byte (defaults materialized, keys sorted).
"""

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .autodiff import no_grad
from .denoiser import ModelConfig
from .diffusion import GuidanceConfig, make_schedule
from .energies import EDIT_KINDS, build_edit
from .properties import DEFAULT_CONFIG, centroid, size
from .sampler import extract_real_internals, make_guidance_schedule, sample
from .scenes import SEQ_LEN, TOKENS, BOS, EOS, PAD, COLOR_NAMES, SHAPE_NAMES, SIZE_NAMES
from .train import TrainConfig, load_model, train
from .transforms import Affine2D


class ConfigError(ValueError):
    pass


def _check_keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path}: unknown key {k!r}")


def _get(d, key, default=None):
    v = d.get(key, default)
    return default if v is None else v


def caption_from_words(words, path="prompt"):
    """(size, color, shape) word triplets -> fixed-length token ids."""
    if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
        raise ConfigError(f"{path}: expected a list of words")
    if len(words) % 3 != 0 or not words:
        raise ConfigError(f"{path}: need one (size, color, shape) triplet per object")
    for i in range(0, len(words), 3):
        s, c, h = words[i:i + 3]
        if s not in SIZE_NAMES or c not in COLOR_NAMES or h not in SHAPE_NAMES:
            raise ConfigError(f"{path}: bad triplet {words[i:i+3]!r}")
    ids = [BOS] + [TOKENS[w] for w in words] + [EOS]
    if len(ids) > SEQ_LEN:
        raise ConfigError(f"{path}: caption longer than {SEQ_LEN} tokens")
    return np.asarray(ids + [PAD] * (SEQ_LEN - len(ids)), dtype=np.int64)


def object_token_positions(words):
    return list(range(1, 1 + len(words)))


# -- config document ---------------------------------------------------------

_SAMPLER_KEYS = {"method", "steps", "cfg_scale", "sg_weight", "seed",
                 "clip_x0", "schedule"}
_EDIT_KEYS = {"kind", "tokens", "moved", "transform", "target", "factor",
              "mapping", "parts", "weights"}
_TRANSFORM_KEYS = {"dx", "dy", "rotate", "scale", "center"}
_SOURCE_KEYS = {"kind", "path", "image", "prompt", "seed"}
_TOP_KEYS = {"checkpoint", "weights", "prompt", "sampler", "edit",
             "sources", "dump_internals"}


def _canon_transform(d, path):
    _check_keys(d, _TRANSFORM_KEYS, path)
    out = {"dx": float(_get(d, "dx", 0.0)), "dy": float(_get(d, "dy", 0.0)),
           "rotate": float(_get(d, "rotate", 0.0)),
           "scale": float(_get(d, "scale", 1.0)),
           "center": [float(v) for v in _get(d, "center", [0.5, 0.5])]}
    if len(out["center"]) != 2:
        raise ConfigError(f"{path}.center: expected [x, y]")
    return out


def transform_from_dict(d):
    """Scale and rotate about `center`, then translate."""
    t = Affine2D.translate(d["dx"], d["dy"])
    r = Affine2D.rotate(math.radians(d["rotate"]), about=tuple(d["center"]))
    s = Affine2D.scale(d["scale"], about=tuple(d["center"]))
    return t.compose(r.compose(s))


def _canon_source(d, path):
    _check_keys(d, _SOURCE_KEYS, path)
    kind = _get(d, "kind")
    if kind == "self":
        return {"kind": "self"}
    if kind == "dump":
        if "path" not in d:
            raise ConfigError(f"{path}: dump source needs a path")
        return {"kind": "dump", "path": str(d["path"])}
    if kind in ("extract", "sample"):
        out = {"kind": kind, "prompt": list(_get(d, "prompt", [])),
               "seed": int(_get(d, "seed", 0))}
        caption_from_words(out["prompt"], f"{path}.prompt")
        if kind == "extract":
            if "image" not in d:
                raise ConfigError(f"{path}: extract source needs an image path")
            out["image"] = str(d["image"])
        return out
    raise ConfigError(f"{path}: unknown source kind {kind!r}")


@dataclass
class EditConfig:
    """Parsed, canonical run document for sample/edit.

    `doc` always holds the canonical dict form; attribute views are
    derived from it.  Canonical means every default is materialized, so
    emit() output is stable under parse -> emit.
    """

    doc: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        _check_keys(raw, _TOP_KEYS, "config")
        if "checkpoint" not in raw:
            raise ConfigError("config: missing checkpoint path")
        if "prompt" not in raw:
            raise ConfigError("config: missing prompt")
        doc = {"checkpoint": str(raw["checkpoint"]),
               "weights": str(_get(raw, "weights", "ema")),
               "prompt": list(raw["prompt"]),
               "dump_internals": bool(_get(raw, "dump_internals", False))}
        if doc["weights"] not in ("ema", "raw"):
            raise ConfigError("config.weights: expected \"ema\" or \"raw\"")
        caption_from_words(doc["prompt"])

        s = _get(raw, "sampler", {})
        _check_keys(s, _SAMPLER_KEYS, "sampler")
        method = str(_get(s, "method", "ddpm"))
        if method not in ("ddpm", "ddim"):
            raise ConfigError(f"sampler.method: unknown method {method!r}")
        seed = _get(s, "seed", 0)
        seeds = [int(x) for x in seed] if isinstance(seed, list) else int(seed)
        sched = _get(s, "schedule", "default")
        if isinstance(sched, list):
            sched = [bool(b) for b in sched]
        elif sched not in ("default", "all-on", "all-off"):
            raise ConfigError("sampler.schedule: expected \"default\", \"all-on\", "
                              "\"all-off\", or a list of booleans")
        doc["sampler"] = {"method": method,
                          "steps": None if _get(s, "steps") is None else int(s["steps"]),
                          "cfg_scale": float(_get(s, "cfg_scale", 0.0)),
                          "sg_weight": float(_get(s, "sg_weight", 0.0)),
                          "seed": seeds, "clip_x0": bool(_get(s, "clip_x0", True)),
                          "schedule": sched}

        if "edit" in raw and raw["edit"] is not None:
            e = raw["edit"]
            _check_keys(e, _EDIT_KEYS, "edit")
            kind = _get(e, "kind")
            if kind not in EDIT_KINDS:
                raise ConfigError(f"edit.kind: unknown edit kind {kind!r}")
            ed = {"kind": kind,
                  "tokens": [int(k) for k in
                             _get(e, "tokens", object_token_positions(doc["prompt"]))]}
            ed["moved"] = None if _get(e, "moved") is None else [int(k) for k in e["moved"]]
            ed["transform"] = (None if _get(e, "transform") is None
                               else _canon_transform(e["transform"], "edit.transform"))
            tgt = _get(e, "target")
            ed["target"] = (tgt if tgt is None or isinstance(tgt, (int, float))
                            else [float(v) for v in tgt])
            ed["factor"] = None if _get(e, "factor") is None else float(e["factor"])
            mp = _get(e, "mapping")
            ed["mapping"] = None if mp is None else {str(int(k)): int(v)
                                                     for k, v in mp.items()}
            parts = _get(e, "parts")
            if parts is not None:
                canon_parts = []
                for i, p in enumerate(parts):
                    _check_keys(p, {"tokens", "source", "mapping"}, f"edit.parts[{i}]")
                    cp = {"tokens": [int(k) for k in p["tokens"]],
                          "source": str(p["source"])}
                    pm = _get(p, "mapping")
                    cp["mapping"] = None if pm is None else {str(int(k)): int(v)
                                                             for k, v in pm.items()}
                    canon_parts.append(cp)
                parts = canon_parts
            ed["parts"] = parts
            wts = _get(e, "weights")
            ed["weights"] = None if wts is None else [None if v is None else float(v)
                                                     for v in wts]
            doc["edit"] = ed
        else:
            doc["edit"] = None

        srcs = _get(raw, "sources", {})
        doc["sources"] = {str(name): _canon_source(spec, f"sources.{name}")
                          for name, spec in srcs.items()}
        cfg = cls(doc)
        cfg.build_energy()  # validate term structure early
        return cfg

    def emit(self):
        return json.dumps(self.doc, indent=2, sort_keys=True) + "\n"

    # -- derived views -------------------------------------------------------

    @property
    def caption(self):
        return caption_from_words(self.doc["prompt"])

    @property
    def seeds(self):
        s = self.doc["sampler"]["seed"]
        return s if isinstance(s, list) else [s]

    def guidance_flags(self, n_steps):
        sched = self.doc["sampler"]["schedule"]
        if sched == "default":
            return None
        if sched == "all-on":
            return np.ones(n_steps, bool)
        if sched == "all-off":
            return np.zeros(n_steps, bool)
        if len(sched) != n_steps:
            raise ConfigError("sampler.schedule: length must equal steps")
        return np.asarray(sched, bool)

    def build_energy(self):
        """EnergySpec for the edit section, or None for plain sampling."""
        e = self.doc["edit"]
        if e is None:
            return None
        transform = None if e["transform"] is None else transform_from_dict(e["transform"])
        mapping = (None if e["mapping"] is None
                   else {int(k): v for k, v in e["mapping"].items()})
        parts = None
        if e["parts"] is not None:
            parts = [{"tokens": p["tokens"], "source": p["source"],
                      "mapping": (None if p["mapping"] is None
                                  else {int(k): v for k, v in p["mapping"].items()})}
                     for p in e["parts"]]
        target = e["target"]
        if isinstance(target, list):
            target = tuple(target)
        try:
            return build_edit(e["kind"], e["tokens"], moved=e["moved"],
                              transform=transform, target=target,
                              factor=e["factor"], parts=parts, mapping=mapping,
                              weights=e["weights"])
        except ValueError as err:
            raise ConfigError(f"edit: {err}") from err

    def source_names(self):
        e = self.doc["edit"]
        names = {"orig"} if e is not None else set()
        if e is not None:
            if e["kind"] in ("merge_layout_appearance", "collage_with_layout"):
                names.add("layout")
            if e["kind"] == "merge_layout_appearance":
                names.add("appearance")
            for p in e["parts"] or []:
                names.add(p["source"])
        return names


def parse_edit_config(text):
    return EditConfig.parse(text)


def emit_edit_config(cfg):
    return cfg.emit()


# -- command helpers ---------------------------------------------------------

def _threads():
    try:
        return max(1, int(os.environ.get("SELFGUIDE_THREADS", "1")))
    except ValueError:
        return 1


def _load_json(path, allowed, what):
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"{what} config not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} config is not valid JSON: {e}")
    _check_keys(raw, allowed, what)
    return raw


def _side_by_side(left, right):
    sep = -np.ones((left.shape[0], left.shape[1], 2), dtype=left.dtype)
    return np.concatenate([left, sep, right], axis=2)


def _suffix(seed, seeds):
    return "" if len(seeds) == 1 else f"_{seed}"


def _resolve_sources(cfg, model, sched, base_seq):
    """Materialize every named source the edit references."""
    srcs = {}
    declared = cfg.doc["sources"]
    for name in sorted(cfg.source_names()):
        spec = declared.get(name, {"kind": "self"})
        if spec["kind"] == "self":
            if base_seq is None:
                raise ConfigError(f"sources.{name}: no base chain to borrow from")
            srcs[name] = base_seq
        elif spec["kind"] == "dump":
            srcs[name] = formats.read_internals(spec["path"])
        elif spec["kind"] == "sample":
            _, seq = sample(model, caption_from_words(spec["prompt"]), sched,
                            spec["seed"], n_steps=cfg.doc["sampler"]["steps"],
                            method=cfg.doc["sampler"]["method"], record=True,
                            clip_x0=cfg.doc["sampler"]["clip_x0"])
            srcs[name] = seq
        else:  # extract
            image = formats.read_ppm(spec["image"])
            expect = (model.config.channels, model.config.image_size, model.config.image_size)
            if image.shape != expect:
                raise ConfigError(f"sources.{name}: image shape {image.shape} "
                                  f"does not match model {expect} (no resizing)")
            srcs[name] = extract_real_internals(
                model, image, caption_from_words(spec["prompt"]), sched, spec["seed"])
    return srcs


# -- commands ----------------------------------------------------------------

def cmd_train(args):
    """Writes model.sgdf (checkpoint) and metrics.txt to --out."""
    raw = _load_json(args.config, {"model", "train", "resume"}, "train")
    m = _get(raw, "model", {})
    _check_keys(m, set(ModelConfig.__dataclass_fields__), "train.model")
    if "widths" in m:
        m = dict(m, widths=tuple(m["widths"]))
    mcfg = ModelConfig(**m)
    t = _get(raw, "train", {})
    _check_keys(t, set(TrainConfig.__dataclass_fields__), "train.train")
    tcfg = TrainConfig(**t)
    if args.steps is not None:
        tcfg.steps = args.steps
    if args.seed is not None:
        tcfg.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    train(mcfg, tcfg,
          out_path=os.path.join(args.out, "model.sgdf"),
          metrics_path=os.path.join(args.out, "metrics.txt"),
          resume=raw.get("resume"),
          progress=lambda msg: print(msg, flush=True))
    print(f"wrote {os.path.join(args.out, 'model.sgdf')}")
    return 0


def _apply_overrides(cfg, args):
    s = cfg.doc["sampler"]
    if args.seed is not None:
        s["seed"] = args.seed
    if args.steps is not None:
        s["steps"] = args.steps
    if args.cfg_scale is not None:
        s["cfg_scale"] = args.cfg_scale
    if args.sg_weight is not None:
        s["sg_weight"] = args.sg_weight


def _load_run_config(args):
    try:
        with open(args.config) as f:
            cfg = EditConfig.parse(f.read())
    except FileNotFoundError:
        raise ConfigError(f"config not found: {args.config}")
    _apply_overrides(cfg, args)
    return cfg, load_model(cfg.doc["checkpoint"], weights=cfg.doc["weights"])


def cmd_sample(args):
    """Writes sample[_seed].ppm (+ internals[_seed].sgin if requested)."""
    cfg, model = _load_run_config(args)
    sched = make_schedule(model.config.sched_T, model.config.sched_kind)
    s = cfg.doc["sampler"]
    os.makedirs(args.out, exist_ok=True)
    n_steps = s["steps"] or sched.T
    guidance = GuidanceConfig(s=s["cfg_scale"], v=0.0)

    def run_one(seed):
        image, seq = sample(model, cfg.caption, sched, seed, n_steps=s["steps"],
                            method=s["method"], guidance=guidance,
                            record=cfg.doc["dump_internals"],
                            clip_x0=s["clip_x0"],
                            flags=cfg.guidance_flags(n_steps))
        tag = _suffix(seed, cfg.seeds)
        formats.write_ppm(os.path.join(args.out, f"sample{tag}.ppm"), image)
        if seq is not None:
            formats.write_internals(os.path.join(args.out, f"internals{tag}.sgin"), seq)
        return seed

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        list(pool.map(run_one, cfg.seeds))
    print(f"wrote {len(cfg.seeds)} sample(s) to {args.out}")
    return 0


def cmd_edit(args):
    """Writes original[_seed].ppm, edited[_seed].ppm, and the contact
    sheet side_by_side[_seed].ppm; with dump_internals also
    original[_seed].sgin and edited[_seed].sgin."""
    cfg, model = _load_run_config(args)
    if cfg.doc["edit"] is None:
        raise ConfigError("edit command needs an edit section in the config")
    sched = make_schedule(model.config.sched_T, model.config.sched_kind)
    s = cfg.doc["sampler"]
    os.makedirs(args.out, exist_ok=True)
    n_steps = s["steps"] or sched.T
    energy = cfg.build_energy()
    guidance = GuidanceConfig(s=s["cfg_scale"], v=s["sg_weight"])

    def run_one(seed):
        base_image, base_seq = sample(model, cfg.caption, sched, seed,
                                      n_steps=s["steps"], method=s["method"],
                                      guidance=GuidanceConfig(s=s["cfg_scale"], v=0.0),
                                      record=True, clip_x0=s["clip_x0"],
                                      flags=cfg.guidance_flags(n_steps))
        srcs = _resolve_sources(cfg, model, sched, base_seq)
        edited, edited_seq = sample(model, cfg.caption, sched, seed,
                                    n_steps=s["steps"], method=s["method"],
                                    guidance=guidance, energy=energy, srcs=srcs,
                                    record=cfg.doc["dump_internals"],
                                    clip_x0=s["clip_x0"],
                                    flags=cfg.guidance_flags(n_steps))
        tag = _suffix(seed, cfg.seeds)
        formats.write_ppm(os.path.join(args.out, f"original{tag}.ppm"), base_image)
        formats.write_ppm(os.path.join(args.out, f"edited{tag}.ppm"), edited)
        formats.write_ppm(os.path.join(args.out, f"side_by_side{tag}.ppm"),
                          _side_by_side(base_image, edited))
        if cfg.doc["dump_internals"]:
            formats.write_internals(os.path.join(args.out, f"original{tag}.sgin"), base_seq)
            formats.write_internals(os.path.join(args.out, f"edited{tag}.sgin"), edited_seq)
        return seed

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        list(pool.map(run_one, cfg.seeds))
    print(f"wrote {len(cfg.seeds)} edit(s) to {args.out}")
    return 0


def cmd_extract(args):
    """Writes internals.sgin for a real image at every noise level."""
    raw = _load_json(args.config, {"checkpoint", "weights", "image", "prompt", "seed"},
                     "extract")
    for k in ("checkpoint", "image", "prompt"):
        if k not in raw:
            raise ConfigError(f"extract: missing {k}")
    model = load_model(raw["checkpoint"], weights=_get(raw, "weights", "ema"))
    image = formats.read_ppm(raw["image"])
    expect = (model.config.channels, model.config.image_size, model.config.image_size)
    if image.shape != expect:
        raise ConfigError(f"extract: image shape {image.shape} does not match "
                          f"model {expect} (no resizing)")
    seed = args.seed if args.seed is not None else int(_get(raw, "seed", 0))
    sched = make_schedule(model.config.sched_T, model.config.sched_kind)
    seq = extract_real_internals(model, image, caption_from_words(raw["prompt"]),
                                 sched, seed)
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "internals.sgin")
    formats.write_internals(out, seq)
    print(f"wrote {out} ({len(seq.steps)} steps)")
    return 0


def cmd_eval_props(args):
    """Prints per-token centroid and size measured from an internals dump."""
    raw = _load_json(args.config, {"dump", "tokens", "timestep"}, "eval-props")
    if "dump" not in raw or "tokens" not in raw:
        raise ConfigError("eval-props: need dump path and token list")
    seq = formats.read_internals(raw["dump"])
    t = int(_get(raw, "timestep", 1))
    internals = seq.at(t)
    print(f"dump {raw['dump']}: provenance {seq.provenance}, "
          f"{len(seq.steps)} steps, reading nearest to t={t}")
    with no_grad():
        for k in raw["tokens"]:
            k = int(k)
            rows = []
            for a, (pos, res, idx) in zip(internals.attn, internals.layer_meta):
                c = centroid(a[:, :, k], DEFAULT_CONFIG)
                sz = size(a[:, :, k], DEFAULT_CONFIG)
                rows.append((pos, res, idx, c.data, float(sz.data)))
            cx = float(np.mean([r[3][0] for r in rows]))
            cy = float(np.mean([r[3][1] for r in rows]))
            sz = float(np.mean([r[4] for r in rows]))
            print(f"token {k}: centroid ({cx:.4f}, {cy:.4f}) size {sz:.4f}")
            for pos, res, idx, c, s_ in rows:
                print(f"  layer {idx} {pos}@{res}: centroid "
                      f"({float(c[0]):.4f}, {float(c[1]):.4f}) size {s_:.4f}")
    return 0


def cmd_selftest(args):
    """Fast end-to-end consistency checks; exit 0 iff all pass."""
    import tempfile
    from . import autodiff as ad
    from .diffusion import analytic_optimal_eps, ddpm_step, guided_epsilon
    from .properties import normalize_map, threshold_map
    from .rng import stream
    from .scenes import gen_scene, measure_object

    failures = []

    def check(name, ok):
        print(f"  {'ok' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(0)

    flags = make_guidance_schedule(1024)
    check("guidance schedule 1024 = 192 on, 32 off, 800 alternating",
          flags[:192].all() and not flags[-32:].any()
          and np.array_equal(flags[192:-32:2], np.ones(400, bool)))

    e_c = rng.standard_normal((3, 8, 8))
    e_u = rng.standard_normal((3, 8, 8))
    g = rng.standard_normal((3, 8, 8))
    check("guided update degenerates to conditional at s=0, v=0",
          np.array_equal(guided_epsilon(e_c, e_u, 0.0, g, 0.0, 0.7), e_c))
    check("guided update degenerates to plain mixing at v=0",
          np.array_equal(guided_epsilon(e_c, e_u, 2.0, g, 0.0, 0.7),
                         3.0 * e_c - 2.0 * e_u))

    a = rng.random((16, 16))
    tm = threshold_map(ad.Tensor(a)).data
    check("soft threshold lands in [0,1]", tm.min() >= -1e-12 and tm.max() <= 1 + 1e-12)
    binary = (rng.random((16, 16)) > 0.5).astype(float)
    check("binary maps are threshold fixed points",
          np.array_equal(threshold_map(ad.Tensor(binary)).data, binary))
    nm = normalize_map(ad.Tensor(a)).data
    check("normalization hits exact endpoints",
          nm.min() == 0.0 and nm.max() == 1.0)

    x = ad.Tensor(rng.standard_normal((8, 8)), requires_grad=True)
    c = centroid(x, DEFAULT_CONFIG)
    proj = rng.standard_normal(2)
    (c * ad.Tensor(proj)).sum().backward()
    eps = 1e-6
    fd = np.zeros_like(x.data)
    for i in range(8):
        for j in range(8):
            xp = x.data.copy(); xp[i, j] += eps
            xm = x.data.copy(); xm[i, j] -= eps
            with no_grad():
                fp = float((centroid(ad.Tensor(xp), DEFAULT_CONFIG).data * proj).sum())
                fm = float((centroid(ad.Tensor(xm), DEFAULT_CONFIG).data * proj).sum())
            fd[i, j] = (fp - fm) / (2 * eps)
    rel = np.abs(fd - x.grad).max() / max(np.abs(fd).max(), 1e-12)
    check(f"centroid gradient matches finite differences (rel {rel:.2e})", rel < 1e-5)

    sched = make_schedule(64, "cosine")
    z = stream(11, "selftest").standard_normal(500)
    for t in range(64, 0, -1):
        eps_hat = analytic_optimal_eps(z, t, sched)
        noise = stream(11, "selftest-step", t).standard_normal(500) if t > 1 else None
        z = ddpm_step(z, eps_hat, t, sched, noise, clip_x0=False)
    check(f"scalar chain statistics near unit Gaussian "
          f"(mean {z.mean():+.3f}, var {z.var(ddof=1):.3f})",
          abs(z.mean()) < 0.15 and abs(z.var(ddof=1) - 1.0) < 0.2)

    ok = True
    for s in range(20):
        image, _, objs = gen_scene(s)
        for i, o in enumerate(objs):
            if o.occluded:
                continue
            cxy, _ = measure_object(image, o.color)
            ok &= math.hypot(cxy[0] - o.center[0], cxy[1] - o.center[1]) < 1.5 / 32
    check("scene measurement recovers generated centers", ok)

    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "t.sgdf")
        tensors = {"a": rng.standard_normal((4, 3)).astype(np.float32)}
        formats.write_checkpoint(p, tensors)
        r = formats.read_checkpoint(p)
        formats.write_checkpoint(p + "2", r)
        same = open(p, "rb").read() == open(p + "2", "rb").read()
        data = bytearray(open(p, "rb").read())
        data[-1] ^= 0xFF
        open(p, "wb").write(bytes(data))
        try:
            formats.read_checkpoint(p)
            caught = False
        except ValueError:
            caught = True
        check("checkpoint round trip byte-identical, corruption rejected",
              same and caught)
        pp = os.path.join(d, "b.ppm")
        formats.write_ppm(pp, -np.ones((3, 8, 8)))
        check("black PPM is header plus zero bytes",
              open(pp, "rb").read() == b"P6\n8 8\n255\n" + b"\x00" * 192)

    print(f"{'all checks passed' if not failures else f'{len(failures)} check(s) FAILED'}")
    return 0 if not failures else 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="selfguide",
        description="Train, sample, and self-guide a toy text-conditional "
                    "diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {"train": cmd_train, "sample": cmd_sample, "edit": cmd_edit,
            "extract": cmd_extract, "eval-props": cmd_eval_props,
            "selftest": cmd_selftest}
    for name in cmds:
        p = sub.add_parser(name)
        if name != "selftest":
            p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--steps", type=int, default=None, help="step-count override")
        p.add_argument("--cfg-scale", type=float, default=None,
                       dest="cfg_scale", help="prompt-mixing strength override")
        p.add_argument("--sg-weight", type=float, default=None,
                       dest="sg_weight", help="energy-gradient weight override")
    args = parser.parse_args(argv)
    try:
        return cmds[args.command](args)
    except (ConfigError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
