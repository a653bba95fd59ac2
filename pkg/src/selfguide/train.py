"""Denoiser training: Adam with warmup + cosine decay, EMA weights.

Every random draw comes from a counter-based stream keyed by (seed,
"train", step), so a run is a pure function of its config: the same
seed produces byte-identical checkpoints, and resuming from step k
replays exactly the steps a fresh run would have taken.  The scene
dataset is likewise keyed by scene index alone, independent of the
training seed.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import formats
from .autodiff import Tensor
from .denoiser import Denoiser, ModelConfig
from .diffusion import make_schedule, training_loss
from .rng import stream
from .scenes import gen_scene


@dataclass
class TrainConfig:
    steps: int = 2400
    batch_size: int = 16
    lr: float = 2e-3
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    p_uncond: float = 0.1
    ema_decay: float = 0.999
    dataset_size: int = 50000
    seed: int = 0
    log_every: int = 25


def lr_at(step, cfg):
    """1-based step -> learning rate: linear warmup then cosine to 0."""
    if step <= cfg.warmup:
        return cfg.lr * step / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    frac = min((step - cfg.warmup) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def scene_batch(cfg, step):
    """Scenes for 1-based step, consumed sequentially modulo the dataset."""
    base = (step - 1) * cfg.batch_size
    out = []
    for i in range(cfg.batch_size):
        image, tokens, _ = gen_scene((base + i) % cfg.dataset_size)
        out.append((image, tokens))
    return out


class EMA:
    """Exponential moving average of parameters, stored as raw arrays."""

    def __init__(self, params, decay):
        self.decay = decay
        self.shadow = {k: t.data.copy() for k, t in params.items()}

    def update(self, params):
        d = self.decay
        for k, t in params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * t.data

    def as_params(self):
        return {k: Tensor(v.copy()) for k, v in self.shadow.items()}


class Adam:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, params, grads, lr, t):
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + c.adam_eps)


def save_checkpoint(path, model, opt, ema, step):
    tensors = {"_meta/step": np.float32(step),
               "_meta/sched_T": np.float32(model.config.sched_T)}
    for k in sorted(model.params):
        tensors[f"param/{k}"] = model.params[k].data
    for k in sorted(opt.m):
        tensors[f"opt/m/{k}"] = opt.m[k]
        tensors[f"opt/v/{k}"] = opt.v[k]
    for k in sorted(ema.shadow):
        tensors[f"ema/{k}"] = ema.shadow[k]
    formats.write_checkpoint(path, tensors)


def load_model(path, model_config=None, weights="ema"):
    """Rebuild a Denoiser from a checkpoint; weights is "ema" or "raw"."""
    tensors = formats.read_checkpoint(path)
    cfg = model_config or ModelConfig()
    if "_meta/sched_T" in tensors and int(tensors["_meta/sched_T"]) != cfg.sched_T:
        raise ValueError("checkpoint schedule length does not match model config")
    prefix = "ema/" if weights == "ema" else "param/"
    params = {k[len(prefix):]: Tensor(v.copy())
              for k, v in tensors.items() if k.startswith(prefix)}
    if not params:
        raise ValueError(f"checkpoint has no {prefix} tensors")
    model = Denoiser(cfg, params=params)
    model.set_requires_grad(False)
    return model


def train(model_config=None, train_config=None, out_path=None,
          metrics_path=None, resume=None, progress=None):
    """Run the training loop; returns (model, ema, losses).

    resume: checkpoint path to continue from (step count, optimizer
    moments, EMA, and parameters are all restored, so the remaining
    steps reproduce an uninterrupted run bit for bit).
    """
    mcfg = model_config or ModelConfig()
    tcfg = train_config or TrainConfig()
    sched = make_schedule(mcfg.sched_T, mcfg.sched_kind)
    model = Denoiser(mcfg, seed=tcfg.seed)
    opt = Adam(model.params, tcfg)
    ema = EMA(model.params, tcfg.ema_decay)
    start_step = 0
    if resume is not None:
        tensors = formats.read_checkpoint(resume)
        start_step = int(tensors["_meta/step"])
        for k in model.params:
            model.params[k] = Tensor(tensors[f"param/{k}"].copy())
            opt.m[k] = tensors[f"opt/m/{k}"].copy()
            opt.v[k] = tensors[f"opt/v/{k}"].copy()
            ema.shadow[k] = tensors[f"ema/{k}"].copy()

    model.set_requires_grad(True)
    lines = ["step loss lr"]
    losses = []
    t_start = time.monotonic()
    for step in range(start_step + 1, tcfg.steps + 1):
        batch = scene_batch(tcfg, step)
        rng = stream(tcfg.seed, "train", step)
        loss = training_loss(model, batch, sched, rng, p_uncond=tcfg.p_uncond)
        for t in model.params.values():
            t.grad = None
        loss.backward()
        grads = {k: t.grad for k, t in model.params.items()}
        opt.step(model.params, grads, lr_at(step, tcfg), step)
        # optimizer wrote in place; drop stale graph edges before reuse
        model.set_requires_grad(True)
        ema.update(model.params)
        val = float(loss.data)
        losses.append(val)
        lines.append(f"{step} {val:.6f} {lr_at(step, tcfg):.8f}")
        if progress and (step % tcfg.log_every == 0 or step == start_step + 1):
            el = time.monotonic() - t_start
            done = step - start_step
            eta = el / done * (tcfg.steps - step)
            progress(f"step {step}/{tcfg.steps} loss {val:8.2f} "
                     f"lr {lr_at(step, tcfg):.5f} elapsed {el:6.1f}s eta {eta:6.1f}s")

    model.set_requires_grad(False)
    if out_path is not None:
        save_checkpoint(out_path, model, opt, ema, tcfg.steps)
    if metrics_path is not None:
        with open(metrics_path, "w") as f:
            f.write("\n".join(lines) + "\n")
    return model, ema, losses
