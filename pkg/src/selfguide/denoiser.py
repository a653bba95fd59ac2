"""Conditional U-Net noise predictor with instrumented cross-attention.

The network runs at three resolutions (input 32, bottleneck 8) with one
cross-attention block per stage: two in the encoder, two around the
bottleneck, two in the decoder.  Every cross-attention stores its
softmax map (averaged over heads) when recording is requested, and two
designated activation maps serve as the appearance signal: the output
of the last cross-attention and the output of the last decoder
residual block before the prediction head, both at full resolution.

All parameters live in a flat name->Tensor dict so checkpointing and
the optimizer stay trivial.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import stream


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    vocab_size: int = 15
    seq_len: int = 8
    pad_id: int = 0
    token_dim: int = 64
    time_dim: int = 128
    widths: tuple = (32, 64, 96)
    attn_heads: int = 1
    # "mean" records one head-averaged map per layer; "per-head" records
    # every head's map as its own layer entry
    head_reduce: str = "mean"
    use_pos_emb: bool = True
    groups: int = 8
    sched_T: int = 256
    sched_kind: str = "cosine"
    dtype: str = "float32"

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class TokenSequence:
    """Fixed-length caption token ids; all-padding is the null sequence."""

    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self):
        return len(self.ids)


@dataclass
class ModelInternals:
    """Recorded cross-attention maps and designated activations.

    attn[i] has shape H_i x W_i x K (softmax over K at each site);
    acts[j] has shape H_j x W_j x D_j; layer_meta[i] is a
    (position, resolution, index) tag per attention entry.
    """

    attn: list = field(default_factory=list)
    acts: list = field(default_factory=list)
    layer_meta: list = field(default_factory=list)

    def detached(self):
        """Graph-free float32 copy for storage as an edit source."""
        out = ModelInternals(layer_meta=list(self.layer_meta))
        out.attn = [Tensor(np.asarray(a.data, dtype=np.float32).copy()) for a in self.attn]
        out.acts = [Tensor(np.asarray(a.data, dtype=np.float32).copy()) for a in self.acts]
        return out


def sinusoidal_embedding(ts, dim):
    """Standard transformer-style timestep features, shape (N, dim)."""
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = ts[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


_group_norm = ad.group_norm


class Denoiser:
    def __init__(self, config=None, params=None, seed=0):
        self.config = config or ModelConfig()
        self.params = params if params is not None else self._init_params(seed)

    # -- parameters ---------------------------------------------------------

    def _init_params(self, seed):
        cfg = self.config
        dt = cfg.np_dtype()
        p = {}

        def norm(name, shape, scale):
            p[name] = Tensor((stream(seed, "init", name).standard_normal(shape) * scale).astype(dt))

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape, dtype=dt))

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape, dtype=dt))

        e = cfg.token_dim
        norm("tok_emb", (cfg.vocab_size, e), 0.05)
        zeros("pos_emb", (cfg.seq_len, e))
        tm = cfg.time_dim
        norm("time1_w", (e, tm), 1.0 / math.sqrt(e))
        zeros("time1_b", (tm,))
        norm("time2_w", (tm, tm), 1.0 / math.sqrt(tm))
        zeros("time2_b", (tm,))

        def conv(name, cout, cin, k, zero=False):
            if zero:
                zeros(f"{name}_w", (k, k, cin, cout))
            else:
                norm(f"{name}_w", (k, k, cin, cout), math.sqrt(2.0 / (cin * k * k)))
            zeros(f"{name}_b", (cout,))

        def resblock(name, cin, cout):
            ones(f"{name}_gn1_g", (cin,))
            zeros(f"{name}_gn1_b", (cin,))
            conv(f"{name}_conv1", cout, cin, 3)
            norm(f"{name}_time_w", (tm, cout), 1.0 / math.sqrt(tm))
            zeros(f"{name}_time_b", (cout,))
            ones(f"{name}_gn2_g", (cout,))
            zeros(f"{name}_gn2_b", (cout,))
            conv(f"{name}_conv2", cout, cout, 3, zero=True)
            if cin != cout:
                conv(f"{name}_skip", cout, cin, 1)

        def xattn(name, c):
            ones(f"{name}_gn_g", (c,))
            zeros(f"{name}_gn_b", (c,))
            norm(f"{name}_q_w", (c, c), 1.0 / math.sqrt(c))
            norm(f"{name}_k_w", (e, c), 1.0 / math.sqrt(e))
            norm(f"{name}_v_w", (e, c), 1.0 / math.sqrt(e))
            zeros(f"{name}_o_w", (c, c))
            zeros(f"{name}_o_b", (c,))

        c1, c2, c3 = cfg.widths
        conv("conv_in", c1, cfg.channels, 3)
        resblock("enc32", c1, c1)
        xattn("enc32_xa", c1)
        resblock("enc16", c1, c2)
        xattn("enc16_xa", c2)
        resblock("mid8a", c2, c3)
        xattn("mid8a_xa", c3)
        resblock("mid8b", c3, c3)
        xattn("mid8b_xa", c3)
        conv("up16", c2, c3, 1)
        resblock("dec16", 2 * c2, c2)
        xattn("dec16_xa", c2)
        conv("up32", c1, c2, 1)
        resblock("dec32", 2 * c1, c1)
        xattn("dec32_xa", c1)
        resblock("dec32b", c1, c1)
        ones("out_gn_g", (c1,))
        zeros("out_gn_b", (c1,))
        conv("conv_out", cfg.channels, c1, 3, zero=True)
        return p

    def parameters(self):
        return self.params

    def set_requires_grad(self, flag):
        for t in self.params.values():
            t.requires_grad = flag
            t._parents = ()
            t._vjp = None

    def astype(self, dtype):
        for k, t in self.params.items():
            self.params[k] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
        self.config.dtype = "float64" if dtype == np.float64 else "float32"
        return self

    def null_tokens(self):
        return np.full(self.config.seq_len, self.config.pad_id, dtype=np.int64)

    # -- forward ------------------------------------------------------------

    def embed_tokens(self, tokens):
        """Token embedding lookup plus learned positional offset, (K, E)."""
        ids = tokens.ids if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or len(ids) != self.config.seq_len:
            raise ValueError(f"token sequence must have length {self.config.seq_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary")
        emb = self.params["tok_emb"][ids]
        if self.config.use_pos_emb:
            emb = emb + self.params["pos_emb"]
        return emb

    def _embed_batch(self, tok_ids):
        emb = self.params["tok_emb"][tok_ids]  # (N, K, E)
        if self.config.use_pos_emb:
            emb = emb + self.params["pos_emb"]
        return emb

    def _resblock(self, name, x, time_h, cin, cout):
        p = self.params
        h = _group_norm(x, p[f"{name}_gn1_g"], p[f"{name}_gn1_b"], self.config.groups)
        h = ad.conv2d(ad.silu(h), p[f"{name}_conv1_w"], p[f"{name}_conv1_b"], pad=1)
        tb = time_h @ p[f"{name}_time_w"] + p[f"{name}_time_b"]
        n, c = tb.shape
        h = h + tb.reshape(n, 1, 1, c)
        h = _group_norm(h, p[f"{name}_gn2_g"], p[f"{name}_gn2_b"], self.config.groups)
        h = ad.conv2d(ad.silu(h), p[f"{name}_conv2_w"], p[f"{name}_conv2_b"], pad=1)
        if cin != cout:
            x = ad.conv2d(x, p[f"{name}_skip_w"], p[f"{name}_skip_b"], pad=0)
        return x + h

    def _xattn(self, name, x, ctx, sink):
        """Cross-attention block; appends (A, out_map) to sink if recording.

        ctx: (N, K, E) token embeddings.  Returns x + projected values.
        """
        p = self.params
        cfg = self.config
        n, h, w, c = x.shape
        nh = cfg.attn_heads
        dh = c // nh
        xs = _group_norm(x, p[f"{name}_gn_g"], p[f"{name}_gn_b"], cfg.groups)
        xf = xs.reshape(n, h * w, c)
        q = xf @ p[f"{name}_q_w"]
        k = ctx @ p[f"{name}_k_w"]
        v = ctx @ p[f"{name}_v_w"]
        kk = k.shape[1]
        if nh > 1:
            q = q.reshape(n, h * w, nh, dh).transpose(0, 2, 1, 3)
            k = k.reshape(n, kk, nh, dh).transpose(0, 2, 1, 3)
            v = v.reshape(n, kk, nh, dh).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        out = attn @ v
        if nh > 1:
            out = out.transpose(0, 2, 1, 3).reshape(n, h * w, c)
        out = out @ p[f"{name}_o_w"] + p[f"{name}_o_b"]
        if sink is not None:
            if nh == 1:
                maps = [attn.reshape(h, w, kk)]
            elif cfg.head_reduce == "mean":
                maps = [attn.mean(axis=1).reshape(h, w, kk)]
            else:
                maps = [attn[0, hd].reshape(h, w, kk) for hd in range(nh)]
            sink.append((maps, out.reshape(h, w, c)))
        return x + out.reshape(n, h, w, c)

    def forward_batch(self, z, ts, tok_ids, sink=None):
        """Noise prediction for a batch, (N,C,H,W) -> (N,C,H,W).

        Internally channels-last; the input/output transposes live here.
        """
        p = self.params
        cfg = self.config
        dt = cfg.np_dtype()
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=dt))
        n = z.shape[0]
        ctx = self._embed_batch(np.asarray(tok_ids, dtype=np.int64).reshape(n, -1))
        temb = Tensor(sinusoidal_embedding(ts, cfg.token_dim).astype(dt))
        th = ad.silu(temb @ p["time1_w"] + p["time1_b"])
        th = ad.silu(th @ p["time2_w"] + p["time2_b"])
        c1, c2, c3 = cfg.widths

        x = ad.conv2d(z.transpose(0, 2, 3, 1), p["conv_in_w"], p["conv_in_b"], pad=1)
        x = self._resblock("enc32", x, th, c1, c1)
        x = self._xattn("enc32_xa", x, ctx, sink)
        skip32 = x
        x = ad.avg_pool2(x)
        x = self._resblock("enc16", x, th, c1, c2)
        x = self._xattn("enc16_xa", x, ctx, sink)
        skip16 = x
        x = ad.avg_pool2(x)
        x = self._resblock("mid8a", x, th, c2, c3)
        x = self._xattn("mid8a_xa", x, ctx, sink)
        x = self._resblock("mid8b", x, th, c3, c3)
        x = self._xattn("mid8b_xa", x, ctx, sink)
        x = ad.conv2d(ad.upsample_nearest2(x), p["up16_w"], p["up16_b"], pad=0)
        x = ad.concatenate([x, skip16], axis=-1)
        x = self._resblock("dec16", x, th, 2 * c2, c2)
        x = self._xattn("dec16_xa", x, ctx, sink)
        x = ad.conv2d(ad.upsample_nearest2(x), p["up32_w"], p["up32_b"], pad=0)
        x = ad.concatenate([x, skip32], axis=-1)
        x = self._resblock("dec32", x, th, 2 * c1, c1)
        x = self._xattn("dec32_xa", x, ctx, sink)
        x = self._resblock("dec32b", x, th, c1, c1)
        penult = x
        x = _group_norm(x, p["out_gn_g"], p["out_gn_b"], cfg.groups)
        x = ad.conv2d(ad.silu(x), p["conv_out_w"], p["conv_out_b"], pad=1)
        if sink is not None:
            sink.append(penult)
        return x.transpose(0, 3, 1, 2)

    _META = (("encoder", 32), ("encoder", 16), ("bottleneck", 8),
             ("bottleneck", 8), ("decoder", 16), ("decoder", 32))

    def forward(self, z_t, t, tokens, record=False):
        """Single-sample noise prediction.

        z_t: (C,H,W) Tensor or array; tokens: TokenSequence or id array.
        Returns (eps_hat, internals) where internals is None unless
        `record`.  Recording is passive: the prediction is bit-identical
        either way.  When differentiation is enabled the recorded
        tensors stay attached to the graph, so energies on them
        backpropagate to z_t.
        """
        cfg = self.config
        ids = tokens.ids if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.int64)
        if len(ids) != cfg.seq_len:
            raise ValueError(f"token sequence must have length {cfg.seq_len}")
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=cfg.np_dtype()))
        expect = (cfg.channels, cfg.image_size, cfg.image_size)
        if z.shape != expect:
            raise ValueError(f"z_t shape {z.shape} does not match model {expect}")
        sink = [] if record else None
        out = self.forward_batch(z.reshape(1, *expect), np.array([t]), ids.reshape(1, -1), sink=sink)
        eps = out.reshape(*expect)
        if not record:
            return eps, None
        internals = ModelInternals()
        scale = cfg.image_size / 32
        for li, (maps, _) in enumerate(sink[:-1]):
            pos, res = self._META[li]
            for m in maps:
                internals.attn.append(m)
                internals.layer_meta.append((pos, int(res * scale), li))
        final_xa_out = sink[-2][1]
        penult = sink[-1]
        internals.acts = [penult.reshape(*penult.shape[1:]), final_xa_out]
        return eps, internals
