"""Tiny decoder-only transformer with a unified vocabulary and parallel
audio-codebook heads, written in numpy with hand-derived backward passes.

Design points:

* pre-norm blocks, RMSNorm, rotary positions, GELU MLP, no biases in the
  transformer trunk;
* one embedding table covering text ids and all per-stage audio ids; an
  audio step embeds as the sum of its non-PAD slot embeddings;
* one text head (text vocabulary incl. specials) plus ``n_q`` audio heads
  of ``K`` logits each;
* attention is causal and segment-isolated: positions never attend across
  packed documents, and rotary positions restart at each document, so a
  document's hidden states are bit-identical packed or alone;
* a continuous audio-input path: strided-conv encoder at half the frame
  rate followed by a single affine+GELU adapter.

Gradients flow to the adapter always and to the encoder only when
``encoder_frozen`` is False. Parameter groups (backbone / embeddings /
encoder / adapter) drive stage freezing in the trainer.
"""

import hashlib
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import fileio
from .errors import ConfigError, InputError
from .kernels import gelu_bwd, gelu_fwd
from .layout import KIND_AUDIO_STEP, KIND_TEXT, PAD_SLOT

_GELU_C = float(np.sqrt(2.0 / np.pi))
_RMS_EPS = 1e-8
_MASK_NEG = -1e30


@dataclass
class ModelConfig:
    layers: int = 2
    dim: int = 128
    heads: int = 4
    ff: int = 512
    context: int = 1024
    n_q: int = 8
    codebook_size: int = 64
    rope: bool = True
    frame_dim: int = 16
    enc_dim: int = 64
    dtype: str = "float64"

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError("dim must be divisible by heads")
        if (self.dim // self.heads) % 2 != 0:
            raise ConfigError("head dim must be even for rotary positions")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _scatter_rows(target, idx, rows):
    """target[idx] += rows without ufunc.at (bincount is much faster)."""
    if len(idx) == 0:
        return
    d = target.shape[1]
    flat_idx = (np.asarray(idx, dtype=np.int64)[:, None] * d + np.arange(d)[None, :]).ravel()
    acc = np.bincount(flat_idx, weights=rows.ravel(), minlength=target.size)
    target += acc.reshape(target.shape).astype(target.dtype)


def _rmsnorm(x, g):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _RMS_EPS)
    xn = x / r
    return xn * g, (xn, r)


def _rmsnorm_backward(dy, g, cache):
    xn, r = cache
    dxn = dy * g
    dg = np.sum(dy * xn, axis=0)
    dx = (dxn - xn * np.mean(dxn * xn, axis=-1, keepdims=True)) / r
    return dx, dg


def _rope_tables(positions, head_dim, dtype):
    half = head_dim // 2
    inv = (10000.0 ** (-np.arange(half, dtype=np.float64) / half)).astype(dtype)
    ang = np.asarray(positions, dtype=dtype)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def _rope_apply(x, cos, sin):
    # x: (H, L, dh); rotate (first half, second half) pairs
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _rope_unapply(d, cos, sin):
    half = d.shape[-1] // 2
    d1, d2 = d[..., :half], d[..., half:]
    return np.concatenate([d1 * cos + d2 * sin, -d1 * sin + d2 * cos], axis=-1)


def _softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax(z):
    m = np.max(z, axis=-1, keepdims=True)
    z = z - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


@dataclass
class TargetPlan:
    """Flat view of every supervised target in a pack."""

    text_rows: np.ndarray      # hidden rows whose text-head output is scored
    text_labels: np.ndarray
    text_samples: np.ndarray   # sample index within the pack
    audio_rows: list           # per stage: hidden rows
    audio_labels: list
    audio_samples: list
    n_text: int
    n_slots: int

    @property
    def weight_total(self):
        return float(self.n_text) + float(self.n_slots) / max(1, len(self.audio_rows))


def build_target_plan(pack, n_q):
    kinds, out = pack.kinds, pack.out_mask
    sample_of = np.zeros(len(pack), dtype=np.int64)
    for si, (a, b) in enumerate(pack.sample_spans):
        sample_of[a:b] = si
    pos = np.arange(len(pack))
    is_first = np.zeros(len(pack), dtype=bool)
    for a, _ in pack.sample_spans:
        is_first[a] = True
    target = out & (pos > 0) & ~is_first  # first position of a doc has no context
    tpos = pos[target & (kinds == KIND_TEXT)]
    apos = pos[target & (kinds == KIND_AUDIO_STEP)]
    audio_rows, audio_labels, audio_samples = [], [], []
    n_slots = 0
    for n in range(n_q):
        lab = pack.slots[apos, n]
        keep = lab != PAD_SLOT
        audio_rows.append(apos[keep] - 1)
        audio_labels.append(lab[keep].astype(np.int64))
        audio_samples.append(sample_of[apos[keep]])
        n_slots += int(np.sum(keep))
    return TargetPlan(
        text_rows=tpos - 1,
        text_labels=pack.tokens[tpos].astype(np.int64),
        text_samples=sample_of[tpos],
        audio_rows=audio_rows,
        audio_labels=audio_labels,
        audio_samples=audio_samples,
        n_text=len(tpos),
        n_slots=n_slots,
    )


class Model:
    def __init__(self, cfg, vocab, seed=0):
        if vocab.n_q != cfg.n_q or vocab.codebook_size != cfg.codebook_size:
            raise ConfigError("vocabulary and model quantizer geometry differ")
        self.cfg = cfg
        self.vocab = vocab
        self.encoder_frozen = True
        self.params = self._init_params(np.random.default_rng(seed))

    # ---------------------------------------------------------------- setup

    def _init_params(self, rng):
        cfg = self.cfg
        dt = cfg.np_dtype
        scale = 0.02
        out_scale = scale / np.sqrt(2.0 * cfg.layers)

        def normal(*shape, s=scale):
            return (rng.standard_normal(shape) * s).astype(dt)

        p = {"embed": normal(self.vocab.size, cfg.dim)}
        for i in range(cfg.layers):
            p[f"layers.{i}.attn.wq"] = normal(cfg.dim, cfg.dim)
            p[f"layers.{i}.attn.wk"] = normal(cfg.dim, cfg.dim)
            p[f"layers.{i}.attn.wv"] = normal(cfg.dim, cfg.dim)
            p[f"layers.{i}.attn.wo"] = normal(cfg.dim, cfg.dim, s=out_scale)
            p[f"layers.{i}.norm1.g"] = np.ones(cfg.dim, dtype=dt)
            p[f"layers.{i}.norm2.g"] = np.ones(cfg.dim, dtype=dt)
            p[f"layers.{i}.mlp.w1"] = normal(cfg.dim, cfg.ff)
            p[f"layers.{i}.mlp.w2"] = normal(cfg.ff, cfg.dim, s=out_scale)
        p["final_norm.g"] = np.ones(cfg.dim, dtype=dt)
        p["text_head"] = normal(cfg.dim, self.vocab.text_size)
        for n in range(cfg.n_q):
            p[f"audio_head.{n}"] = normal(cfg.dim, cfg.codebook_size)
        p["enc.conv.w"] = normal(2 * cfg.frame_dim, cfg.enc_dim)
        p["enc.conv.b"] = np.zeros(cfg.enc_dim, dtype=dt)
        p["enc.mlp.w"] = normal(cfg.enc_dim, cfg.enc_dim)
        p["enc.mlp.b"] = np.zeros(cfg.enc_dim, dtype=dt)
        p["adapter.w"] = normal(cfg.enc_dim, cfg.dim)
        p["adapter.b"] = np.zeros(cfg.dim, dtype=dt)
        return p

    @staticmethod
    def param_group(name):
        if name.startswith("enc."):
            return "encoder"
        if name.startswith("adapter."):
            return "adapter"
        if name == "embed" or name.startswith("audio_head."):
            return "embeddings"
        return "backbone"

    def group_names(self):
        return sorted({self.param_group(n) for n in self.params})

    def clone(self):
        other = Model.__new__(Model)
        other.cfg = self.cfg
        other.vocab = self.vocab
        other.encoder_frozen = self.encoder_frozen
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def param_checksum(self, group=None):
        h = hashlib.sha256()
        for name in sorted(self.params):
            if group is None or self.param_group(name) == group:
                h.update(name.encode())
                h.update(self.params[name].tobytes())
        return h.hexdigest()

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # ------------------------------------------------------------ embedding

    def embed_step(self, step):
        """Model-dim vector for one position: a text id or n_q audio slots."""
        E = self.params["embed"]
        if np.isscalar(step) or getattr(step, "ndim", 1) == 0:
            tok = int(step)
            if not 0 <= tok < self.vocab.text_size:
                raise InputError(f"unknown text token id {tok}")
            return E[tok].copy()
        slots = np.asarray(step)
        if slots.shape != (self.cfg.n_q,):
            raise InputError("audio step must carry n_q slots")
        out = np.zeros(self.cfg.dim, dtype=self.cfg.np_dtype)
        for n, code in enumerate(slots):
            if code == PAD_SLOT:
                continue
            out += E[self.vocab.audio_id(n, int(code))]
        return out

    def encode_audio(self, frames, with_cache=False):
        """Adapter embeddings for a frame grid, one row per two frames."""
        frames = np.asarray(frames, dtype=self.cfg.np_dtype)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise InputError("audio input needs at least one frame")
        if frames.shape[1] != self.cfg.frame_dim:
            raise InputError("audio input frame dimension mismatch")
        t = frames.shape[0]
        if t % 2:
            frames = np.vstack([frames, np.zeros((1, frames.shape[1]), dtype=frames.dtype)])
        u = frames.reshape(-1, 2 * self.cfg.frame_dim)
        z1 = u @ self.params["enc.conv.w"] + self.params["enc.conv.b"]
        h1, t1 = gelu_fwd(z1)
        z2 = h1 @ self.params["enc.mlp.w"] + self.params["enc.mlp.b"]
        h2, t2 = gelu_fwd(z2)
        z3 = h2 @ self.params["adapter.w"] + self.params["adapter.b"]
        a, t3 = gelu_fwd(z3)
        if with_cache:
            return a, (u, z1, t1, h1, z2, t2, h2, z3, t3)
        return a

    def _encode_audio_backward(self, da, cache, grads):
        u, z1, t1, h1, z2, t2, h2, z3, t3 = cache
        dz3 = gelu_bwd(z3, t3, da)
        grads["adapter.w"] += h2.T @ dz3
        grads["adapter.b"] += dz3.sum(axis=0)
        if self.encoder_frozen:
            return
        dh2 = dz3 @ self.params["adapter.w"].T
        dz2 = gelu_bwd(z2, t2, dh2)
        grads["enc.mlp.w"] += h1.T @ dz2
        grads["enc.mlp.b"] += dz2.sum(axis=0)
        dh1 = dz2 @ self.params["enc.mlp.w"].T
        dz1 = gelu_bwd(z1, t1, dh1)
        grads["enc.conv.w"] += u.T @ dz1
        grads["enc.conv.b"] += dz1.sum(axis=0)

    def _embed_pack(self, pack):
        cfg, vocab = self.cfg, self.vocab
        E = self.params["embed"]
        L = len(pack)
        x = np.zeros((L, cfg.dim), dtype=cfg.np_dtype)
        text_pos = np.flatnonzero(pack.kinds == KIND_TEXT)
        x[text_pos] = E[pack.tokens[text_pos]]
        astep_pos = np.flatnonzero(pack.kinds == KIND_AUDIO_STEP)
        slot_rows = []  # (position, embedding row) pairs for backward
        for n in range(cfg.n_q):
            codes = pack.slots[astep_pos, n]
            keep = codes != PAD_SLOT
            rows = vocab.audio_base + n * cfg.codebook_size + codes[keep].astype(np.int64)
            x[astep_pos[keep]] += E[rows]
            slot_rows.append((astep_pos[keep], rows))
        enc_caches = []
        for pos, frames in pack.audio_inputs:
            a, cache = self.encode_audio(frames, with_cache=True)
            x[pos : pos + len(a)] = a
            enc_caches.append((pos, len(a), cache))
        return x, (text_pos, slot_rows, enc_caches)

    # -------------------------------------------------------------- forward

    def _positions(self, pack):
        pos = np.arange(len(pack), dtype=np.int64)
        for a, b in pack.sample_spans:
            pos[a:b] -= a
        return pos

    def forward(self, pack, keep_cache=True):
        cfg = self.cfg
        L = len(pack)
        if L > cfg.context:
            raise InputError(f"pack length {L} exceeds context {cfg.context}")
        x, embed_cache = self._embed_pack(pack)
        positions = self._positions(pack)
        dh = cfg.dim // cfg.heads
        if cfg.rope:
            cos, sin = _rope_tables(positions, dh, cfg.np_dtype)
        else:
            cos = sin = None
        seg = pack.segment_ids
        allowed = (seg[None, :] == seg[:, None]) & (
            np.arange(L)[None, :] <= np.arange(L)[:, None]
        )
        mask = np.where(allowed, 0.0, _MASK_NEG).astype(cfg.np_dtype)
        layer_caches = []
        for i in range(cfg.layers):
            x, cache = self._layer_forward(i, x, mask, cos, sin)
            layer_caches.append(cache)
        h, fin_cache = _rmsnorm(x, self.params["final_norm.g"])
        if not keep_cache:
            return h
        return {
            "h": h,
            "x_final": x,
            "fin": fin_cache,
            "layers": layer_caches,
            "embed": embed_cache,
            "mask": mask,
            "cos": cos,
            "sin": sin,
            "pack": pack,
        }

    def _split_heads(self, m):
        L = m.shape[0]
        return m.reshape(L, self.cfg.heads, -1).transpose(1, 0, 2)

    def _merge_heads(self, m):
        return m.transpose(1, 0, 2).reshape(m.shape[1], self.cfg.dim)

    def _layer_forward(self, i, x, mask, cos, sin):
        p = self.params
        scale = 1.0 / float(np.sqrt(self.cfg.dim // self.cfg.heads))
        a, n1_cache = _rmsnorm(x, p[f"layers.{i}.norm1.g"])
        q = self._split_heads(a @ p[f"layers.{i}.attn.wq"])
        k = self._split_heads(a @ p[f"layers.{i}.attn.wk"])
        v = self._split_heads(a @ p[f"layers.{i}.attn.wv"])
        if self.cfg.rope:
            qr = _rope_apply(q, cos, sin)
            kr = _rope_apply(k, cos, sin)
        else:
            qr, kr = q, k
        scores = qr @ kr.transpose(0, 2, 1) * scale + mask
        probs = _softmax(scores)
        ctx = probs @ v
        merged = self._merge_heads(ctx)
        o = merged @ p[f"layers.{i}.attn.wo"]
        x1 = x + o
        b, n2_cache = _rmsnorm(x1, p[f"layers.{i}.norm2.g"])
        u = b @ p[f"layers.{i}.mlp.w1"]
        m, mt = gelu_fwd(u)
        y = m @ p[f"layers.{i}.mlp.w2"]
        x2 = x1 + y
        return x2, (a, n1_cache, qr, kr, v, probs, merged, x1, b, n2_cache, u, m, mt)

    def _layer_backward(self, i, dx2, cache, mask, cos, sin, grads):
        p = self.params
        scale = 1.0 / float(np.sqrt(self.cfg.dim // self.cfg.heads))
        a, n1_cache, qr, kr, v, probs, merged, x1, b, n2_cache, u, m, mt = cache
        # mlp branch
        dy = dx2
        grads[f"layers.{i}.mlp.w2"] += m.T @ dy
        dm = dy @ p[f"layers.{i}.mlp.w2"].T
        du = gelu_bwd(u, mt, dm)
        grads[f"layers.{i}.mlp.w1"] += b.T @ du
        db = du @ p[f"layers.{i}.mlp.w1"].T
        dx1, dg2 = _rmsnorm_backward(db, p[f"layers.{i}.norm2.g"], n2_cache)
        grads[f"layers.{i}.norm2.g"] += dg2
        dx1 = dx1 + dx2
        # attention branch
        do = dx1
        grads[f"layers.{i}.attn.wo"] += merged.T @ do
        dmerged = do @ p[f"layers.{i}.attn.wo"].T
        dctx = self._split_heads(dmerged)
        dprobs = dctx @ v.transpose(0, 2, 1)
        dv = probs.transpose(0, 2, 1) @ dctx
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dscores *= scale
        dqr = dscores @ kr
        dkr = dscores.transpose(0, 2, 1) @ qr
        if self.cfg.rope:
            dq = _rope_unapply(dqr, cos, sin)
            dk = _rope_unapply(dkr, cos, sin)
        else:
            dq, dk = dqr, dkr
        dq = self._merge_heads(dq)
        dk = self._merge_heads(dk)
        dv = self._merge_heads(dv)
        grads[f"layers.{i}.attn.wq"] += a.T @ dq
        grads[f"layers.{i}.attn.wk"] += a.T @ dk
        grads[f"layers.{i}.attn.wv"] += a.T @ dv
        da = (
            dq @ p[f"layers.{i}.attn.wq"].T
            + dk @ p[f"layers.{i}.attn.wk"].T
            + dv @ p[f"layers.{i}.attn.wv"].T
        )
        dx, dg1 = _rmsnorm_backward(da, p[f"layers.{i}.norm1.g"], n1_cache)
        grads[f"layers.{i}.norm1.g"] += dg1
        return dx + dx1

    # ----------------------------------------------------- loss and backward

    def target_logprobs(self, cache, plan):
        """Log-probabilities of every target plus softmax caches for backward."""
        h = cache["h"]
        out = {"text": None, "audio": [], "text_probs": None, "audio_probs": []}
        if len(plan.text_rows):
            z = h[plan.text_rows] @ self.params["text_head"]
            lp = _log_softmax(z)
            out["text"] = lp[np.arange(len(z)), plan.text_labels]
            out["text_probs"] = np.exp(lp)
        else:
            out["text"] = np.zeros(0, dtype=h.dtype)
        for n in range(self.cfg.n_q):
            rows = plan.audio_rows[n]
            if len(rows):
                z = h[rows] @ self.params[f"audio_head.{n}"]
                lp = _log_softmax(z)
                out["audio"].append(lp[np.arange(len(z)), plan.audio_labels[n]])
                out["audio_probs"].append(np.exp(lp))
            else:
                out["audio"].append(np.zeros(0, dtype=h.dtype))
                out["audio_probs"].append(None)
        return out

    def backward_from_logprob_grads(self, cache, plan, logps, d_text, d_audio, grads=None):
        """Backprop given dLoss/dlogp for every target.

        ``d_text``: (n_text,), ``d_audio``: list per stage. Returns grads.
        """
        if grads is None:
            grads = self.zero_grads()
        h = cache["h"]
        dheads = np.zeros_like(h)
        if len(plan.text_rows):
            probs = logps["text_probs"]
            dz = probs * (-d_text[:, None])
            dz[np.arange(len(dz)), plan.text_labels] += d_text
            grads["text_head"] += h[plan.text_rows].T @ dz
            _scatter_rows(dheads, plan.text_rows, dz @ self.params["text_head"].T)
        for n in range(self.cfg.n_q):
            rows = plan.audio_rows[n]
            if not len(rows):
                continue
            probs = logps["audio_probs"][n]
            dn = d_audio[n]
            dz = probs * (-dn[:, None])
            dz[np.arange(len(dz)), plan.audio_labels[n]] += dn
            grads[f"audio_head.{n}"] += h[rows].T @ dz
            _scatter_rows(dheads, rows, dz @ self.params[f"audio_head.{n}"].T)
        self._trunk_backward(cache, dheads, grads)
        return grads

    def _trunk_backward(self, cache, dh, grads):
        dx, dgf = _rmsnorm_backward(dh, self.params["final_norm.g"], cache["fin"])
        grads["final_norm.g"] += dgf
        for i in reversed(range(self.cfg.layers)):
            dx = self._layer_backward(
                i, dx, cache["layers"][i], cache["mask"], cache["cos"], cache["sin"], grads
            )
        text_pos, slot_rows, enc_caches = cache["embed"]
        pack = cache["pack"]
        gE = grads["embed"]
        _scatter_rows(gE, pack.tokens[text_pos], dx[text_pos])
        for pos, rows in slot_rows:
            _scatter_rows(gE, rows, dx[pos])
        for pos, n_rows, enc_cache in enc_caches:
            self._encode_audio_backward(dx[pos : pos + n_rows], enc_cache, grads)

    def loss(self, packs, with_grads=False, grads=None):
        """Mean negative log-likelihood per effective token over packs.

        Returns (loss, parts) or (loss, parts, grads); ``parts`` maps task
        name to (weighted nll sum, weight sum).
        """
        if not isinstance(packs, (list, tuple)):
            packs = [packs]
        staged = []
        denom = 0.0
        for pack in packs:
            plan = build_target_plan(pack, self.cfg.n_q)
            denom += plan.n_text + plan.n_slots / self.cfg.n_q
            staged.append(plan)
        if denom <= 0:
            raise InputError("loss mask selects no output tokens")
        if grads is None and with_grads:
            grads = self.zero_grads()
        total = 0.0
        parts = {}
        for pack, plan in zip(packs, staged):
            cache = self.forward(pack)
            logps = self.target_logprobs(cache, plan)
            w_slot = 1.0 / self.cfg.n_q
            total -= float(np.sum(logps["text"]))
            for n in range(self.cfg.n_q):
                total -= w_slot * float(np.sum(logps["audio"][n]))
            self._accumulate_parts(parts, pack, plan, logps)
            if with_grads:
                d_text = np.full(plan.n_text, -1.0 / denom, dtype=cache["h"].dtype)
                d_audio = [
                    np.full(len(plan.audio_rows[n]), -w_slot / denom, dtype=cache["h"].dtype)
                    for n in range(self.cfg.n_q)
                ]
                self.backward_from_logprob_grads(cache, plan, logps, d_text, d_audio, grads)
        loss = total / denom
        if with_grads:
            return loss, parts, grads
        return loss, parts

    def _accumulate_parts(self, parts, pack, plan, logps):
        w_slot = 1.0 / self.cfg.n_q
        n_samples = len(pack.sample_ids)
        nll = np.zeros(n_samples)
        wsum = np.zeros(n_samples)
        if plan.n_text:
            np.add.at(nll, plan.text_samples, -logps["text"])
            np.add.at(wsum, plan.text_samples, 1.0)
        for n in range(self.cfg.n_q):
            if len(plan.audio_rows[n]):
                np.add.at(nll, plan.audio_samples[n], -w_slot * logps["audio"][n])
                np.add.at(wsum, plan.audio_samples[n], w_slot)
        for si, task in enumerate(pack.sample_tasks):
            s, w = parts.get(task, (0.0, 0.0))
            parts[task] = (s + float(nll[si]), w + float(wsum[si]))

    def logits(self, pack):
        """Per-position logits for every head (convenience view).

        Returns {"text": (L, text vocab), "audio": (n_q, L, K)}.
        """
        h = self.forward(pack, keep_cache=False)
        audio = np.stack(
            [h @ self.params[f"audio_head.{n}"] for n in range(self.cfg.n_q)], axis=0
        )
        return {"text": h @ self.params["text_head"], "audio": audio}

    def sequence_logprobs(self, pack):
        """Per-sample weighted log-probability (text 1, audio slot 1/n_q)."""
        plan = build_target_plan(pack, self.cfg.n_q)
        cache = self.forward(pack)
        logps = self.target_logprobs(cache, plan)
        out = np.zeros(len(pack.sample_ids))
        if plan.n_text:
            np.add.at(out, plan.text_samples, logps["text"])
        for n in range(self.cfg.n_q):
            if len(plan.audio_rows[n]):
                np.add.at(out, plan.audio_samples[n], logps["audio"][n] / self.cfg.n_q)
        return out, (plan, cache, logps)

    # ------------------------------------------------------------- decoding

    def start_decode(self):
        return _DecodeState(self)

    # ------------------------------------------------------------- persist

    def save(self, path):
        cfg_text = "\n".join(f"{k}={v}" for k, v in sorted(asdict(self.cfg).items()))
        with open(path, "wb") as f:
            f.write(fileio.CHECKPOINT_MAGIC)
            f.write(struct.pack("<H", fileio.VERSION))
            raw = cfg_text.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            fileio.write_named_tensors(f, self.params)

    @classmethod
    def load(cls, path, vocab=None):
        from .vocab import default_vocab

        with open(path, "rb") as f:
            if f.read(4) != fileio.CHECKPOINT_MAGIC:
                raise InputError(f"{path}: not a model checkpoint")
            (version,) = struct.unpack("<H", f.read(2))
            if version != fileio.VERSION:
                raise InputError(f"{path}: unsupported checkpoint version")
            (clen,) = struct.unpack("<I", f.read(4))
            raw = dict(
                line.split("=", 1) for line in f.read(clen).decode("utf-8").splitlines()
            )
            tensors = fileio.read_named_tensors(f)
        cfg = ModelConfig(
            layers=int(raw["layers"]),
            dim=int(raw["dim"]),
            heads=int(raw["heads"]),
            ff=int(raw["ff"]),
            context=int(raw["context"]),
            n_q=int(raw["n_q"]),
            codebook_size=int(raw["codebook_size"]),
            rope=raw["rope"] == "True",
            frame_dim=int(raw["frame_dim"]),
            enc_dim=int(raw["enc_dim"]),
            dtype=raw["dtype"],
        )
        if vocab is None:
            vocab = default_vocab(cfg.n_q, cfg.codebook_size)
        m = cls(cfg, vocab, seed=0)
        for name in m.params:
            if name not in tensors:
                raise InputError(f"{path}: missing tensor {name}")
            m.params[name] = tensors[name].astype(cfg.np_dtype).reshape(m.params[name].shape)
        return m


class _DecodeState:
    """Incremental single-document decoding with per-layer KV caches."""

    def __init__(self, model):
        self.model = model
        cfg = model.cfg
        self.pos = 0
        dh = cfg.dim // cfg.heads
        self.k = [
            np.zeros((cfg.heads, cfg.context, dh), dtype=cfg.np_dtype)
            for _ in range(cfg.layers)
        ]
        self.v = [
            np.zeros((cfg.heads, cfg.context, dh), dtype=cfg.np_dtype)
            for _ in range(cfg.layers)
        ]

    def step(self, embedding):
        """Feed one position's embedding; returns the final hidden state."""
        m = self.model
        cfg = m.cfg
        if self.pos >= cfg.context:
            raise InputError("decode past the context length")
        dh = cfg.dim // cfg.heads
        scale = 1.0 / float(np.sqrt(dh))
        if cfg.rope:
            cos, sin = _rope_tables([self.pos], dh, cfg.np_dtype)
        x = embedding.astype(cfg.np_dtype)[None, :]
        for i in range(cfg.layers):
            p = m.params
            a, _ = _rmsnorm(x, p[f"layers.{i}.norm1.g"])
            q = m._split_heads(a @ p[f"layers.{i}.attn.wq"])
            k = m._split_heads(a @ p[f"layers.{i}.attn.wk"])
            v = m._split_heads(a @ p[f"layers.{i}.attn.wv"])
            if cfg.rope:
                q = _rope_apply(q, cos, sin)
                k = _rope_apply(k, cos, sin)
            self.k[i][:, self.pos] = k[:, 0]
            self.v[i][:, self.pos] = v[:, 0]
            keys = self.k[i][:, : self.pos + 1]
            vals = self.v[i][:, : self.pos + 1]
            scores = (q @ keys.transpose(0, 2, 1)) * scale
            probs = _softmax(scores)
            ctx = probs @ vals
            o = m._merge_heads(ctx) @ p[f"layers.{i}.attn.wo"]
            x1 = x + o
            b, _ = _rmsnorm(x1, p[f"layers.{i}.norm2.g"])
            y = gelu(b @ p[f"layers.{i}.mlp.w1"]) @ p[f"layers.{i}.mlp.w2"]
            x = x1 + y
        h, _ = _rmsnorm(x, m.params["final_norm.g"])
        self.pos += 1
        return h[0]

    def step_token(self, token_id):
        return self.step(self.model.embed_step(token_id))

    def step_slots(self, slots):
        return self.step(self.model.embed_step(np.asarray(slots)))

    def text_logits(self, h):
        return h @ self.model.params["text_head"]

    def audio_logits(self, h, stage):
        return h @ self.model.params[f"audio_head.{stage}"]
