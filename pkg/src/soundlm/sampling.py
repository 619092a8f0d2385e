"""Autoregressive decoding: greedy text, guided top-k audio.

Audio decoding runs two incremental passes per step -- one conditioned on
the prompt, one on the null-condition token -- and mixes the per-head
distributions in probability space:

    mixed = lam * p_cond + (1 - lam) * p_uncond

with negative mass clamped to zero and the rest renormalized (lam = 1
returns the conditional distribution untouched). A logit-space variant is
available behind ``SamplerParams.logit_space`` for comparison. Guidance is
applied to audio steps only; text decoding is always greedy.

The audio stream is laid out in the delay pattern: at step s only slots n
with 0 <= s - n < target frames are sampled, the rest are structural PAD,
so a completed stream always satisfies the delay-pattern invariant. Decoding
stops after the target frame count, or early when the text head predicts
the end-of-audio token once at least one frame is complete.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GenerationOverflow
from .layout import PAD_SLOT, remove_delay
from .model import _softmax

__all__ = [
    "SamplerParams",
    "cfg_distribution",
    "cfg_distribution_logit_space",
    "temperature_rescale",
    "top_k_sample",
    "generate",
    "GenerationResult",
]


@dataclass
class SamplerParams:
    lam: float = 3.0
    top_k: int = 20
    temperature: float = 1.0
    max_frames: int = 64
    seed: int = 0
    logit_space: bool = False

    def __post_init__(self):
        if self.lam < 1.0:
            raise ConfigError("guidance weight must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")


def cfg_distribution(p_cond, p_uncond, lam, stats=None):
    """Guided interpolation of two distributions over the same support."""
    p_cond = np.asarray(p_cond, dtype=np.float64)
    if lam == 1.0:
        return p_cond.copy()
    mixed = lam * p_cond + (1.0 - lam) * np.asarray(p_uncond, dtype=np.float64)
    np.clip(mixed, 0.0, None, out=mixed)
    total = mixed.sum()
    if total <= 0.0:
        if stats is not None:
            stats["cfg_all_clamped"] = stats.get("cfg_all_clamped", 0) + 1
        return p_cond.copy()
    return mixed / total


def cfg_distribution_logit_space(p_cond, p_uncond, lam, floor=1e-12):
    """Alternative guidance: interpolate log-probabilities, then softmax."""
    z = lam * np.log(np.maximum(p_cond, floor)) + (1.0 - lam) * np.log(
        np.maximum(p_uncond, floor)
    )
    return _softmax(z)


def temperature_rescale(dist, temperature):
    if temperature == 1.0:
        return dist
    warmed = np.power(dist, 1.0 / temperature)
    return warmed / warmed.sum()


def top_k_sample(dist, k, rng):
    """Sample after zeroing all but the k largest probabilities.

    Ties at the cutoff keep the smaller token id (stable order on equal
    probability).
    """
    dist = np.asarray(dist, dtype=np.float64)
    if k < dist.size:
        order = np.argsort(-dist, kind="stable")[:k]
        trimmed = np.zeros_like(dist)
        trimmed[order] = dist[order]
    else:
        trimmed = dist.copy()
    trimmed /= trimmed.sum()
    return int(rng.choice(dist.size, p=trimmed))


@dataclass
class GenerationResult:
    text_ids: list = field(default_factory=list)
    steps: np.ndarray | None = None     # (S, n_q) sampled step matrix
    grid: np.ndarray | None = None      # (n_q, T) recovered token grid
    finish_reason: str = ""
    stats: dict = field(default_factory=dict)


def _normalize_prompt(prompt):
    """Accept a flat id list or a list of (kind, payload) elements where
    kind is "text" (ids), "steps" (slot rows), or "frames" (audio input)."""
    if len(prompt) and isinstance(prompt[0], tuple):
        return prompt
    return [("text", list(prompt))]


def _run_prompt(model, prompt):
    state = model.start_decode()
    h = None
    for kind, payload in _normalize_prompt(prompt):
        if kind == "text":
            for tok in payload:
                h = state.step_token(int(tok))
        elif kind == "steps":
            for row in payload:
                h = state.step_slots(np.asarray(row))
        elif kind == "frames":
            for emb in model.encode_audio(payload):
                h = state.step(emb)
        else:
            raise ConfigError(f"unknown prompt element kind {kind!r}")
    return state, h


def generate(model, prompt_ids, mode, params, uncond_prompt_ids=None, stop_ids=None,
             max_new_tokens=None):
    """Decode from a prompt. ``mode`` is "text" or "audio".

    Text mode decodes greedily until EOS (or a stop id). Audio mode needs
    ``uncond_prompt_ids`` for the guidance pass unless lam == 1. Prompts
    are id lists or mixed element lists (see ``_normalize_prompt``).
    """
    vocab = model.vocab
    if mode == "text":
        return _generate_text(model, prompt_ids, stop_ids or {vocab.EOS}, max_new_tokens)
    if mode != "audio":
        raise ConfigError(f"unknown generation mode {mode!r}")
    return _generate_audio(model, prompt_ids, uncond_prompt_ids, params)


def _generate_text(model, prompt_ids, stop_ids, max_new_tokens=None):
    state, h = _run_prompt(model, prompt_ids)
    out = []
    while True:
        if state.pos >= model.cfg.context:
            raise GenerationOverflow(
                "context exhausted during text generation",
                GenerationResult(text_ids=out, finish_reason="overflow"),
            )
        tok = int(np.argmax(state.text_logits(h)))
        out.append(tok)
        if tok in stop_ids:
            return GenerationResult(text_ids=out, finish_reason="stop")
        if max_new_tokens is not None and len(out) >= max_new_tokens:
            return GenerationResult(text_ids=out, finish_reason="length")
        h = state.step_token(tok)


def _generate_audio(model, prompt_ids, uncond_prompt_ids, params):
    cfg = model.cfg
    vocab = model.vocab
    n_q = cfg.n_q
    rng = np.random.default_rng(params.seed)
    stats = {}
    dual = params.lam != 1.0
    if dual and uncond_prompt_ids is None:
        raise ConfigError("guided audio decoding needs an unconditional prompt")
    state_c, h_c = _run_prompt(model, prompt_ids)
    state_u, h_u = (None, None)
    if dual:
        state_u, h_u = _run_prompt(model, uncond_prompt_ids)
    t_target = params.max_frames
    total_steps = t_target + n_q - 1
    steps = []
    finish = "max_frames"
    for s in range(total_steps):
        if state_c.pos >= cfg.context or (dual and state_u.pos >= cfg.context):
            raise GenerationOverflow(
                "context exhausted during audio generation",
                _finish_audio(steps, n_q, "overflow", stats),
            )
        if s >= n_q and int(np.argmax(state_c.text_logits(h_c))) == vocab.EOA:
            finish = "eoa"
            break
        slot = np.full(n_q, PAD_SLOT, dtype=np.int64)
        for n in range(n_q):
            frame = s - n
            if not 0 <= frame < t_target:
                continue
            p_c = _softmax(state_c.audio_logits(h_c, n))
            if dual:
                p_u = _softmax(state_u.audio_logits(h_u, n))
                if params.logit_space:
                    dist = cfg_distribution_logit_space(p_c, p_u, params.lam)
                else:
                    dist = cfg_distribution(p_c, p_u, params.lam, stats)
            else:
                dist = p_c
            dist = temperature_rescale(dist, params.temperature)
            slot[n] = top_k_sample(dist, params.top_k, rng)
        steps.append(slot)
        h_c = state_c.step_slots(slot)
        if dual:
            h_u = state_u.step_slots(slot)
    return _finish_audio(steps, n_q, finish, stats)


def _finish_audio(steps, n_q, finish, stats):
    if not steps:
        return GenerationResult(steps=None, grid=None, finish_reason=finish, stats=stats)
    steps = np.stack(steps, axis=0)
    s = steps.shape[0]
    t = s - n_q + 1
    if t < 1:
        return GenerationResult(steps=steps, grid=None, finish_reason=finish, stats=stats)
    if finish in ("max_frames",):
        grid = remove_delay(steps)
    else:
        # early stop: keep the first t frames, drop slots sampled beyond them
        grid = np.empty((n_q, t), dtype=np.int64)
        for n in range(n_q):
            grid[n] = steps[n : n + t, n]
    return GenerationResult(steps=steps, grid=grid, finish_reason=finish, stats=stats)
