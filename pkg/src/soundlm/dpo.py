"""Preference optimization: pair construction, adaptation, DPO training.

The pairwise loss drives the policy/reference log-ratio margin through a
logistic link:

    loss = -log sigmoid(beta * ((lp_w - ref_w) - (lp_l - ref_l)))

Sequence log-probabilities sum output-token log-probs with the same
1/n_q audio-slot weighting as the training loss, so the cross-entropy
regularizer on winners and the DPO term see the same scale. The reference
model is a frozen snapshot taken after the adaptation stage.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .data import t2a_sample
from .errors import ConfigError, InputError
from .layout import pack
from .train import AdamW, StageConfig, clip_global_norm, run_stage


@dataclass
class DpoConfig:
    beta: float = 0.1
    ce_weight: float = 1.0
    candidates_per_prompt: int = 10
    adherence_gap: float = 0.15
    component_filter: bool = True
    adaptation_steps: int = 150
    lr: float = 1e-4
    pairs_per_step: int = 8
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.ce_weight < 0:
            raise ConfigError("ce_weight must be non-negative")


@dataclass
class PreferencePair:
    id: str
    prompt_text: str
    winner: np.ndarray          # (n_q, T) token grid
    loser: np.ndarray
    winner_scores: dict = field(default_factory=dict)
    loser_scores: dict = field(default_factory=dict)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def dpo_loss(lp_w, lp_l, ref_w, ref_l, beta):
    """Exact pairwise loss value for one preference pair."""
    margin = beta * ((lp_w - ref_w) - (lp_l - ref_l))
    return float(-np.log(_sigmoid(margin)))


def dpo_loss_grad(lp_w, lp_l, ref_w, ref_l, beta):
    """(d loss / d lp_w, d loss / d lp_l); reference terms are constants."""
    margin = beta * ((lp_w - ref_w) - (lp_l - ref_l))
    slope = _sigmoid(-margin)  # 1 - sigmoid(margin)
    return -beta * slope, beta * slope


def select_pairs(prompt_key, candidates, judge, cfg):
    """Winner/loser pair for one prompt, or None when the filters reject it.

    ``candidates``: list of (grid, frames); ``judge``: frames -> JudgeScores.
    Winner is the adherence argmax, loser the argmin (first on ties). The
    pair must clear the adherence gap and, when component filtering is on,
    every aesthetic sub-score of the winner must strictly exceed the
    loser's.
    """
    if len(candidates) < 2:
        raise InputError("need at least two candidates per prompt")
    scores = [judge(frames) for _, frames in candidates]
    adh = np.array([s.adherence for s in scores])
    w, l = int(np.argmax(adh)), int(np.argmin(adh))
    if adh[w] - adh[l] < cfg.adherence_gap:
        return None
    if cfg.component_filter and not all(
        a > b for a, b in zip(scores[w].aesthetics(), scores[l].aesthetics())
    ):
        return None
    if np.array_equal(candidates[w][0], candidates[l][0]):
        return None
    return PreferencePair(
        id=str(prompt_key),
        prompt_text=str(prompt_key),
        winner=np.asarray(candidates[w][0]),
        loser=np.asarray(candidates[l][0]),
        winner_scores={"adherence": float(adh[w])},
        loser_scores={"adherence": float(adh[l])},
    )


def pair_samples(vocab, n_q, pairs):
    """(winner samples, loser samples) in pair order."""
    winners = [
        t2a_sample(vocab, n_q, f"{p.id}_w", p.prompt_text, p.winner) for p in pairs
    ]
    losers = [
        t2a_sample(vocab, n_q, f"{p.id}_l", p.prompt_text, p.loser) for p in pairs
    ]
    return winners, losers


def _batched_seq_logprobs(model, samples, budget):
    """Per-sample sequence log-probs plus the backward handles."""
    packs = pack(samples, budget)
    order = {}
    handles = []
    values = np.zeros(len(samples))
    pos = {s.id: i for i, s in enumerate(samples)}
    for p in packs:
        lp, handle = model.sequence_logprobs(p)
        handles.append((p, handle))
        for sid, v in zip(p.sample_ids, lp):
            values[pos[sid]] = v
        order[id(p)] = [pos[sid] for sid in p.sample_ids]
    return values, handles, order


def _backward_coefs(model, handles, order, coef_per_sample, grads, extra_uniform=0.0):
    """Backprop d(loss)/d(sequence logp) through cached forward passes.

    ``extra_uniform`` adds a per-target coefficient shared by all samples
    (the CE-on-winners term, already divided by its denominator).
    """
    n_q = model.cfg.n_q
    for p, (plan, cache, logps) in handles:
        idxs = order[id(p)]
        c = np.asarray([coef_per_sample[i] for i in idxs])
        d_text = c[plan.text_samples] + extra_uniform if plan.n_text else np.zeros(0)
        d_audio = []
        for n in range(n_q):
            if len(plan.audio_rows[n]):
                # slot targets carry 1/n_q of both the sequence and CE terms
                d_audio.append((c[plan.audio_samples[n]] + extra_uniform) / n_q)
            else:
                d_audio.append(np.zeros(0))
        model.backward_from_logprob_grads(cache, plan, logps, d_text, d_audio, grads)


def combined_loss(pairs, model, ref, cfg, budget=256):
    """mean dpo_loss + ce_weight * CE(winners); value only."""
    vocab = model.vocab
    winners, losers = pair_samples(vocab, model.cfg.n_q, pairs)
    lp_w, _, _ = _batched_seq_logprobs(model, winners, budget)
    lp_l, _, _ = _batched_seq_logprobs(model, losers, budget)
    rf_w, _, _ = _batched_seq_logprobs(ref, winners, budget)
    rf_l, _, _ = _batched_seq_logprobs(ref, losers, budget)
    dpo = float(
        np.mean(
            [dpo_loss(a, b, c, d, cfg.beta) for a, b, c, d in zip(lp_w, lp_l, rf_w, rf_l)]
        )
    )
    if cfg.ce_weight == 0:
        return dpo
    denom = sum(s.effective_tokens() for s in winners)
    ce = float(-np.sum(lp_w) / denom)
    return dpo + cfg.ce_weight * ce


def divergence(model, ref, pairs, budget=256):
    """mean over pairs of lp_model(winner) - lp_ref(winner)."""
    winners, _ = pair_samples(model.vocab, model.cfg.n_q, pairs)
    lp, _, _ = _batched_seq_logprobs(model, winners, budget)
    rf, _, _ = _batched_seq_logprobs(ref, winners, budget)
    return float(np.mean(lp - rf))


def adapt(model, winner_samples, steps, lr=2e-4, seed=0, pack_budget=None):
    """Cross-entropy fine-tune on winners; returns the frozen reference."""
    if pack_budget is None:
        pack_budget = min(256, model.cfg.context)
    if steps > 0:
        if not winner_samples:
            raise InputError("adaptation needs winner samples")
        stage = StageConfig(
            name="adapt",
            total_steps=steps,
            peak_lr=lr,
            schedule="constant",
            warmup=min(20, steps // 5),
            tokens_per_batch=2048,
            pack_budget=pack_budget,
            frozen=("encoder",),
            seed=seed,
        )
        run_stage(model, {"winners": list(winner_samples)}, stage)
    return model.clone()


def dpo_train(model, ref, pairs, cfg, steps, budget=256):
    """DPO with the CE-on-winners regularizer; returns per-step log rows.

    Divergence from the reference is measured every ``cfg.eval_every``
    steps and on the final step.
    """
    if len(pairs) < 1:
        raise InputError("no preference pairs")
    vocab = model.vocab
    n_q = model.cfg.n_q
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params, weight_decay=0.0)
    skip = lambda name: model.param_group(name) == "encoder"
    rows = []
    ref_cache = {}
    for step in range(1, steps + 1):
        take = rng.choice(len(pairs), size=min(cfg.pairs_per_step, len(pairs)), replace=False)
        batch = [pairs[i] for i in take]
        winners, losers = pair_samples(vocab, n_q, batch)
        lp_w, hw, ow = _batched_seq_logprobs(model, winners, budget)
        lp_l, hl, ol = _batched_seq_logprobs(model, losers, budget)
        key = tuple(sorted(take))
        if key not in ref_cache:
            rw, _, _ = _batched_seq_logprobs(ref, winners, budget)
            rl, _, _ = _batched_seq_logprobs(ref, losers, budget)
            ref_cache[key] = (rw, rl)
        rf_w, rf_l = ref_cache[key]
        n = len(batch)
        margins = cfg.beta * ((lp_w - rf_w) - (lp_l - rf_l))
        loss_dpo = float(np.mean(-np.log(_sigmoid(margins))))
        slope = _sigmoid(-margins)
        coef_w = -cfg.beta * slope / n
        coef_l = cfg.beta * slope / n
        denom_w = sum(s.effective_tokens() for s in winners)
        ce = float(-np.sum(lp_w) / denom_w)
        extra = -cfg.ce_weight / denom_w
        grads = model.zero_grads()
        _backward_coefs(model, hw, ow, coef_w, grads, extra_uniform=extra)
        _backward_coefs(model, hl, ol, coef_l, grads)
        clip_global_norm(grads, 1.0, skip)
        opt.step(model.params, grads, cfg.lr, skip)
        row = {"step": step, "dpo_loss": loss_dpo, "ce_loss": ce,
               "loss": loss_dpo + cfg.ce_weight * ce}
        if step % cfg.eval_every == 0 or step == steps:
            row["divergence"] = divergence(model, ref, pairs[: min(64, len(pairs))], budget)
        rows.append(row)
    return rows


def write_pairs(path, pairs):
    with open(path, "w") as f:
        for p in pairs:
            f.write(
                json.dumps(
                    {
                        "id": p.id,
                        "prompt": p.prompt_text,
                        "winner": p.winner.tolist(),
                        "loser": p.loser.tolist(),
                        "scores": {"winner": p.winner_scores, "loser": p.loser_scores},
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_pairs(path):
    pairs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            pairs.append(
                PreferencePair(
                    id=rec["id"],
                    prompt_text=rec["prompt"],
                    winner=np.asarray(rec["winner"], dtype=np.int64),
                    loser=np.asarray(rec["loser"], dtype=np.int64),
                    winner_scores=rec.get("scores", {}).get("winner", {}),
                    loser_scores=rec.get("scores", {}).get("loser", {}),
                )
            )
    return pairs


def generate_candidates(model, prompt_text, books, n_candidates, max_frames,
                        sampler_kwargs=None, seed=0):
    """Sampled (grid, frames) candidates for one prompt."""
    from .data import prompt_ids, uncond_prompt_ids
    from .sampling import SamplerParams, generate

    kwargs = dict(lam=3.0, top_k=20)
    kwargs.update(sampler_kwargs or {})
    cond = prompt_ids(model.vocab, prompt_text, "audio")
    unc = uncond_prompt_ids(model.vocab, "audio")
    out = []
    for j in range(n_candidates):
        params = SamplerParams(max_frames=max_frames, seed=seed * 100_003 + j, **kwargs)
        res = generate(model, cond, "audio", params, uncond_prompt_ids=unc)
        if res.grid is None:
            continue
        out.append((res.grid, codec.decode_sequence(res.grid, books)))
    return out
