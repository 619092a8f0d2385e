"""Reasoning layer: enrichment, dialogue, critique, and self-reflection.

The reflection loop is generate -> listen -> critique -> regenerate:

1. the model enriches the user prompt into a plan (a rich caption);
2. audio is decoded conditioned on prompt + plan;
3. the model *listens* to its own audio through the understanding path and
   writes down what it heard (the exact oracle is reserved for scoring);
4. the deterministic critique diffs planned vs heard captions, reporting
   the single highest-priority flaw: missing event > extra event > order
   violation > attribute mismatch;
5. unless the critique is "no flaw", a second clip is decoded with the
   plan, first audio, heard caption, and critique in context. The loop
   never runs more than two generation calls.
"""

from dataclasses import dataclass

import numpy as np

from . import codec, lexicon, world
from .data import (
    dialogue_sample,
    enrich_sample,
    prompt_ids,
    reflect_sample,
    t2a_sample,
    uncond_prompt_ids,
)
from .errors import DialogueTimeout, PlanParseError, StageError
from .layout import apply_delay
from .sampling import SamplerParams, generate

MAX_PLAN_TOKENS = 220
TURN_LIMIT = 8


@dataclass
class ReflectionTrace:
    prompt: str
    planned: world.RichCaption
    grid1: np.ndarray
    observed: world.RichCaption
    critique: str
    grid2: np.ndarray | None  # None when the critique found no flaw

    def to_record(self, trace_id):
        return {
            "id": trace_id,
            "task": "reflect",
            "prompt_text": self.prompt,
            "plan": world.serialize_caption(self.planned),
            "observed": world.serialize_caption(self.observed),
            "critique": self.critique,
            "tokens": self.grid1.tolist(),
            "tokens2": None if self.grid2 is None else self.grid2.tolist(),
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            prompt=rec["prompt_text"],
            planned=world.parse_caption(rec["plan"]),
            observed=world.parse_caption(rec["observed"]),
            critique=rec["critique"],
            grid1=np.asarray(rec["tokens"], dtype=np.int64),
            grid2=None if rec["tokens2"] is None else np.asarray(rec["tokens2"], dtype=np.int64),
        )


def _extract_plan(vocab, ids, raw_hint=""):
    try:
        start = ids.index(vocab.PLAN_OPEN)
        end = ids.index(vocab.PLAN_CLOSE, start + 1)
    except ValueError:
        raise PlanParseError(
            "no complete plan block in the generated text",
            raw_hint or vocab.decode_text([i for i in ids if i < vocab.text_size]),
        ) from None
    return world.parse_caption(vocab.decode_text(ids[start + 1 : end]))


def enrich(model, prompt_text):
    """Greedy plan decoding from a user prompt, parsed into a caption."""
    vocab = model.vocab
    out = generate(
        model,
        prompt_ids(vocab, prompt_text, "text"),
        "text",
        SamplerParams(),
        stop_ids={vocab.EOS, vocab.PLAN_CLOSE},
        max_new_tokens=MAX_PLAN_TOKENS,
    )
    return _extract_plan(vocab, out.text_ids)


def model_listen(model, frames):
    """The understanding path: describe heard audio as a rich caption."""
    vocab = model.vocab
    prompt = [
        ("text", [vocab.BOS, vocab.USER]),
        ("frames", frames),
        ("text", vocab.encode_text("describe the audio") + [vocab.ASSISTANT]),
    ]
    out = generate(
        model, prompt, "text", SamplerParams(),
        stop_ids={vocab.EOS, vocab.PLAN_CLOSE}, max_new_tokens=MAX_PLAN_TOKENS,
    )
    return _extract_plan(vocab, out.text_ids)


def critique(planned, observed):
    """Single top-priority flaw between plan and observation, plus a fix."""
    planned_events = list(planned.keywords)
    observed_events = set(observed.keywords)
    for event in planned_events:
        if event not in observed_events:
            return f"missing event {event} ; add {event} at its planned span"
    for event in observed.keywords:
        if event not in planned_events:
            return f"extra event {event} ; remove it"
    p_order = [e.event for e in sorted(planned.layout, key=lambda x: x.order)]
    o_start = {e.event: e.start for e in observed.layout}
    for i in range(len(p_order)):
        for j in range(i + 1, len(p_order)):
            a, b = p_order[i], p_order[j]
            if not o_start.get(a, 0) < o_start.get(b, 1):
                return f"wrong order for {a} and {b} ; place {a} before {b}"
    for event in planned_events:
        want = planned.description[event]
        got = observed.description.get(event, {})
        for attr in lexicon.ATTRIBUTE_NAMES:
            if got.get(attr) != want[attr]:
                return f"wrong {attr} for {event} ; use {want[attr]}"
    return "no flaw"


def _plan_frame_count(caption, fallback=48):
    if not caption.layout:
        return fallback
    return max(e.end for e in caption.layout)


def _reflection_context(vocab, prompt_text, planned, steps1, observed, critique_text):
    ids_pre = prompt_ids(vocab, prompt_text, "text")
    plan_ids = [vocab.PLAN_OPEN, *vocab.encode_text(world.serialize_caption(planned)),
                vocab.PLAN_CLOSE, vocab.BOA]
    tail = [vocab.EOA,
            vocab.PLAN_OPEN, *vocab.encode_text(world.serialize_caption(observed)),
            vocab.PLAN_CLOSE,
            vocab.CRITIQUE_OPEN, *vocab.encode_text(critique_text), vocab.CRITIQUE_CLOSE,
            vocab.BOA]
    return [("text", ids_pre + plan_ids), ("steps", steps1), ("text", tail)]


def self_reflect(model, prompt_text, params, books, listen_fn=None, critique_fn=None,
                 max_frames=None):
    """Full reflection trace for one prompt; at most two generation calls."""
    vocab = model.vocab
    try:
        planned = enrich(model, prompt_text)
    except PlanParseError as exc:
        raise StageError("enrich", str(exc)) from exc
    t_target = max_frames or _plan_frame_count(planned)
    gen_prompt = prompt_ids(vocab, prompt_text, "text") + [
        vocab.PLAN_OPEN, *vocab.encode_text(world.serialize_caption(planned)),
        vocab.PLAN_CLOSE, vocab.BOA,
    ]
    try:
        first = generate(
            model, gen_prompt, "audio",
            SamplerParams(lam=params.lam, top_k=params.top_k,
                          temperature=params.temperature, max_frames=t_target,
                          seed=params.seed, logit_space=params.logit_space),
            uncond_prompt_ids=uncond_prompt_ids(vocab, "audio"),
        )
        if first.grid is None:
            raise StageError("generate", "no audio frames decoded")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("generate", str(exc)) from exc
    frames1 = codec.decode_sequence(first.grid, books)
    try:
        observed = (listen_fn or (lambda f: model_listen(model, f)))(frames1)
    except PlanParseError as exc:
        raise StageError("listen", str(exc)) from exc
    critique_text = (critique_fn or critique)(planned, observed)
    if critique_text == "no flaw":
        return ReflectionTrace(prompt_text, planned, first.grid, observed,
                               critique_text, None)
    context = _reflection_context(vocab, prompt_text, planned,
                                  apply_delay(first.grid), observed, critique_text)
    try:
        second = generate(
            model, context, "audio",
            SamplerParams(lam=params.lam, top_k=params.top_k,
                          temperature=params.temperature, max_frames=t_target,
                          seed=params.seed + 1, logit_space=params.logit_space),
            uncond_prompt_ids=uncond_prompt_ids(vocab, "audio"),
        )
        if second.grid is None:
            raise StageError("refine", "no audio frames decoded")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("refine", str(exc)) from exc
    return ReflectionTrace(prompt_text, planned, first.grid, observed,
                           critique_text, second.grid)


def dialogue_collect(model, user, turn_limit=TURN_LIMIT):
    """Alternate scripted-user / model turns until the model emits a plan."""
    vocab = model.vocab
    elements = [vocab.BOS, vocab.USER, *vocab.encode_text(user.opener())]
    for _ in range(turn_limit):
        elements.append(vocab.ASSISTANT)
        out = generate(
            model, elements, "text", SamplerParams(),
            stop_ids={vocab.EOS, vocab.USER, vocab.PLAN_CLOSE},
            max_new_tokens=MAX_PLAN_TOKENS,
        )
        ids = out.text_ids
        if vocab.PLAN_OPEN in ids:
            return _extract_plan(vocab, ids)
        elements.extend(ids if ids and ids[-1] == vocab.USER else ids + [vocab.USER])
        question = vocab.decode_text(
            [i for i in ids if i < vocab.text_size and i != vocab.USER and i != vocab.EOS]
        )
        elements.extend(vocab.encode_text(user.respond(question)))
    raise DialogueTimeout(f"no plan after {turn_limit} turns")


def _dialogue_turns(scene, reveal_all_first):
    reveals = world.dialogue_reveals(scene.caption)
    if reveal_all_first:
        opener = lexicon.DIALOGUE_OPENER + " . " + " . ".join(
            reveals[f] for f in world.ScriptedUser.FIELD_ORDER
        )
        return [("user", opener)]
    turns = [("user", lexicon.DIALOGUE_OPENER)]
    for field in world.ScriptedUser.FIELD_ORDER:
        turns.append(("assistant", lexicon.DIALOGUE_QUESTIONS[field]))
        turns.append(("user", reveals[field]))
    return turns


def build_round1(scenes, grids, vocab, n_q):
    """Three reasoning variants per scene: enrich, dialogue, direct caption."""
    samples = []
    for i, scene in enumerate(scenes):
        plan_text = world.serialize_caption(scene.caption)
        grid = grids[i]
        prompt = scene.short_prompt if i % 2 == 0 else scene.abstract_prompt
        samples.append(
            enrich_sample(vocab, n_q, f"{scene.id}_enr", prompt, plan_text, grid)
        )
        samples.append(
            dialogue_sample(
                vocab, n_q, f"{scene.id}_dlg",
                _dialogue_turns(scene, reveal_all_first=(i % 5 == 4)),
                plan_text, grid,
            )
        )
        # every tenth direct sample keeps the null-condition branch trained
        samples.append(
            t2a_sample(vocab, n_q, f"{scene.id}_dir", plan_text, grid,
                       uncond=(i % 10 == 9))
        )
    return samples


def build_round2(model, scenes, books, vocab, n_q, sampler=None, seed=0):
    """Reflection traces: the round-1 model's audio, the oracle's hearing of
    it, a template critique, and the true rendering as the refined target."""
    sampler = sampler or SamplerParams(lam=3.0, top_k=20)
    samples = []
    traces = []
    for i, scene in enumerate(scenes):
        prompt = scene.short_prompt if i % 2 == 0 else scene.abstract_prompt
        plan_text = world.serialize_caption(scene.caption)
        gen_prompt = prompt_ids(vocab, prompt, "text") + [
            vocab.PLAN_OPEN, *vocab.encode_text(plan_text), vocab.PLAN_CLOSE, vocab.BOA,
        ]
        first = generate(
            model, gen_prompt, "audio",
            SamplerParams(lam=sampler.lam, top_k=sampler.top_k,
                          max_frames=scene.total_frames, seed=seed * 9973 + i),
            uncond_prompt_ids=uncond_prompt_ids(vocab, "audio"),
        )
        if first.grid is None:
            continue
        observed = world.oracle_listen(codec.decode_sequence(first.grid, books))
        crit = critique(scene.caption, observed)
        grid2 = codec.encode_sequence(scene.frames, books)
        trace = ReflectionTrace(prompt, scene.caption, first.grid, observed, crit, grid2)
        traces.append(trace)
        samples.append(
            reflect_sample(
                vocab, n_q, f"{scene.id}_rfl", prompt, plan_text, first.grid,
                world.serialize_caption(observed), crit, grid2,
            )
        )
    return samples, traces
