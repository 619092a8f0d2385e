"""Assembly of training sequences from world scenes and dataset records.

Sequence conventions (role delimiters are special tokens):

    text        <bos> <user> prompt <assistant> | answer <eos>
    t2a         <bos> <user> prompt <assistant> <boa> | steps... <eoa>
    understand  <bos> <user> [audio] question <assistant> | answer <eos>
    enrich      <bos> <user> prompt <assistant> | <plan> plan </plan> <eos>
    dialogue    alternating <user>/<assistant> turns; assistant spans are
                outputs, ending in a plan block (+ optional audio span)
    reflect     prompt, plan, first audio, observed plan, critique block,
                second audio; outputs start at the first assistant span

Everything left of ``|`` is prompt (loss 0). Generation-task samples drop
their prompt to the null-condition token with probability 0.1 at assembly
time so the guidance pass has an unconditional model to query.
"""

import numpy as np

from .errors import InputError
from .layout import (
    KIND_AUDIO_INPUT,
    KIND_AUDIO_STEP,
    KIND_TEXT,
    PAD_SLOT,
    Sample,
    apply_delay,
)

COND_DROPOUT = 0.1


class SeqBuilder:
    """Accumulates positions, then materializes a Sample."""

    def __init__(self, vocab, n_q):
        self.vocab = vocab
        self.n_q = n_q
        self.kinds = []
        self.tokens = []
        self.slots = []
        self.out = []
        self.ain = None
        self.ain_start = -1

    def _push(self, kind, token, slots, out):
        self.kinds.append(kind)
        self.tokens.append(token)
        self.slots.append(slots)
        self.out.append(out)

    def text(self, ids, out=False):
        pad = [PAD_SLOT] * self.n_q
        for tok in ids:
            self._push(KIND_TEXT, int(tok), pad, out)
        return self

    def audio_steps(self, grid, out=True):
        steps = apply_delay(grid)
        for row in steps:
            self._push(KIND_AUDIO_STEP, 0, [int(c) for c in row], out)
        return self

    def audio_input(self, frames, rows):
        if self.ain is not None:
            raise InputError("a sample may carry one audio-input block")
        self.ain_start = len(self.kinds)
        self.ain = frames
        pad = [PAD_SLOT] * self.n_q
        for _ in range(rows):
            self._push(KIND_AUDIO_INPUT, 0, pad, False)
        return self

    def build(self, sample_id, task):
        return Sample(
            id=sample_id,
            task=task,
            kinds=np.asarray(self.kinds, dtype=np.int8),
            tokens=np.asarray(self.tokens, dtype=np.int32),
            slots=np.asarray(self.slots, dtype=np.int16).reshape(len(self.kinds), self.n_q),
            out_mask=np.asarray(self.out, dtype=bool),
            input_frames=self.ain,
            ain_start=self.ain_start,
        )


def prompt_ids(vocab, prompt_text, mode):
    """Prompt prefix fed to the decoder before generation starts."""
    ids = [vocab.BOS, vocab.USER, *vocab.encode_text(prompt_text), vocab.ASSISTANT]
    if mode == "audio":
        ids.append(vocab.BOA)
    return ids


def uncond_prompt_ids(vocab, mode):
    ids = [vocab.BOS, vocab.USER, vocab.NULL, vocab.ASSISTANT]
    if mode == "audio":
        ids.append(vocab.BOA)
    return ids


def text_sample(vocab, n_q, sample_id, task, prompt_text, target_text):
    b = SeqBuilder(vocab, n_q)
    b.text(prompt_ids(vocab, prompt_text, "text"))
    b.text([*vocab.encode_text(target_text), vocab.EOS], out=True)
    return b.build(sample_id, task)


def t2a_sample(vocab, n_q, sample_id, prompt_text, grid, uncond=False):
    b = SeqBuilder(vocab, n_q)
    if uncond:
        b.text(uncond_prompt_ids(vocab, "audio"))
    else:
        b.text(prompt_ids(vocab, prompt_text, "audio"))
    b.audio_steps(grid, out=True)
    b.text([vocab.EOA], out=True)
    return b.build(sample_id, "t2a")


def understand_sample(vocab, n_q, sample_id, frames, question_text, answer_text,
                      plan_answer=False):
    """Audio question answering; caption answers are emitted as plan blocks
    so the listening path speaks the same grammar as enrichment."""
    b = SeqBuilder(vocab, n_q)
    b.text([vocab.BOS, vocab.USER])
    rows = (len(frames) + 1) // 2
    b.audio_input(frames, rows)
    b.text([*vocab.encode_text(question_text), vocab.ASSISTANT])
    if plan_answer:
        b.text(
            [vocab.PLAN_OPEN, *vocab.encode_text(answer_text), vocab.PLAN_CLOSE, vocab.EOS],
            out=True,
        )
    else:
        b.text([*vocab.encode_text(answer_text), vocab.EOS], out=True)
    return b.build(sample_id, "understand")


def enrich_sample(vocab, n_q, sample_id, prompt_text, plan_text, grid=None):
    b = SeqBuilder(vocab, n_q)
    b.text(prompt_ids(vocab, prompt_text, "text"))
    b.text([vocab.PLAN_OPEN, *vocab.encode_text(plan_text), vocab.PLAN_CLOSE], out=True)
    if grid is None:
        b.text([vocab.EOS], out=True)
        return b.build(sample_id, "enrich")
    b.text([vocab.BOA], out=True)
    b.audio_steps(grid, out=True)
    b.text([vocab.EOA], out=True)
    return b.build(sample_id, "enrich")


def dialogue_sample(vocab, n_q, sample_id, turns, plan_text, grid=None):
    """``turns``: (role, text) pairs ending before the final plan block.

    Role headers are forced context; assistant content plus the USER token
    that yields the floor are outputs, so the model learns to end its turn.
    """
    b = SeqBuilder(vocab, n_q)
    b.text([vocab.BOS])
    first_user = True
    for role, text in turns:
        if role == "user":
            if first_user:
                b.text([vocab.USER])
                first_user = False
            b.text(vocab.encode_text(text))
        else:
            b.text([vocab.ASSISTANT])
            b.text([*vocab.encode_text(text), vocab.USER], out=True)
    b.text([vocab.ASSISTANT])
    b.text([vocab.PLAN_OPEN, *vocab.encode_text(plan_text), vocab.PLAN_CLOSE], out=True)
    if grid is None:
        b.text([vocab.EOS], out=True)
        return b.build(sample_id, "dialogue")
    b.text([vocab.BOA], out=True)
    b.audio_steps(grid, out=True)
    b.text([vocab.EOA], out=True)
    return b.build(sample_id, "dialogue")


def reflect_sample(
    vocab, n_q, sample_id, prompt_text, plan_text, grid1, observed_text, critique_text, grid2
):
    """Reflection trace with the same forcing pattern as the inference loop:
    the plan and the refined audio are outputs; the first attempt, the heard
    caption, and the critique are inserted context (the loop injects them
    from its own listen/critique stages)."""
    b = SeqBuilder(vocab, n_q)
    b.text(prompt_ids(vocab, prompt_text, "text"))
    b.text([vocab.PLAN_OPEN, *vocab.encode_text(plan_text), vocab.PLAN_CLOSE], out=True)
    b.text([vocab.BOA])
    b.audio_steps(grid1, out=False)
    b.text([vocab.EOA])
    b.text([vocab.PLAN_OPEN, *vocab.encode_text(observed_text), vocab.PLAN_CLOSE])
    b.text([vocab.CRITIQUE_OPEN, *vocab.encode_text(critique_text), vocab.CRITIQUE_CLOSE])
    b.text([vocab.BOA])
    b.audio_steps(grid2, out=True)
    b.text([vocab.EOA], out=True)
    return b.build(sample_id, "reflect")


def scene_samples(vocab, n_q, scene, grid, index, rng):
    """The three base-corpus samples (t2a, understand, text) for one scene."""
    from . import world as world_mod

    prompt = scene.short_prompt if index % 2 == 0 else scene.abstract_prompt
    uncond = rng.random() < COND_DROPOUT
    t2a = t2a_sample(vocab, n_q, f"{scene.id}_t2a", prompt, grid, uncond=uncond)
    und = understand_sample(
        vocab,
        n_q,
        f"{scene.id}_und",
        scene.frames,
        "describe the audio",
        world_mod.serialize_caption(scene.caption),
        plan_answer=True,
    )
    rec = world_mod._text_record(scene, index)
    text = text_sample(
        vocab, n_q, rec["id"], "text", rec["prompt_text"], rec["target_text"]
    )
    return [t2a, und, text]
