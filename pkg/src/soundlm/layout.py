"""Delay-pattern serialization of token grids, and sequence packing.

A TokenGrid entry A[n, t] (stage n, frame t, both 0-based here) is carried
by step s = t + n of the delayed sequence, so a T-frame grid spans
T + n_q - 1 steps and slot n of step s is PAD unless 0 <= s - n < T.

Packing concatenates samples into fixed token budgets. Attention isolation
between co-packed samples is expressed through segment ids; loss masks and
per-position weights implement the one-frame-equals-one-text-token
accounting (each audio token slot weighs 1/n_q).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError

PAD_SLOT = -1

# position kinds
KIND_TEXT = 0
KIND_AUDIO_STEP = 1
KIND_AUDIO_INPUT = 2


def apply_delay(grid):
    """Delayed (S, n_q) step matrix for an (n_q, T) token grid."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise InputError("token grid must be (n_q, T)")
    n_q, t = grid.shape
    if t < 1:
        raise InputError("token grid needs at least one frame")
    steps = np.full((t + n_q - 1, n_q), PAD_SLOT, dtype=np.int64)
    for n in range(n_q):
        steps[n : n + t, n] = grid[n]
    return steps


def remove_delay(steps):
    """Invert ``apply_delay``; the PAD pattern must match some (n_q, T)."""
    steps = np.asarray(steps)
    if steps.ndim != 2:
        raise FormatError("delayed sequence must be a 2-D step matrix")
    s, n_q = steps.shape
    t = s - n_q + 1
    if t < 1:
        raise FormatError(f"{s} steps cannot hold any frame at n_q={n_q}")
    pad = steps == PAD_SLOT
    expect = np.ones((s, n_q), dtype=bool)
    for n in range(n_q):
        expect[n : n + t, n] = False
    if not np.array_equal(pad, expect):
        raise FormatError("PAD pattern inconsistent with a delayed grid")
    grid = np.empty((n_q, t), dtype=np.int64)
    for n in range(n_q):
        grid[n] = steps[n : n + t, n]
    return grid


@dataclass
class Sample:
    """One training sequence: interleaved text, audio-step, and audio-input
    positions with an output mask marking what the model must predict."""

    id: str
    task: str
    kinds: np.ndarray          # (L,) int8
    tokens: np.ndarray         # (L,) int32, text token id where kind==text
    slots: np.ndarray          # (L, n_q) int16, stage codes, PAD_SLOT elsewhere
    out_mask: np.ndarray       # (L,) bool
    input_frames: np.ndarray | None = None  # frames behind the audio-input block
    ain_start: int = -1

    def __len__(self):
        return len(self.kinds)

    def effective_tokens(self):
        """Loss denominators: text outputs count 1, audio slots 1/n_q each."""
        n_q = self.slots.shape[1]
        text = np.sum((self.kinds == KIND_TEXT) & self.out_mask)
        astep = (self.kinds == KIND_AUDIO_STEP) & self.out_mask
        slots = np.sum(self.slots[astep] != PAD_SLOT)
        return float(text) + float(slots) / n_q


@dataclass
class PackedBatch:
    kinds: np.ndarray
    tokens: np.ndarray
    slots: np.ndarray
    out_mask: np.ndarray
    segment_ids: np.ndarray    # (L,) int32, one id per packed document
    loss_weight: np.ndarray    # (L,) float64 position weight
    sample_ids: list = field(default_factory=list)
    sample_spans: list = field(default_factory=list)   # [(start, end)]
    sample_tasks: list = field(default_factory=list)
    audio_inputs: list = field(default_factory=list)   # [(pos, frames)]

    def __len__(self):
        return len(self.kinds)

    def effective_tokens(self):
        return float(np.sum(self.loss_weight))


def position_weights(sample):
    """Per-position loss weight for one sample (see module docstring)."""
    n_q = sample.slots.shape[1]
    w = np.zeros(len(sample), dtype=np.float64)
    text_out = (sample.kinds == KIND_TEXT) & sample.out_mask
    w[text_out] = 1.0
    astep_out = (sample.kinds == KIND_AUDIO_STEP) & sample.out_mask
    w[astep_out] = np.sum(sample.slots[astep_out] != PAD_SLOT, axis=1) / n_q
    return w


def _pack_group(group, next_segment):
    kinds = np.concatenate([s.kinds for s in group])
    tokens = np.concatenate([s.tokens for s in group])
    slots = np.concatenate([s.slots for s in group], axis=0)
    out_mask = np.concatenate([s.out_mask for s in group])
    weight = np.concatenate([position_weights(s) for s in group])
    seg = np.empty(len(kinds), dtype=np.int32)
    spans, ids, tasks, ains = [], [], [], []
    pos = 0
    for s in group:
        end = pos + len(s)
        seg[pos:end] = next_segment
        spans.append((pos, end))
        ids.append(s.id)
        tasks.append(s.task)
        if s.input_frames is not None:
            ains.append((pos + s.ain_start, s.input_frames))
        next_segment += 1
        pos = end
    return (
        PackedBatch(
            kinds=kinds,
            tokens=tokens,
            slots=slots,
            out_mask=out_mask,
            segment_ids=seg,
            loss_weight=weight,
            sample_ids=ids,
            sample_spans=spans,
            sample_tasks=tasks,
            audio_inputs=ains,
        ),
        next_segment,
    )


def pack(samples, budget):
    """First-fit-decreasing packing into ``budget``-token packs.

    Samples are never split; segment ids are unique across the returned
    packs so cross-document attention can be blocked exactly.
    """
    for s in samples:
        if len(s) > budget:
            raise InputError(f"sample {s.id!r} has {len(s)} tokens > budget {budget}")
    order = sorted(range(len(samples)), key=lambda i: (-len(samples[i]), i))
    bins: list[list] = []
    room: list[int] = []
    for i in order:
        s = samples[i]
        for b, free in enumerate(room):
            if len(s) <= free:
                bins[b].append(s)
                room[b] -= len(s)
                break
        else:
            bins.append([s])
            room.append(budget - len(s))
    packs = []
    segment = 0
    for group in bins:
        packed, segment = _pack_group(group, segment)
        packs.append(packed)
    return packs


def pack_single(sample):
    """Convenience: one sample as its own pack."""
    packed, _ = _pack_group([sample], 0)
    return packed
