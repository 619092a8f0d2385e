"""Procedural audio world with exact oracles.

Scenes are built from a closed lexicon of 24 events. Every (event,
intensity, distance, texture) combination owns a distinct prototype frame
vector, constructed so that the minimum pairwise distance (including the
distance to the silence prototype at zero) is ``MARGIN``:

* dims 0..11 carry the event identity: signed unit axes scaled by a gain
  attenuated with the distance level;
* dims 12 and 13 carry intensity and texture level steps;
* dim 14 is a constant active flag; dim 15 unused.

Rendering writes each event's prototype over its layout span -- repetition
count c appears as c runs separated by single silent frames -- adds noise
bounded strictly below MARGIN/2, and snaps to the codec grid. The listener
classifies each frame against the prototype table with the margin test, so
renderer and listener are exact inverses on every generated scene, and a
codec round-trip stays exact while its residual is below MARGIN/2.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import codec, fileio, kernels, lexicon
from .errors import ConfigError, FormatError, InputError, PlanParseError

D = 16
EVENT_DIMS = 12
GAIN = 2.0
ATTR_STEP = 0.5
ACTIVE_FLAG = 0.5
DIST_ATTEN = (1.0, 0.75, 0.5)
MARGIN = 0.5
N_EVENTS = len(lexicon.EVENTS)
MIN_SPAN = 5  # fits up to 3 repetition runs with single-frame gaps


def prototype(event_idx, intensity, distance, texture):
    """Frame vector for one event at 1-based attribute levels."""
    vec = np.zeros(D)
    axis = event_idx % EVENT_DIMS
    sign = 1.0 if event_idx < EVENT_DIMS else -1.0
    vec[axis] = sign * GAIN * DIST_ATTEN[distance - 1]
    vec[12] = ATTR_STEP * intensity
    vec[13] = ATTR_STEP * texture
    vec[14] = ACTIVE_FLAG
    return vec


_TABLE = None


def prototype_table():
    """(648, 16) prototype matrix plus per-row (event, i, d, t) metadata."""
    global _TABLE
    if _TABLE is None:
        rows, meta = [], []
        for e in range(N_EVENTS):
            for i in (1, 2, 3):
                for d in (1, 2, 3):
                    for t in (1, 2, 3):
                        rows.append(prototype(e, i, d, t))
                        meta.append((e, i, d, t))
        _TABLE = (np.asarray(rows), np.asarray(meta, dtype=np.int64))
    return _TABLE


SILENCE = -1
UNKNOWN = -2


def classify_frames(frames):
    """Per-frame prototype row index, SILENCE, or UNKNOWN (margin test)."""
    table, _ = prototype_table()
    frames = np.asarray(frames, dtype=np.float64)
    aug = np.vstack([table, np.zeros((1, D))])
    idx, d2 = kernels.assign_nearest(np.ascontiguousarray(frames), aug)
    labels = idx.copy()
    labels[idx == len(table)] = SILENCE
    labels[d2 >= (MARGIN / 2) ** 2] = UNKNOWN
    return labels


@dataclass
class LayoutEntry:
    event: str
    start: int
    end: int
    order: int


@dataclass
class RichCaption:
    keywords: list
    layout: list                    # [LayoutEntry]
    description: dict               # event -> {intensity, distance, count, texture}

    def validate(self, total_frames=None):
        known = set(self.keywords)
        for entry in self.layout:
            if entry.event not in known:
                raise InputError(f"layout event {entry.event!r} missing from keywords")
            if entry.event not in lexicon.EVENTS:
                raise InputError(f"unknown event {entry.event!r}")
            if not (0 <= entry.start < entry.end):
                raise InputError("layout span must satisfy 0 <= start < end")
            if total_frames is not None and entry.end > total_frames:
                raise InputError("layout span exceeds the scene length")
        ordered = sorted(self.layout, key=lambda e: e.order)
        for a, b in zip(ordered, ordered[1:]):
            if a.start > b.start:
                raise InputError("order indices inconsistent with start frames")
        return self


def serialize_caption(caption):
    """Canonical plan text: KEYWORDS / LAYOUT / DESCRIPTION lines."""
    kw = " ".join(caption.keywords)
    lay = " ; ".join(
        f"{e.event} {e.start} {e.end} {e.order}" for e in caption.layout
    )
    desc_parts = []
    for event in caption.keywords:
        d = caption.description[event]
        desc_parts.append(
            f"{event} intensity {d['intensity']} distance {d['distance']} "
            f"count {d['count']} texture {d['texture']}"
        )
    return (
        f"KEYWORDS: {kw}\nLAYOUT: {lay}\nDESCRIPTION: " + " ; ".join(desc_parts)
    )


def parse_caption(text):
    """Inverse of ``serialize_caption``; raises PlanParseError on bad input."""
    lines = [ln.strip() for ln in text.strip().split("\n") if ln.strip()]
    if len(lines) != 3:
        raise PlanParseError(f"expected 3 plan lines, got {len(lines)}", text)
    heads = ("KEYWORDS:", "LAYOUT:", "DESCRIPTION:")
    for line, head in zip(lines, heads):
        if not line.startswith(head):
            raise PlanParseError(f"missing {head} line", text)
    keywords = lines[0][len("KEYWORDS:"):].split()
    layout = []
    body = lines[1][len("LAYOUT:"):].strip()
    if body:
        for part in body.split(";"):
            bits = part.split()
            if len(bits) != 4:
                raise PlanParseError(f"bad layout entry {part!r}", text)
            try:
                layout.append(
                    LayoutEntry(bits[0], int(bits[1]), int(bits[2]), int(bits[3]))
                )
            except ValueError as exc:
                raise PlanParseError(f"bad layout numbers in {part!r}", text) from exc
    description = {}
    body = lines[2][len("DESCRIPTION:"):].strip()
    if body:
        for part in body.split(";"):
            bits = part.split()
            if len(bits) != 9 or bits[1::2] != ["intensity", "distance", "count", "texture"]:
                raise PlanParseError(f"bad description entry {part!r}", text)
            try:
                count = int(bits[6])
            except ValueError as exc:
                raise PlanParseError(f"bad count in {part!r}", text) from exc
            description[bits[0]] = {
                "intensity": bits[2],
                "distance": bits[4],
                "count": count,
                "texture": bits[8],
            }
    caption = RichCaption(keywords=keywords, layout=layout, description=description)
    for event in caption.keywords:
        if event not in lexicon.EVENTS:
            raise PlanParseError(f"unknown event {event!r}", text)
        if event not in description:
            raise PlanParseError(f"event {event!r} lacks a description", text)
    try:
        caption.validate()
    except InputError as exc:
        raise PlanParseError(str(exc), text) from exc
    return caption


@dataclass
class WorldConfig:
    events_min: int = 1
    events_max: int = 3
    frames_min: int = 32
    frames_max: int = 48
    noise_amp: float = 0.08    # L2 bound per frame, strictly below MARGIN/2

    def __post_init__(self):
        if not (1 <= self.events_min <= self.events_max <= 5):
            raise ConfigError("event count range must sit inside 1..5")
        if not (32 <= self.frames_min <= self.frames_max <= 256):
            raise ConfigError("frame count range must sit inside 32..256")
        if not (0 <= self.noise_amp < MARGIN / 2):
            raise ConfigError("noise must stay below half the oracle margin")


@dataclass
class SceneSample:
    id: str
    caption: RichCaption
    total_frames: int
    frames: np.ndarray
    short_prompt: str
    abstract_prompt: str
    script: list                     # user reveals for the dialogue task


def _level_word(kind, level):
    table = {
        "intensity": lexicon.INTENSITIES,
        "distance": lexicon.DISTANCES,
        "texture": lexicon.TEXTURES,
    }[kind]
    return table[level - 1]


def _level_index(kind, word):
    table = {
        "intensity": lexicon.INTENSITIES,
        "distance": lexicon.DISTANCES,
        "texture": lexicon.TEXTURES,
    }[kind]
    try:
        return table.index(word) + 1
    except ValueError as exc:
        raise InputError(f"unknown {kind} level {word!r}") from exc


def render_caption(caption, total_frames, noise_amp=0.0, rng=None):
    """Frames for a caption: prototype runs over each span, plus noise."""
    caption.validate(total_frames)
    frames = np.zeros((total_frames, D))
    for entry in caption.layout:
        desc = caption.description[entry.event]
        proto = prototype(
            lexicon.EVENTS.index(entry.event),
            _level_index("intensity", desc["intensity"]),
            _level_index("distance", desc["distance"]),
            _level_index("texture", desc["texture"]),
        )
        span = entry.end - entry.start
        count = desc["count"]
        if span < 2 * count - 1:
            raise InputError(f"span of {entry.event} too short for {count} runs")
        active = span - (count - 1)
        base, rem = divmod(active, count)
        cursor = entry.start
        for r in range(count):
            run = base + (1 if r < rem else 0)
            frames[cursor : cursor + run] = proto
            cursor += run + 1
    if noise_amp > 0:
        if rng is None:
            raise InputError("noisy rendering needs an rng")
        bound = noise_amp / np.sqrt(D)
        frames = frames + rng.uniform(-bound, bound, size=frames.shape)
    return codec.snap_to_grid(frames)


def oracle_listen(frames):
    """Rich caption decoded frame-by-frame from the prototype table.

    Frames farther than MARGIN/2 from every prototype are unknown and
    contribute nothing; an all-noise grid therefore yields empty keywords.
    """
    _, meta = prototype_table()
    labels = classify_frames(frames)
    events = {}
    for pos, lab in enumerate(labels):
        if lab < 0:
            continue
        events.setdefault(int(meta[lab][0]), []).append((pos, lab))
    entries = []
    for e_idx, hits in events.items():
        positions = np.array([p for p, _ in hits])
        runs = 1 + int(np.sum(np.diff(positions) > 1))
        votes = np.array([meta[lab][1:] for _, lab in hits])  # (n, 3) levels
        levels = [int(np.bincount(votes[:, j], minlength=4)[1:].argmax()) + 1 for j in range(3)]
        entries.append(
            (
                int(positions.min()),
                int(positions.max()) + 1,
                lexicon.EVENTS[e_idx],
                runs,
                levels,
            )
        )
    entries.sort(key=lambda item: (item[0], item[2]))
    keywords, layout, description = [], [], {}
    for order, (start, end, event, runs, (i, d, t)) in enumerate(entries, start=1):
        keywords.append(event)
        layout.append(LayoutEntry(event, start, end, order))
        description[event] = {
            "intensity": _level_word("intensity", i),
            "distance": _level_word("distance", d),
            "count": runs,
            "texture": _level_word("texture", t),
        }
    return RichCaption(keywords=keywords, layout=layout, description=description)


@dataclass
class JudgeScores:
    adherence: float
    noise_floor: float
    coverage: float
    crispness: float
    balance: float

    def aesthetics(self):
        return (self.noise_floor, self.coverage, self.crispness, self.balance)


def _keyword_f1(observed, expected):
    a, b = set(observed), set(expected)
    if not a and not b:
        return 1.0
    inter = len(a & b)
    if inter == 0:
        return 0.0
    precision = inter / len(a)
    recall = inter / len(b)
    return 2 * precision * recall / (precision + recall)


def _order_agreement(observed, caption):
    starts = {e.event: e.start for e in observed.layout}
    entries = sorted(caption.layout, key=lambda e: e.order)
    if len(entries) == 0:
        return 1.0
    if len(entries) == 1:
        return 1.0 if entries[0].event in starts else 0.0
    agree = total = 0
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            total += 1
            a, b = entries[i].event, entries[j].event
            if a in starts and b in starts and starts[a] < starts[b]:
                agree += 1
    return agree / total


def _description_match(observed, caption):
    if not caption.keywords:
        return 1.0
    score = 0.0
    for event in caption.keywords:
        want = caption.description[event]
        got = observed.description.get(event)
        if got is None:
            continue
        hits = sum(1 for k in lexicon.ATTRIBUTE_NAMES if got[k] == want[k])
        score += hits / len(lexicon.ATTRIBUTE_NAMES)
    return score / len(caption.keywords)


def adherence_score(frames, caption_or_keywords):
    """Similarity in [0, 1] between decoded content and a caption.

    Full captions score 0.5 * keyword F1 + 0.3 * order agreement +
    0.2 * attribute match. A bare keyword list scores keyword F1 only
    (the reasoning-round judge rule).
    """
    observed = oracle_listen(frames)
    if isinstance(caption_or_keywords, RichCaption):
        caption = caption_or_keywords
        return (
            0.5 * _keyword_f1(observed.keywords, caption.keywords)
            + 0.3 * _order_agreement(observed, caption)
            + 0.2 * _description_match(observed, caption)
        )
    return _keyword_f1(observed.keywords, list(caption_or_keywords))


def oracle_judge(frames, caption_or_keywords):
    """Adherence plus four deterministic aesthetic functionals of the frames.

    The sub-scores are facets of rendering quality, all in [0, 1]:
    noise floor (energy left in frames that carry no event), span coverage
    (fraction of the clip occupied by decodable events), signature
    crispness (distance of event frames to their prototypes), and energy
    balance (consistency of event-frame energy over time; clean renders
    hold a steady level, flickering ones do not).
    """
    frames = np.asarray(frames, dtype=np.float64)
    table, _ = prototype_table()
    labels = classify_frames(frames)
    half = MARGIN / 2
    eventful = labels >= 0
    silent = labels == SILENCE
    if np.any(silent):
        rest = float(np.mean(np.linalg.norm(frames[silent], axis=1)))
        noise_floor = 1.0 - min(1.0, rest / half)
    else:
        noise_floor = 1.0
    coverage = float(np.mean(eventful))
    if np.any(eventful):
        dists = np.linalg.norm(frames[eventful] - table[labels[eventful]], axis=1)
        crispness = max(0.0, 1.0 - float(np.mean(dists)) / half)
        norms = np.linalg.norm(frames[eventful], axis=1)
        balance = max(0.0, 1.0 - float(np.std(norms) / max(np.mean(norms), 1e-9)))
    else:
        crispness = 0.0
        balance = 0.0
    return JudgeScores(
        adherence=adherence_score(frames, caption_or_keywords),
        noise_floor=noise_floor,
        coverage=coverage,
        crispness=crispness,
        balance=balance,
    )


def derive_prompt(caption, style):
    """Deterministic user prompt derived from a caption."""
    try:
        if style == "short":
            return " then ".join(lexicon.SHORT_PHRASES[e] for e in caption.keywords)
        if style == "abstract":
            return "picture " + " and ".join(
                lexicon.ABSTRACT_FRAGMENTS[e] for e in caption.keywords
            )
    except KeyError as exc:
        raise ConfigError(f"no prompt template for event {exc.args[0]!r}") from exc
    raise ConfigError(f"unknown prompt style {style!r}")


def dialogue_reveals(caption):
    """The three field reveals a scripted user can hand the assistant."""
    plan_lines = serialize_caption(caption).split("\n")
    return {
        "keywords": f"{lexicon.DIALOGUE_REVEAL_PREFIX['keywords']} "
        + " ".join(caption.keywords),
        "layout": f"{lexicon.DIALOGUE_REVEAL_PREFIX['layout']} "
        + plan_lines[1][len("LAYOUT:"):].strip(),
        "description": f"{lexicon.DIALOGUE_REVEAL_PREFIX['description']} "
        + plan_lines[2][len("DESCRIPTION:"):].strip(),
    }


class ScriptedUser:
    """Deterministic dialogue partner revealing one caption field per turn."""

    FIELD_ORDER = ("keywords", "layout", "description")

    def __init__(self, caption, reveal_all_first=False):
        self.caption = caption
        reveals = dialogue_reveals(caption)
        if reveal_all_first:
            self._opener = (
                lexicon.DIALOGUE_OPENER
                + " . "
                + " . ".join(reveals[f] for f in self.FIELD_ORDER)
            )
            self._queue = []
        else:
            self._opener = lexicon.DIALOGUE_OPENER
            self._queue = [reveals[f] for f in self.FIELD_ORDER]
        self.turns_taken = 0

    def opener(self):
        return self._opener

    def respond(self, _assistant_text):
        self.turns_taken += 1
        if self._queue:
            return self._queue.pop(0)
        return "that is all"


def sample_scene(rng, cfg, scene_id="scene"):
    """One scene: caption, rendered frames, derived prompts, dialogue script."""
    total = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
    k = int(rng.integers(cfg.events_min, cfg.events_max + 1))
    max_fit = total // (MIN_SPAN + 1)
    k = max(1, min(k, max_fit))
    event_ids = rng.choice(N_EVENTS, size=k, replace=False)
    extra = total - MIN_SPAN * k
    alloc = rng.multinomial(extra, np.full(2 * k + 1, 1.0 / (2 * k + 1)))
    spans = alloc[:k] + MIN_SPAN
    cursor = int(alloc[k])  # leading silence gap
    keywords, layout, description = [], [], {}
    for i in range(k):
        event = lexicon.EVENTS[int(event_ids[i])]
        start, end = cursor, cursor + int(spans[i])
        span = end - start
        count = int(rng.integers(1, min(3, (span + 1) // 2) + 1))
        keywords.append(event)
        layout.append(LayoutEntry(event, start, end, i + 1))
        description[event] = {
            "intensity": lexicon.INTENSITIES[int(rng.integers(0, 3))],
            "distance": lexicon.DISTANCES[int(rng.integers(0, 3))],
            "count": count,
            "texture": lexicon.TEXTURES[int(rng.integers(0, 3))],
        }
        cursor = end + int(alloc[k + 1 + i])
    caption = RichCaption(keywords=keywords, layout=layout, description=description)
    caption.validate(total)
    frames = render_caption(caption, total, cfg.noise_amp, rng)
    return SceneSample(
        id=scene_id,
        caption=caption,
        total_frames=total,
        frames=frames,
        short_prompt=derive_prompt(caption, "short"),
        abstract_prompt=derive_prompt(caption, "abstract"),
        script=[dialogue_reveals(caption)[f] for f in ScriptedUser.FIELD_ORDER],
    )


def build_scenes(count, seed, cfg=None):
    """Deterministic scene list; scene i depends only on (seed, i)."""
    cfg = cfg or WorldConfig()
    return [
        sample_scene(np.random.default_rng((seed, i)), cfg, scene_id=f"s{seed}_{i:06d}")
        for i in range(count)
    ]


# ------------------------------------------------------------ oracle features

FEATURE_DIM = N_EVENTS + 6


def oracle_features(frames):
    """Deterministic feature vector for distribution metrics."""
    _, meta = prototype_table()
    frames = np.asarray(frames, dtype=np.float64)
    labels = classify_frames(frames)
    hist = np.zeros(N_EVENTS)
    eventful = labels >= 0
    if np.any(eventful):
        np.add.at(hist, meta[labels[eventful]][:, 0], 1.0)
    hist /= len(frames)
    energy = float(np.mean(np.linalg.norm(frames[:, :EVENT_DIMS], axis=1)))
    attrs = frames[:, 12:15].mean(axis=0)
    active = float(np.mean(eventful))
    unknown = float(np.mean(labels == UNKNOWN))
    return np.concatenate([hist, [energy, active, unknown], attrs])


def oracle_class_probs(frames):
    """Distribution over 24 event classes + silence by frame share."""
    _, meta = prototype_table()
    labels = classify_frames(frames)
    counts = np.zeros(N_EVENTS + 1)
    eventful = labels >= 0
    if np.any(eventful):
        np.add.at(counts, meta[labels[eventful]][:, 0], 1.0)
    counts[N_EVENTS] = np.sum(labels < 0)
    return counts / counts.sum()


# ------------------------------------------------------------- dataset files


def write_dataset(scenes, out_dir, tasks=("t2a", "understand", "text")):
    """Record file plus frame files for a scene list; byte-reproducible."""
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    records = []
    for i, scene in enumerate(scenes):
        rel = os.path.join("frames", f"{scene.id}.ufrm")
        fileio.write_frames(os.path.join(out_dir, rel), scene.frames)
        if "t2a" in tasks:
            prompt = scene.short_prompt if i % 2 == 0 else scene.abstract_prompt
            records.append(
                {
                    "id": f"{scene.id}_t2a",
                    "task": "t2a",
                    "prompt_text": prompt,
                    "frames_path": rel,
                }
            )
        if "understand" in tasks:
            records.append(
                {
                    "id": f"{scene.id}_und",
                    "task": "understand",
                    "prompt_text": lexicon.UNDERSTAND_QUESTIONS[0],
                    "target_text": serialize_caption(scene.caption),
                    "frames_path": rel,
                }
            )
        if "text" in tasks:
            records.append(_text_record(scene, i))
    path = os.path.join(out_dir, "records.jsonl")
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def _text_record(scene, i):
    kind = i % 4
    if kind == 0:
        prompt, target = "list the intensity levels", " ".join(lexicon.INTENSITIES)
    elif kind == 1:
        prompt, target = "list the distance levels", " ".join(lexicon.DISTANCES)
    elif kind == 2:
        n = scene.total_frames
        prompt, target = f"what number follows {n}", str(n + 1)
    else:
        words = scene.caption.keywords
        prompt, target = "repeat after me : " + " ".join(words), " ".join(words)
    return {
        "id": f"{scene.id}_text",
        "task": "text",
        "prompt_text": prompt,
        "target_text": target,
    }


def read_records(path):
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: bad record") from exc
            if "id" not in rec or "task" not in rec:
                raise FormatError(f"{path}:{lineno}: record needs id and task")
            records.append(rec)
    return records
