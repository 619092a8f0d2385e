"""Closed lexicon of the synthetic audio world.

Everything the world ever says -- event names, attribute levels, prompt and
dialogue templates, plan grammar markers -- is a word in this lexicon, so
the text tokenizer can be a closed word-level vocabulary with byte fallback
for anything foreign.
"""

EVENTS = [
    "dog_bark", "cat_meow", "bird_song", "rooster_crow", "cow_moo", "sheep_baa",
    "rain", "thunder", "wind", "ocean_waves", "river_stream", "fire_crackle",
    "footsteps", "door_knock", "glass_break", "church_bell", "car_engine",
    "car_horn", "siren", "train_whistle", "helicopter", "drum_beat",
    "guitar_strum", "piano_melody",
]

INTENSITIES = ["soft", "moderate", "loud"]
DISTANCES = ["close", "nearby", "distant"]
TEXTURES = ["smooth", "rough", "pulsed"]
ATTRIBUTE_NAMES = ["intensity", "distance", "count", "texture"]

SHORT_PHRASES = {
    "dog_bark": "a dog barks",
    "cat_meow": "a cat meows",
    "bird_song": "a bird sings",
    "rooster_crow": "a rooster crows",
    "cow_moo": "a cow moos",
    "sheep_baa": "a sheep bleats",
    "rain": "rain falls",
    "thunder": "thunder rumbles",
    "wind": "wind blows",
    "ocean_waves": "waves crash",
    "river_stream": "a stream flows",
    "fire_crackle": "a fire crackles",
    "footsteps": "footsteps pass",
    "door_knock": "someone knocks",
    "glass_break": "glass shatters",
    "church_bell": "a bell tolls",
    "car_engine": "an engine runs",
    "car_horn": "a horn honks",
    "siren": "a siren wails",
    "train_whistle": "a train whistles",
    "helicopter": "a helicopter hovers",
    "drum_beat": "drums play",
    "guitar_strum": "a guitar strums",
    "piano_melody": "a piano plays",
}

# Scenario phrasing for abstract prompts; must never use an event-name token.
ABSTRACT_FRAGMENTS = {
    "dog_bark": "a guard animal alerting the yard",
    "cat_meow": "a small pet calling for attention",
    "bird_song": "morning life in the trees",
    "rooster_crow": "a farm waking at dawn",
    "cow_moo": "livestock in a pasture",
    "sheep_baa": "a flock on a hillside",
    "rain": "water falling on rooftops",
    "thunder": "a storm rolling overhead",
    "wind": "air rushing past the windows",
    "ocean_waves": "the shore under a wide sky",
    "river_stream": "water winding through a valley",
    "fire_crackle": "a warm hearth in a cabin",
    "footsteps": "someone moving through a hallway",
    "door_knock": "a visitor arriving at the entrance",
    "glass_break": "an accident in the kitchen",
    "church_bell": "an old tower marking the hour",
    "car_engine": "a vehicle idling in the street",
    "car_horn": "impatient traffic downtown",
    "siren": "an emergency passing through the city",
    "train_whistle": "a locomotive leaving the station",
    "helicopter": "rotors beating above the skyline",
    "drum_beat": "a rhythm driving a performance",
    "guitar_strum": "strings around a campfire",
    "piano_melody": "keys drifting from a parlor",
}

PLAN_HEADERS = ["KEYWORDS:", "LAYOUT:", "DESCRIPTION:"]

DIALOGUE_OPENER = "help me build a sound scene"
DIALOGUE_QUESTIONS = {
    "keywords": "which events should appear",
    "layout": "how should the events be arranged",
    "description": "what are the event details",
}
DIALOGUE_REVEAL_PREFIX = {
    "keywords": "the events are",
    "layout": "the layout is",
    "description": "the details are",
}

UNDERSTAND_QUESTIONS = [
    "describe the audio",
    "which event comes first",
    "how many events are there",
]

TEXT_TASK_TEMPLATES = [
    "list the intensity levels",
    "list the distance levels",
    "list the texture levels",
    "what number follows",
    "repeat after me :",
    "count the words :",
]

CRITIQUE_TEMPLATES = [
    "no flaw",
    "missing event ; add at its planned span",
    "extra event ; remove it",
    "wrong order for and ; place before",
    "wrong for ; use",
]

# spans and frame counts are spelled out as number words
MAX_FRAME = 300


def collect_words():
    """Every word the world's templates can emit, sorted and unique."""
    words = set()
    words.update(EVENTS)
    words.update(INTENSITIES)
    words.update(DISTANCES)
    words.update(TEXTURES)
    words.update(ATTRIBUTE_NAMES)
    words.update(PLAN_HEADERS)
    words.add(";")
    for phrase in SHORT_PHRASES.values():
        words.update(phrase.split())
    for phrase in ABSTRACT_FRAGMENTS.values():
        words.update(phrase.split())
    for text in (
        [DIALOGUE_OPENER]
        + list(DIALOGUE_QUESTIONS.values())
        + list(DIALOGUE_REVEAL_PREFIX.values())
        + UNDERSTAND_QUESTIONS
        + TEXT_TASK_TEMPLATES
        + CRITIQUE_TEMPLATES
    ):
        words.update(text.split())
    words.update(
        ["then", "picture", "and", "?", ".", "here", "is", "the", "plan", "that", "all"]
    )
    words.update(str(n) for n in range(MAX_FRAME + 1))
    return sorted(words)
