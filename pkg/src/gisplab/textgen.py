"""Seeded synthetic text: the bundled training corpus and its QA task family.

The generator builds a small world of entities with deterministic attributes
(every animal has one color, one home, one food) and renders it in three
registers:

  narrative  — filler sentences that reuse the attributes in context
  facts      — flat attribute statements ("the fox is red .")
  qa         — question/answer lines ("Q: what color is the fox ? A: red")

Because attributes are deterministic given the seed, question answers are
derivable from corpus statistics, and the QA register doubles as in-domain
calibration text. Everything is byte-level lowercase ASCII.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["WorldSpec", "World", "build_world", "generate_corpus",
           "qa_facts", "DEFAULT_SEED"]

DEFAULT_SEED = 0

ANIMALS = ["fox", "rabbit", "crow", "mouse", "otter", "badger", "heron",
           "beetle", "deer", "wolf", "owl", "snake", "frog", "bat",
           "mole", "lynx"]
COLORS = ["red", "blue", "green", "grey", "brown", "white", "black",
          "golden", "silver", "amber"]
PLACES = ["barn", "river", "meadow", "forest", "hill", "garden", "marsh",
          "orchard", "cave", "valley"]
FOODS = ["berries", "seeds", "grain", "apples", "clover", "fish", "roots",
         "nuts", "leaves", "worms"]
VERBS = ["chases", "watches", "follows", "finds", "carries", "hides from",
         "visits", "avoids", "greets", "passes"]
ADJECTIVES = ["old", "small", "quiet", "bright", "cold", "wet", "tall",
              "narrow", "warm", "dark"]
WEATHER = ["rain", "wind", "snow", "fog", "sun", "frost", "mist", "hail"]
TIMES = ["at dawn", "at dusk", "at noon", "at night", "in spring",
         "in autumn", "in winter", "in summer"]

QUESTIONS = {
    "color": ("what color is the {animal} ?", COLORS),
    "home": ("where does the {animal} live ?", PLACES),
    "food": ("what does the {animal} eat ?", FOODS),
}


@dataclass(frozen=True)
class WorldSpec:
    """Knobs for the generated world; the default is the bundled corpus."""

    seed: int = DEFAULT_SEED
    narrative_weight: float = 0.85
    fact_weight: float = 0.08
    qa_weight: float = 0.07


@dataclass
class World:
    spec: WorldSpec
    color_of: dict[str, str]
    home_of: dict[str, str]
    food_of: dict[str, str]


def build_world(spec: WorldSpec | None = None) -> World:
    spec = spec or WorldSpec()
    rng = np.random.default_rng(spec.seed)
    color_of = {a: COLORS[int(rng.integers(len(COLORS)))] for a in ANIMALS}
    home_of = {a: PLACES[int(rng.integers(len(PLACES)))] for a in ANIMALS}
    food_of = {a: FOODS[int(rng.integers(len(FOODS)))] for a in ANIMALS}
    return World(spec, color_of, home_of, food_of)


def _pick(rng, items):
    return items[int(rng.integers(len(items)))]


def _narrative_sentence(rng, world: World) -> str:
    """Filler text: colors are used faithfully, but places are random scenery,
    so home/food associations live only in the fact and qa registers and a
    task-formatted calibration sample genuinely carries extra information."""
    a = _pick(rng, ANIMALS)
    b = _pick(rng, [x for x in ANIMALS if x != a])
    kind = int(rng.integers(4))
    if kind == 0:
        return (f"the {world.color_of[a]} {a} {_pick(rng, VERBS)} "
                f"the {world.color_of[b]} {b} near the "
                f"{_pick(rng, ADJECTIVES)} {_pick(rng, PLACES)} .")
    if kind == 1:
        return (f"{_pick(rng, TIMES)} the {a} {_pick(rng, VERBS)} "
                f"the {b} in the {_pick(rng, PLACES)} .")
    if kind == 2:
        return (f"under the {_pick(rng, WEATHER)} the {world.color_of[a]} "
                f"{a} {_pick(rng, VERBS)} the {b} .")
    return (f"the {a} and the {b} cross the {_pick(rng, ADJECTIVES)} "
            f"{_pick(rng, PLACES)} {_pick(rng, TIMES)} .")


def _fact_sentence(rng, world: World) -> str:
    a = _pick(rng, ANIMALS)
    kind = int(rng.integers(3))
    if kind == 0:
        return f"the {a} is {world.color_of[a]} ."
    if kind == 1:
        return f"the {a} lives in the {world.home_of[a]} ."
    return f"the {a} eats {world.food_of[a]} ."


def qa_line(world: World, animal: str, topic: str) -> tuple[str, str]:
    """(prompt, answer) rendering of one question; prompt ends with 'A:'."""
    template, _ = QUESTIONS[topic]
    question = template.format(animal=animal)
    return f"Q: {question} A:", f" {_answer(world, animal, topic)}"


def _answer(world: World, animal: str, topic: str) -> str:
    table = {"color": world.color_of, "home": world.home_of,
             "food": world.food_of}[topic]
    return table[animal]


def _qa_sentence(rng, world: World) -> str:
    a = _pick(rng, ANIMALS)
    topic = _pick(rng, sorted(QUESTIONS))
    prompt, answer = qa_line(world, a, topic)
    return prompt + answer


def generate_corpus(size: int = 1_000_000, spec: WorldSpec | None = None,
                    register: str = "mixed") -> bytes:
    """Deterministic ASCII corpus of roughly ``size`` bytes.

    register: "mixed" (bundled default), "narrative", "facts", or "qa"
    (QA lines only; the in-domain calibration text).
    """
    world = build_world(spec)
    spec = world.spec
    rng = np.random.default_rng(spec.seed + 1)
    weights = {
        "mixed": (spec.narrative_weight, spec.fact_weight, spec.qa_weight),
        "narrative": (1.0, 0.0, 0.0),
        "facts": (0.0, 1.0, 0.0),
        "qa": (0.0, 0.0, 1.0),
    }[register]
    cum = np.cumsum(weights) / sum(weights)

    lines = []
    total = 0
    while total < size:
        u = rng.random()
        if u < cum[0]:
            line = _narrative_sentence(rng, world)
        elif u < cum[1]:
            line = _fact_sentence(rng, world)
        else:
            line = _qa_sentence(rng, world)
        lines.append(line)
        total += len(line) + 1
    return "\n".join(lines).encode("ascii")[:size]


def qa_facts(spec: WorldSpec | None = None) -> list[tuple[str, str, str, list[str]]]:
    """All (animal, topic, answer, distractor pool) tuples of the world."""
    world = build_world(spec)
    out = []
    for a in ANIMALS:
        for topic, (_, pool) in sorted(QUESTIONS.items()):
            ans = _answer(world, a, topic)
            out.append((a, topic, ans, [x for x in pool if x != ans]))
    return out
