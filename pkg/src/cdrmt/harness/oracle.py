"""Ground-truth referring sets: the decoupled streams evaluated as predicates over a frame."""

from __future__ import annotations

from dataclasses import dataclass

from ..decoupler import DecoupledExpression, Lexicon, decouple
from .scenes import SceneFrame, SceneObject

CATEGORY_TERMS = {
    "car": "car", "cars": "car", "vehicle": "car", "vehicles": "car",
    "automobile": "car", "automobiles": "car",
    "person": "person", "people": "person", "pedestrian": "person", "pedestrians": "person",
    "woman": "person", "women": "person", "man": "person", "men": "person",
}
COLOR_TERMS = {
    "black": {"black"}, "white": {"white"}, "red": {"red"}, "blue": {"blue"},
    "silver": {"silver"}, "gray": {"silver"}, "grey": {"silver"},
    "green": {"green"}, "yellow": {"yellow"},
    "light": {"white", "silver"}, "light-color": {"white", "silver"}, "bright": {"white", "silver"},
    "dark": {"black", "blue"}, "dark-color": {"black", "blue"},
}
MOVING = {"moving", "walking", "turning-left", "turning-right"}
MOTION_TERMS = {
    "moving": MOVING, "move": MOVING, "moves": MOVING, "driving": MOVING,
    "going": MOVING, "approaching": MOVING,
    "walking": {"walking"}, "walk": {"walking"}, "walks": {"walking"}, "running": {"walking"},
    "turning": {"turning-left", "turning-right"}, "turn": {"turning-left", "turning-right"},
    "turns": {"turning-left", "turning-right"},
    "parked": {"parked"}, "parking": {"parked"},
    "standing": {"standing"},
    "stationary": {"parked", "standing"}, "stopped": {"parked", "standing"}, "static": {"parked", "standing"},
}
SIDES = {"left", "right"}


@dataclass(frozen=True)
class Predicate:
    categories: frozenset[str] | None
    colors: frozenset[str] | None
    states: frozenset[str] | None
    side: str | None

    def __call__(self, obj: SceneObject) -> bool:
        if self.categories is not None and obj.category not in self.categories:
            return False
        if self.colors is not None and obj.color not in self.colors:
            return False
        if self.states is not None and obj.state not in self.states:
            return False
        if self.side is not None and obj.side != self.side:
            return False
        return True


def _intersect(current, new):
    return frozenset(new) if current is None else current & frozenset(new)


def build_predicate(parsed: DecoupledExpression) -> Predicate:
    """Static stream grounds category and colour; motion stream grounds side and motion state.

    Terms with no grounding in the synthetic world (e.g. "front", "color") are
    vacuous. A streamless expression refers to every object.
    """
    categories = colors = states = None
    side = None
    for tok in parsed.static_stream:
        if tok in CATEGORY_TERMS:
            categories = _intersect(categories, {CATEGORY_TERMS[tok]})
        elif tok in COLOR_TERMS:
            colors = _intersect(colors, COLOR_TERMS[tok])
    motion = list(parsed.motion_stream)
    i = 0
    while i < len(motion):
        tok = motion[i]
        if tok in ("turning", "turn", "turns") and i + 1 < len(motion) and motion[i + 1] in SIDES:
            states = _intersect(states, {f"turning-{motion[i + 1]}"})
            i += 2
            continue
        if tok in MOTION_TERMS:
            states = _intersect(states, MOTION_TERMS[tok])
        elif tok in SIDES:
            side = tok if side in (None, tok) else "none"
        i += 1
    return Predicate(categories, colors, states, side)


def referring_oracle(expression: str, frame: SceneFrame, lexicon: Lexicon | None = None) -> set[int]:
    pred = build_predicate(decouple(expression, lexicon))
    return {o.id for o in frame.objects if pred(o)}
