"""Deterministic synthetic traffic scenes and their JSONL representation.

The image is split into horizontal lanes. Every lane holds one category and
one velocity, so objects sharing a lane never overlap; moving objects leave
once their box crosses the image border and new ones may enter at the
upstream edge.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import ValidationError

CATEGORIES = ("car", "person")
COLORS = ("black", "white", "red", "blue", "silver")
STATES = ("moving", "walking", "parked", "standing", "turning-left", "turning-right")


@dataclass(frozen=True)
class SceneObject:
    id: int
    box: tuple[float, float, float, float]
    category: str
    color: str
    speed: tuple[float, float]
    state: str

    @property
    def side(self) -> str:
        return "left" if self.box[0] < 0.5 else "right"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "box": list(self.box),
            "cat": self.category,
            "color": self.color,
            "speed": list(self.speed),
            "state": self.state,
        }

    @classmethod
    def from_json(cls, row: dict) -> "SceneObject":
        obj = cls(
            id=int(row["id"]),
            box=tuple(float(v) for v in row["box"]),
            category=row["cat"],
            color=row["color"],
            speed=tuple(float(v) for v in row.get("speed", (0.0, 0.0))),
            state=row["state"],
        )
        validate_object(obj)
        return obj


@dataclass(frozen=True)
class SceneFrame:
    t: int
    objects: tuple[SceneObject, ...]

    def to_json(self) -> dict:
        return {"t": self.t, "objects": [o.to_json() for o in self.objects]}

    @classmethod
    def from_json(cls, row: dict) -> "SceneFrame":
        frame = cls(int(row["t"]), tuple(SceneObject.from_json(o) for o in row["objects"]))
        ids = [o.id for o in frame.objects]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"frame {frame.t}: duplicate object ids")
        return frame

    def by_id(self) -> dict[int, SceneObject]:
        return {o.id: o for o in self.objects}


def validate_object(obj: SceneObject) -> None:
    cx, cy, w, h = obj.box
    if w <= 0 or h <= 0:
        raise ValidationError(f"object {obj.id}: non-positive box size {obj.box}")
    if cx - w / 2 < -1e-9 or cx + w / 2 > 1 + 1e-9 or cy - h / 2 < -1e-9 or cy + h / 2 > 1 + 1e-9:
        raise ValidationError(f"object {obj.id}: box {obj.box} leaves the unit image")
    if obj.category not in CATEGORIES:
        raise ValidationError(f"object {obj.id}: unknown category {obj.category!r}")
    if obj.state not in STATES:
        raise ValidationError(f"object {obj.id}: unknown motion state {obj.state!r}")


@dataclass
class SceneConfig:
    frames: int = 20
    min_objects: int = 3
    max_objects: int = 6
    lanes: int = 4
    car_size: tuple[float, float] = (0.3, 0.2)
    person_size: tuple[float, float] = (0.15, 0.22)
    car_speed: tuple[float, float] = (0.04, 0.08)
    person_speed: tuple[float, float] = (0.02, 0.04)
    static_lane_prob: float = 0.35
    person_lane_prob: float = 0.4
    spawn_prob: float = 0.3
    turn_prob: float = 0.0
    turn_frames: int = 3
    colors: tuple[str, ...] = COLORS
    objects: list[dict] | None = None

    def validate(self) -> None:
        if self.frames < 1:
            raise ValidationError("scene config: frames must be >= 1")
        if self.objects is None:
            if not 1 <= self.min_objects <= self.max_objects:
                raise ValidationError("scene config: need 1 <= min_objects <= max_objects")
            if self.lanes < 1:
                raise ValidationError("scene config: lanes must be >= 1")
            for size in (self.car_size, self.person_size):
                if not (0 < size[0] <= 1 and 0 < size[1] <= 1.0 / self.lanes + 1e-12):
                    raise ValidationError(f"scene config: object size {size} does not fit a lane")
        elif not self.objects:
            raise ValidationError("scene config: explicit object list is empty")
        for c in self.colors:
            if c not in COLORS:
                raise ValidationError(f"scene config: unknown colour {c!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"scene config: unknown fields {sorted(unknown)}")
        kwargs = {}
        for k, v in data.items():
            kwargs[k] = tuple(v) if isinstance(v, list) and k != "objects" else v
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Mover:
    id: int
    cx: float
    cy: float
    w: float
    h: float
    category: str
    color: str
    vx: float
    vy: float
    state: str
    turn_left: int = 0
    base_state: str = field(default="")

    def snapshot(self) -> SceneObject:
        r = lambda v: round(float(v), 12)  # noqa: E731 - keeps JSON output stable
        return SceneObject(
            self.id, (r(self.cx), r(self.cy), r(self.w), r(self.h)), self.category, self.color,
            (r(self.vx), r(self.vy)), self.state,
        )

    def inside(self) -> bool:
        eps = 1e-9
        return (
            self.cx - self.w / 2 >= -eps and self.cx + self.w / 2 <= 1 + eps
            and self.cy - self.h / 2 >= -eps and self.cy + self.h / 2 <= 1 + eps
        )


def _state_for(category: str, speed: float) -> str:
    if category == "car":
        return "moving" if speed else "parked"
    return "walking" if speed else "standing"


def _explicit_movers(cfg: SceneConfig) -> list[_Mover]:
    movers = []
    for i, spec in enumerate(cfg.objects):
        cx, cy, w, h = (float(v) for v in spec["box"])
        vx, vy = (float(v) for v in spec.get("speed", (0.0, 0.0)))
        cat = spec.get("cat", "car")
        state = spec.get("state") or _state_for(cat, vx or vy)
        m = _Mover(int(spec.get("id", i + 1)), cx, cy, w, h, cat, spec.get("color", "black"), vx, vy, state)
        m.base_state = state
        validate_object(m.snapshot())
        movers.append(m)
    return movers


class _LaneWorld:
    def __init__(self, cfg: SceneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.next_id = 1
        self.lanes = []
        for k in range(cfg.lanes):
            is_person = rng.random() < cfg.person_lane_prob
            cat = "person" if is_person else "car"
            static = rng.random() < cfg.static_lane_prob
            lo, hi = cfg.person_speed if is_person else cfg.car_speed
            speed = 0.0 if static else float(rng.uniform(lo, hi)) * (1 if rng.random() < 0.5 else -1)
            self.lanes.append({"cy": (k + 0.5) / cfg.lanes, "cat": cat, "vx": speed})

    def size(self, cat):
        return self.cfg.car_size if cat == "car" else self.cfg.person_size

    def make(self, lane, cx) -> _Mover:
        w, h = self.size(lane["cat"])
        color = self.cfg.colors[int(self.rng.integers(len(self.cfg.colors)))]
        state = _state_for(lane["cat"], lane["vx"])
        m = _Mover(self.next_id, cx, lane["cy"], w, h, lane["cat"], color, lane["vx"], 0.0, state)
        m.base_state = state
        self.next_id += 1
        return m

    def free(self, lane, cx, movers) -> bool:
        w, _ = self.size(lane["cat"])
        gap = 0.05
        for m in movers:
            if abs(m.cy - lane["cy"]) < 1e-9 and abs(m.cx - cx) < (m.w + w) / 2 + gap:
                return False
        return True

    def populate(self) -> list[_Mover]:
        cfg, rng = self.cfg, self.rng
        target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        movers: list[_Mover] = []
        attempts = 0
        while len(movers) < target and attempts < 200:
            attempts += 1
            lane = self.lanes[int(rng.integers(len(self.lanes)))]
            w, _ = self.size(lane["cat"])
            cx = float(rng.uniform(w / 2, 1 - w / 2))
            if self.free(lane, cx, movers):
                movers.append(self.make(lane, cx))
        return movers

    def spawn(self, movers) -> None:
        cfg, rng = self.cfg, self.rng
        for lane in self.lanes:
            if lane["vx"] == 0 or len(movers) >= cfg.max_objects:
                continue
            if rng.random() >= cfg.spawn_prob:
                continue
            w, _ = self.size(lane["cat"])
            cx = w / 2 if lane["vx"] > 0 else 1 - w / 2
            if self.free(lane, cx, movers):
                movers.append(self.make(lane, cx))


def gen_scenes(config: SceneConfig, seed: int) -> list[SceneFrame]:
    """Generate ``config.frames`` frames; identical (config, seed) give identical frames."""
    config.validate()
    rng = np.random.default_rng(seed)
    world = None
    if config.objects is not None:
        movers = _explicit_movers(config)
    else:
        world = _LaneWorld(config, rng)
        movers = world.populate()

    frames = []
    for t in range(config.frames):
        frames.append(SceneFrame(t, tuple(m.snapshot() for m in sorted(movers, key=lambda m: m.id))))
        for m in movers:
            if m.turn_left == 0 and m.category == "car" and m.vx and config.turn_prob > 0:
                if rng.random() < config.turn_prob:
                    m.turn_left = config.turn_frames
                    left = rng.random() < 0.5
                    m.state = "turning-left" if left else "turning-right"
                    # image y points down; a left turn while heading +x drifts upward
                    m.vy = (-1 if left else 1) * abs(m.vx) * 0.5 * (1 if m.vx > 0 else -1)
            m.cx += m.vx
            m.cy += m.vy
            if m.turn_left:
                m.turn_left -= 1
                if m.turn_left == 0:
                    m.vy = 0.0
                    m.state = m.base_state
        movers = [m for m in movers if m.inside()]
        if world is not None:
            world.spawn(movers)
    return frames


def write_scenes(frames: Iterable[SceneFrame], path: str | Path) -> None:
    lines = [json.dumps(f.to_json(), sort_keys=True) for f in frames]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scenes(path: str | Path) -> list[SceneFrame]:
    frames = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            frames.append(SceneFrame.from_json(json.loads(line)))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}:{lineno}: malformed scene row ({exc})") from exc
    return frames


def write_referred(ids_per_frame: Iterable[tuple[int, Iterable[int]]], path: str | Path) -> None:
    lines = [json.dumps({"t": t, "ids": sorted(int(i) for i in ids)}) for t, ids in ids_per_frame]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_referred(path: str | Path) -> dict[int, set[int]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            out[int(row["t"])] = {int(i) for i in row["ids"]}
    return out
