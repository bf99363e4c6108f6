"""Room scenes: geometry, validation, text file format and a randomiser.

Rooms are axis-aligned boxes ``[0, Lx] x [0, Ly] x [0, Lz]`` with ``z`` up.
The sensor rig (speaker, two ears, camera) shares the camera orientation:
the ears sit at ``emitter +/- baseline/2 * right`` with
``right = forward x up``.
"""
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DEFAULT_BASELINE = 0.235


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extent: tuple
    absorption: float = 0.3

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center, float) - np.asarray(self.half_extent, float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center, float) + np.asarray(self.half_extent, float)

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, float)
        return bool(np.all(p >= self.lo - margin) and np.all(p <= self.hi + margin))


@dataclass(frozen=True)
class RoomScene:
    room_size: tuple
    emitter: tuple
    camera_position: tuple
    camera_forward: tuple = (1.0, 0.0, 0.0)
    camera_up: tuple = (0.0, 0.0, 1.0)
    obstacles: tuple = field(default_factory=tuple)
    wall_absorption: float = 0.3
    receiver_baseline: float = DEFAULT_BASELINE
    rng_seed: int = 0

    # -- derived geometry -------------------------------------------------

    @property
    def forward(self) -> np.ndarray:
        f = np.asarray(self.camera_forward, float)
        return f / np.linalg.norm(f)

    @property
    def up(self) -> np.ndarray:
        # Gram-Schmidt against forward so the rig frame is orthonormal
        u = np.asarray(self.camera_up, float)
        f = self.forward
        u = u - np.dot(u, f) * f
        return u / np.linalg.norm(u)

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.forward, self.up)

    def receivers(self) -> dict:
        e = np.asarray(self.emitter, float)
        half = 0.5 * self.receiver_baseline * self.right
        return {"left": e - half, "right": e + half}

    # -- checks -----------------------------------------------------------

    def validate(self) -> "RoomScene":
        size = np.asarray(self.room_size, float)
        if size.shape != (3,) or np.any(size <= 0):
            raise SceneError("room_size must be three positive lengths")
        if not 0 <= self.wall_absorption <= 1:
            raise SceneError("wall_absorption must lie in [0, 1]")
        if self.receiver_baseline < 0:
            raise SceneError("receiver_baseline must be non-negative")
        f = np.asarray(self.camera_forward, float)
        u = np.asarray(self.camera_up, float)
        if np.linalg.norm(f) == 0 or np.linalg.norm(np.cross(f, u)) < 1e-9:
            raise SceneError("camera forward/up must be non-zero and not parallel")
        for i, box in enumerate(self.obstacles):
            if not 0 <= box.absorption <= 1:
                raise SceneError(f"obstacle {i}: absorption outside [0, 1]")
            if np.any(np.asarray(box.half_extent, float) <= 0):
                raise SceneError(f"obstacle {i}: half extents must be positive")
            if np.any(box.lo < 0) or np.any(box.hi > size):
                raise SceneError(f"obstacle {i} is not fully inside the room")
        points = {"emitter": np.asarray(self.emitter, float), **self.receivers()}
        for name, p in points.items():
            if np.any(p <= 0) or np.any(p >= size):
                raise SceneError(f"{name} is outside the room")
            for i, box in enumerate(self.obstacles):
                if box.contains(p):
                    raise SceneError(f"{name} is inside obstacle {i}")
        return self

    def camera_inside_obstacle(self) -> bool:
        return any(box.contains(self.camera_position) for box in self.obstacles)

    # -- text format ------------------------------------------------------

    def to_text(self) -> str:
        def vec(v):
            return " ".join(repr(float(x)) for x in v)

        lines = [
            f"room_size = {vec(self.room_size)}",
            f"wall_absorption = {float(self.wall_absorption)!r}",
            f"emitter = {vec(self.emitter)}",
            f"receiver_baseline = {float(self.receiver_baseline)!r}",
            f"camera_position = {vec(self.camera_position)}",
            f"camera_forward = {vec(self.camera_forward)}",
            f"camera_up = {vec(self.camera_up)}",
            f"rng_seed = {int(self.rng_seed)}",
        ]
        for box in self.obstacles:
            lines.append(f"obstacle = {vec(box.center)} {vec(box.half_extent)} "
                         f"{float(box.absorption)!r}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


_VECTOR_KEYS = ("room_size", "emitter", "camera_position", "camera_forward", "camera_up")
_SCALAR_KEYS = ("wall_absorption", "receiver_baseline")


def parse_scene(text: str) -> RoomScene:
    """Parse the ``key = value`` scene format written by :meth:`RoomScene.to_text`.

    Blank lines and ``#`` comments are ignored.  ``obstacle`` may repeat and
    takes seven numbers: centre (3), half extent (3), absorption.
    """
    kwargs = {}
    obstacles = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            nums = [float(x) for x in value.split()]
        except ValueError:
            raise SceneError(f"line {lineno}: non-numeric value {value!r}") from None
        if key in _VECTOR_KEYS:
            if len(nums) != 3:
                raise SceneError(f"line {lineno}: {key} needs 3 numbers")
            kwargs[key] = tuple(nums)
        elif key in _SCALAR_KEYS:
            if len(nums) != 1:
                raise SceneError(f"line {lineno}: {key} needs 1 number")
            kwargs[key] = nums[0]
        elif key == "rng_seed":
            kwargs[key] = int(nums[0])
        elif key == "obstacle":
            if len(nums) != 7:
                raise SceneError(f"line {lineno}: obstacle needs 7 numbers")
            obstacles.append(Box(tuple(nums[:3]), tuple(nums[3:6]), nums[6]))
        else:
            raise SceneError(f"line {lineno}: unknown key {key!r}")
    for key in ("room_size", "emitter"):
        if key not in kwargs:
            raise SceneError(f"missing required key {key!r}")
    kwargs.setdefault("camera_position", kwargs["emitter"])
    return RoomScene(obstacles=tuple(obstacles), **kwargs).validate()


def load_scene(path) -> RoomScene:
    return parse_scene(Path(path).read_text())


def random_scene(seed: int, max_obstacles: int = 6) -> RoomScene:
    """Random shoebox room with 0-6 floor-standing boxes.

    Room lengths are U[3, 10] m per axis and all absorptions U[0.1, 0.6].
    Boxes are dropped mostly in front of the rig so they show up in the
    camera image.
    """
    rng = np.random.default_rng(seed)
    size = rng.uniform(3.0, 10.0, size=3)
    margin = 0.5
    height = rng.uniform(0.3, min(1.5, size[2] - margin))
    pos = np.array([rng.uniform(margin, size[0] - margin),
                    rng.uniform(margin, size[1] - margin), height])
    yaw = rng.uniform(0, 2 * np.pi)
    forward = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    base = RoomScene(room_size=tuple(size), emitter=tuple(pos), camera_position=tuple(pos),
                     camera_forward=tuple(forward), wall_absorption=rng.uniform(0.1, 0.6),
                     rng_seed=int(seed))
    ears = list(base.receivers().values()) + [pos]
    lateral = base.right

    boxes = []
    n_boxes = rng.integers(0, max_obstacles + 1)
    attempts = 0
    while len(boxes) < n_boxes and attempts < 50 * (n_boxes + 1):
        attempts += 1
        half = np.array([rng.uniform(0.15, 1.0), rng.uniform(0.15, 1.0),
                         rng.uniform(0.2, min(1.0, size[2] / 2 - 0.05))])
        c = pos + forward * rng.uniform(1.0, 6.0) + lateral * rng.uniform(-3.0, 3.0)
        c[2] = half[2]
        c[:2] = np.clip(c[:2], half[:2], size[:2] - half[:2])
        box = Box(tuple(c), tuple(half), float(rng.uniform(0.1, 0.6)))
        if np.any(box.lo < 0) or np.any(box.hi > size):
            continue
        if any(box.contains(p, margin=0.1) for p in ears):
            continue
        boxes.append(box)
    return replace(base, obstacles=tuple(boxes)).validate()
