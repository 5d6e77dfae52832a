"""Synthetic captioned shapes: the desk-scale stand-in for image-caption pairs.

A scene is one or two coloured shapes on a plain background, each sitting in
its own cell of a 3x3 grid. The caption is generated from the scene by a
fixed grammar and :func:`parse_caption` inverts it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
BACKGROUNDS = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "gray": (0.5, 0.5, 0.5),
}
SIZES = {"small": 0.5, "big": 0.85}  # fraction of the half cell
POSITIONS = (
    "top left", "top", "top right",
    "left", "center", "right",
    "bottom left", "bottom", "bottom right",
)  # fmt: skip
SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]  # (row, col) in the 3x3 grid
    size: str = "big"

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.size not in SIZES:
            raise ValueError(f"bad object {self}")
        if not all(0 <= v < 3 for v in self.cell):
            raise ValueError(f"cell {self.cell} outside the 3x3 grid")

    @property
    def position(self) -> str:
        return POSITIONS[3 * self.cell[0] + self.cell[1]]

    def phrase(self) -> str:
        return f"a {self.size} {self.color} {self.shape} at {self.position}"


@dataclass(frozen=True)
class ShapeScene:
    objects: tuple[SceneObject, ...]
    background: str = "black"

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 2:
            raise ValueError("a scene holds one or two objects")
        if len({o.cell for o in self.objects}) != len(self.objects):
            raise ValueError("objects must occupy distinct cells")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")

    @property
    def caption(self) -> str:
        return " and ".join(o.phrase() for o in self.objects) + f" on {self.background}"

    def render(self, size: int = 32) -> np.ndarray:
        return render_scene(self, size)


_PHRASE = re.compile(
    rf"a ({'|'.join(SIZES)}) ({'|'.join(COLORS)}) ({'|'.join(SHAPES)}) at "
    rf"({'|'.join(sorted(POSITIONS, key=len, reverse=True))})"
)


def parse_caption(caption: str) -> ShapeScene:
    """Inverse of :attr:`ShapeScene.caption`."""
    body, sep, bg = caption.rpartition(" on ")
    if not sep:
        raise ValueError(f"caption has no background: {caption!r}")
    objects = []
    for part in body.split(" and "):
        m = _PHRASE.fullmatch(part)
        if m is None:
            raise ValueError(f"cannot parse {part!r}")
        size, color, shape, pos = m.groups()
        idx = POSITIONS.index(pos)
        objects.append(SceneObject(shape, color, divmod(idx, 3), size))
    return ShapeScene(tuple(objects), bg)


def sample_scene(rng: np.random.Generator) -> ShapeScene:
    n = int(rng.integers(1, 3))
    cells = rng.choice(9, size=n, replace=False)
    objects = tuple(
        SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=list(COLORS)[rng.integers(len(COLORS))],
            cell=divmod(int(c), 3),
            size=list(SIZES)[rng.integers(len(SIZES))],
        )
        for c in cells
    )
    return ShapeScene(objects, list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))])


def _coverage(obj: SceneObject, n: int) -> np.ndarray:
    """Boolean occupancy of ``obj`` on an ``n x n`` sample grid in unit coords."""
    c = (np.arange(n) + 0.5) / n
    y, x = np.meshgrid(c, c, indexing="ij")
    r, col = obj.cell
    cy, cx = (r + 0.5) / 3, (col + 0.5) / 3
    half = SIZES[obj.size] * 0.5 / 3
    dy, dx = y - cy, x - cx
    if obj.shape == "circle":
        return dx * dx + dy * dy <= half * half
    if obj.shape == "square":
        s = 0.8 * half
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    # upward triangle inscribed in the radius-``half`` disc
    top, base = -half, half * 0.5
    inside_y = (dy >= top) & (dy <= base)
    w = (dy - top) / (base - top) * half * np.sqrt(3) / 2
    return inside_y & (np.abs(dx) <= w)


def render_scene(scene: ShapeScene, size: int = 32) -> np.ndarray:
    """Anti-aliased ``(3, size, size)`` image in ``[-1, 1]``.

    Rendering happens on a supersampled grid and is box-filtered down.
    """
    if size < 3:
        raise ValueError("size must be >= 3")
    n = size * SUPERSAMPLE
    img = np.empty((3, n, n))
    img[:] = np.asarray(BACKGROUNDS[scene.background])[:, None, None]
    for obj in scene.objects:
        m = _coverage(obj, n)
        img[:, m] = np.asarray(COLORS[obj.color])[:, None]
    img = img.reshape(3, size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(2, 4))
    return img * 2.0 - 1.0


def generate_scene(rng: np.random.Generator, size: int = 32) -> tuple[ShapeScene, np.ndarray]:
    scene = sample_scene(rng)
    return scene, render_scene(scene, size)


def object_center(obj: SceneObject, size: int) -> tuple[int, int]:
    """Pixel index at the middle of the object's cell.

    From 32 px up this pixel lies wholly inside every shape and size, so it
    carries the exact object colour.
    """
    return (int((obj.cell[0] + 0.5) * size / 3), int((obj.cell[1] + 0.5) * size / 3))


class ShapeDataset:
    """Deterministic scenes: example ``i`` depends only on ``(seed, split, i)``."""

    def __init__(self, seed: int = 0, size: int = 32, split: int = 0):
        self.seed = seed
        self.size = size
        self.split = split

    def example(self, i: int) -> tuple[ShapeScene, np.ndarray]:
        return generate_scene(np.random.default_rng([self.seed, self.split, i]), self.size)

    def batch(self, indices) -> tuple[list[str], np.ndarray]:
        pairs = [self.example(int(i)) for i in indices]
        return [s.caption for s, _ in pairs], np.stack([im for _, im in pairs])


# ---------------------------------------------------------------------------
# toy alignment metric: template matching per grid cell
# ---------------------------------------------------------------------------


def _cell_slice(cell: tuple[int, int], size: int) -> tuple[slice, slice]:
    r, c = cell
    return (slice(r * size // 3, (r + 1) * size // 3), slice(c * size // 3, (c + 1) * size // 3))


def detect_object(image: np.ndarray, cell: tuple[int, int], background: str) -> tuple[str, str]:
    """Nearest rendered reference (shape, colour) for the crop at ``cell``."""
    size = image.shape[-1]
    rs, cs = _cell_slice(cell, size)
    crop = np.clip(image, -1.0, 1.0)[:, rs, cs]
    best, best_err = None, np.inf
    for shape in SHAPES:
        for color in COLORS:
            for sz in SIZES:
                ref = render_scene(ShapeScene((SceneObject(shape, color, cell, sz),), background), size)
                err = float(np.sum((ref[:, rs, cs] - crop) ** 2))
                if err < best_err:
                    best, best_err = (shape, color), err
    return best


def scene_detected(image: np.ndarray, scene: ShapeScene) -> bool:
    return all(detect_object(image, o.cell, scene.background) == (o.shape, o.color) for o in scene.objects)


def alignment_accuracy(images, scenes) -> float:
    if len(images) != len(scenes) or not len(scenes):
        raise ValueError("need equally many images and scenes, at least one")
    return float(np.mean([scene_detected(im, s) for im, s in zip(images, scenes)]))
