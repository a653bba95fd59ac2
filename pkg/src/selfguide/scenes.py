"""Procedural two-object scenes with parseable captions.

A scene is a 32x32 RGB image in [-1,1]: one or two colored shapes on a
mid-gray background, each described by three caption tokens (size
word, color word, shape word).  Rendering is 4x supersampled, so
object boundaries shade smoothly enough for property measurement.

Scene generation is a pure function of an integer seed.  Object
centers are drawn uniformly over the largest box that keeps the shape
fully on canvas; a second object re-rolls its position while it
overlaps the first, and after 20 failed tries the overlap is accepted
(two large shapes cannot always both fit) and the first object is
flagged occluded.
"""

from dataclasses import dataclass

import numpy as np

from .rng import stream

PAD, BOS, EOS = 0, 1, 2
COLOR_NAMES = ("red", "yellow", "green", "cyan", "blue", "magenta")
SHAPE_NAMES = ("disk", "square", "triangle", "diamond")
SIZE_NAMES = ("small", "large")
COLOR_BASE = 3
SHAPE_BASE = COLOR_BASE + len(COLOR_NAMES)
SIZE_BASE = SHAPE_BASE + len(SHAPE_NAMES)
VOCAB_SIZE = SIZE_BASE + len(SIZE_NAMES)  # 15
SEQ_LEN = 8
IMAGE_SIZE = 32

# sRGB palette, chosen pairwise far apart so nearest-color readout is stable
PALETTE = {
    "red": (200, 40, 40),
    "yellow": (230, 200, 50),
    "green": (60, 180, 75),
    "cyan": (60, 190, 200),
    "blue": (50, 80, 200),
    "magenta": (190, 60, 190),
}
BACKGROUND = np.zeros(3)  # mid-gray in [-1,1] units

SIZE_RANGES = {"small": (0.16, 0.21), "large": (0.24, 0.30)}

TOKENS = {name: COLOR_BASE + i for i, name in enumerate(COLOR_NAMES)}
TOKENS.update({name: SHAPE_BASE + i for i, name in enumerate(SHAPE_NAMES)})
TOKENS.update({name: SIZE_BASE + i for i, name in enumerate(SIZE_NAMES)})
TOKEN_NAMES = {v: k for k, v in TOKENS.items()}
TOKEN_NAMES.update({PAD: "<pad>", BOS: "<bos>", EOS: "<eos>"})


def color_value(name):
    """Palette color in image units ([-1,1] per channel)."""
    return np.asarray(PALETTE[name], dtype=np.float64) / 127.5 - 1.0


@dataclass
class SceneObject:
    size_word: str
    color: str
    shape: str
    center: tuple  # (x, y) normalized, x rightward, y downward
    radius: float
    u: tuple  # the uniform draws that produced the center
    angle: float = 0.0  # radians; polygon edges are kept off the pixel axes
    occluded: bool = False

    @property
    def circumradius(self):
        return self.radius * (np.sqrt(2.0) if self.shape == "square" else 1.0)

    def token_positions(self, index):
        """Caption positions of this object's three tokens."""
        base = 1 + 3 * index
        return (base, base + 1, base + 2)

    @property
    def tokens(self):
        return (TOKENS[self.size_word], TOKENS[self.color], TOKENS[self.shape])


def caption_tokens(objects):
    ids = [BOS]
    for o in objects:
        ids.extend(o.tokens)
    ids.append(EOS)
    ids.extend([PAD] * (SEQ_LEN - len(ids)))
    return np.asarray(ids, dtype=np.int64)


def _inside(shape, px, py, cx, cy, r, angle=0.0):
    """Boolean mask: which sample points fall inside the shape."""
    dx, dy = px - cx, py - cy
    if angle:
        ca, sa = np.cos(angle), np.sin(angle)
        dx, dy = ca * dx + sa * dy, -sa * dx + ca * dy
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "triangle":
        # upright equilateral triangle, circumradius r, apex at the top
        s = np.sqrt(3.0)
        return (s * dx - dy <= r) & (-s * dx - dy <= r) & (dy <= 0.5 * r)
    raise ValueError(f"unknown shape {shape!r}")


def _draw_angle(shape, rng):
    """Orientation that keeps every polygon edge at least ~8 deg off the
    pixel grid; grid-aligned edges make whole rows of boundary pixels
    round the same way and ruin area measurement."""
    if shape == "square":
        return np.deg2rad(10.0 + rng.random() * 25.0)
    if shape == "diamond":
        return np.deg2rad(-8.0 + rng.random() * 16.0)
    if shape == "triangle":
        return np.deg2rad(30.0 * rng.integers(4) + 8.0 + rng.random() * 14.0)
    return 0.0


def render_scene(objects, size=IMAGE_SIZE, supersample=4):
    ss = size * supersample
    coords = (np.arange(ss) + 0.5) / ss
    px, py = np.meshgrid(coords, coords)
    img = np.empty((ss, ss, 3))
    img[:] = BACKGROUND
    for o in objects:
        mask = _inside(o.shape, px, py, o.center[0], o.center[1], o.radius, o.angle)
        img[mask] = color_value(o.color)
    img = img.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
    return img.transpose(2, 0, 1).astype(np.float32)


def gen_scene(seed, render=True):
    """Deterministic scene: returns (image CxHxW, caption ids, objects).

    render=False skips rasterization (image is None); the geometry and
    caption are identical either way.
    """
    rng = stream(seed, "scene")
    n_obj = 1 + int(rng.random() < 0.5)
    objects = []
    colors_left = list(COLOR_NAMES)
    for i in range(n_obj):
        size_word = SIZE_NAMES[int(rng.random() < 0.5)]
        color = colors_left.pop(int(rng.integers(len(colors_left))))
        shape = SHAPE_NAMES[int(rng.integers(len(SHAPE_NAMES)))]
        lo, hi = SIZE_RANGES[size_word]
        r = lo + rng.random() * (hi - lo)
        angle = _draw_angle(shape, rng)
        m = r * (np.sqrt(2.0) if shape == "square" else 1.0)
        u = rng.random(2)
        center = tuple(m + u * (1.0 - 2.0 * m))
        overlapping = False
        if i == 1:
            prev = objects[0]
            for _ in range(20):
                d = np.hypot(center[0] - prev.center[0], center[1] - prev.center[1])
                if d > m + prev.circumradius + 0.02:
                    break
                u = rng.random(2)
                center = tuple(m + u * (1.0 - 2.0 * m))
            else:
                overlapping = True
        objects.append(SceneObject(size_word, color, shape, center, r, tuple(u), angle))
    # caption and z-order follow spatial order; on accepted overlap the
    # rightmost object is drawn on top, occluding the left one
    objects.sort(key=lambda o: o.center[0])
    if len(objects) == 2 and overlapping:
        objects[0].occluded = True
    image = render_scene(objects) if render else None
    return image, caption_tokens(objects), objects


def measure_object(image, color):
    """Centroid and area of the region nearest to `color` in the palette.

    image: CxHxW in [-1,1].  Returns ((x, y), area) with pixel-center
    coordinates and area as a fraction of the canvas.  Raises if no
    pixel reads as the color.
    """
    img = np.asarray(image, dtype=np.float64)
    c, h, w = img.shape
    refs = np.stack([color_value(n) for n in COLOR_NAMES] + [BACKGROUND])
    flat = img.reshape(c, -1).T
    d2 = ((flat[:, None, :] - refs[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    mask = (assign == COLOR_NAMES.index(color)).reshape(h, w)
    if not mask.any():
        raise ValueError(f"no pixels read as {color!r}")
    ys, xs = np.nonzero(mask)
    cx = ((xs + 0.5) / w).mean()
    cy = ((ys + 0.5) / h).mean()
    return (cx, cy), mask.sum() / (h * w)


def object_area(o):
    """Analytic area of an object's footprint, canvas fraction."""
    r = o.radius
    if o.shape == "disk":
        return np.pi * r * r
    if o.shape == "square":
        return 4.0 * r * r
    if o.shape == "diamond":
        return 2.0 * r * r
    if o.shape == "triangle":
        return 3.0 * np.sqrt(3.0) / 4.0 * r * r
    raise ValueError(f"unknown shape {o.shape!r}")


def export_dataset(path, count, start=0):
    """Write `count` scenes as PPM files plus a manifest.

    Layout: scene_00000.ppm ... under `path`, and manifest.tsv with one
    line per scene — index, object count, caption words, then per
    object its color, shape, size word, center, radius, and angle.
    Re-running with the same arguments rewrites identical bytes.
    """
    import os

    from .formats import write_ppm

    os.makedirs(path, exist_ok=True)
    lines = ["index\tn_objects\tcaption\tobjects"]
    for i in range(start, start + count):
        image, tokens, objects = gen_scene(i)
        write_ppm(os.path.join(path, f"scene_{i:05d}.ppm"), image)
        caption = " ".join(TOKEN_NAMES[t] for t in tokens if t > EOS)
        fields = ";".join(
            f"{o.color},{o.shape},{o.size_word},"
            f"{o.center[0]:.6f},{o.center[1]:.6f},{o.radius:.6f},{o.angle:.6f}"
            for o in objects)
        lines.append(f"{i}\t{len(objects)}\t{caption}\t{fields}")
    with open(os.path.join(path, "manifest.tsv"), "w") as f:
        f.write("\n".join(lines) + "\n")
