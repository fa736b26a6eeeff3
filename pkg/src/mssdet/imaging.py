"""Grayscale images, lossless PGM/PPM I/O, bilinear resampling, and a
synthetic scene generator used for desk-scale detector experiments.

Images are single-channel luminance rasters with values in [0, 1].
Scenes come in two flavors:

* ``grounded``   -- a sky/ground split with a horizon line and perspective
  ground texture; every object rests on the ground plane, so its size is
  coupled to its vertical position (near objects are low and large).
* ``context-free`` -- the same objects dropped onto i.i.d. noise at
  positions and sizes drawn independently of each other.

The two modes share object and distractor rendering; they differ only in
the background pixels and in whether size and position are coupled.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .geometry import Box

__all__ = [
    "Image",
    "SceneSpec",
    "Placement",
    "ImageFormatError",
    "load_image",
    "save_pgm",
    "resize",
    "generate_scene",
    "save_scene_spec",
    "load_scene_spec",
]

# Luminance weights for RGB -> gray conversion (Rec. 601).
_LUMA = (0.299, 0.587, 0.114)

# Object appearance: a square split into 2x2 uniform quadrants
# (dark/bright checker), giving it learnable internal structure.
_OBJ_DARK = 0.15
_OBJ_BRIGHT = 0.85

# Distractor appearance: a square split into a dark left and bright right
# half.  Locally distinguishable from the checker object, so appearance
# alone suffices to reject it; it never enters the ground truth.
_CLUTTER_DARK = 0.25
_CLUTTER_BRIGHT = 0.75

# Grounded-scene layout constants.
_HORIZON_FRAC = 0.32     # horizon row as a fraction of canvas height
_SKY_LEVEL = 0.72
_GROUND_LEVEL = 0.45
_GROUND_RATE = 0.55      # object height = (bottom - horizon) / _GROUND_RATE
_NOISE_SIGMA = 0.02

# Base object side in pixels at placement scale factor 1.0.
OBJECT_BASE_SIDE = 32


class ImageFormatError(ValueError):
    """Raised for malformed PGM/PPM data; carries the failing byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Image:
    """Immutable single-channel raster with luminance values in [0, 1]."""

    width: int
    height: int
    pixels: np.ndarray  # shape (height, width), float64, read-only

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if px.shape != (self.height, self.width):
            raise ValueError(
                f"pixel buffer shape {px.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite pixels")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)


@dataclass(frozen=True)
class Placement:
    """One planted object: center position and scale factor.

    In grounded mode the vertical position is derived from the scale
    factor (objects rest on the ground plane) and ``cy`` is ignored.
    """

    cx: float
    cy: float
    scale: float


@dataclass(frozen=True)
class SceneSpec:
    """One scene: true objects plus three distractor populations.

    ``clutter`` squares carry a half/half bar pattern (locally
    distinguishable from objects).  ``lookalikes`` reuse the object's
    exact pattern and ``inverted`` its phase-swapped variant; both are
    placed with position and size drawn independently, so in grounded
    scenes they sit off the ground plane or at the wrong size for their
    depth and only scene context separates them from real objects.
    """

    width: int
    height: int
    placements: tuple = ()
    context_mode: str = "grounded"  # "grounded" | "context-free"
    clutter: int = 0
    lookalikes: int = 0
    inverted: int = 0
    confuser_scales: tuple = (1.0,)
    seed: int = 0

    def __post_init__(self):
        if self.context_mode not in ("grounded", "context-free"):
            raise ValueError(f"unknown context mode {self.context_mode!r}")
        for p in self.placements:
            if p.scale <= 0:
                raise ValueError("object scale factor must be positive")
        object.__setattr__(self, "placements", tuple(self.placements))
        object.__setattr__(self, "confuser_scales", tuple(self.confuser_scales))


# ---------------------------------------------------------------------------
# PGM / PPM I/O
# ---------------------------------------------------------------------------


def _read_header_token(data, pos):
    """Read one whitespace-delimited header token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise ImageFormatError("unexpected end of header", pos)
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], start, pos


def _read_header_int(data, pos, what):
    token, start, pos = _read_header_token(data, pos)
    if not re.fullmatch(rb"\d+", token):
        raise ImageFormatError(f"invalid {what} field {token!r}", start)
    return int(token), pos


def load_image(path) -> Image:
    """Load a binary PGM (P5) or PPM (P6, converted to luminance) file.

    Values are normalized to [0, 1]. Only maxval 255 is supported.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    if len(data) < 2:
        raise ImageFormatError("file too short for a magic number", 0)
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}", 0)

    pos = 2
    width, pos = _read_header_int(data, pos, "width")
    height, pos = _read_header_int(data, pos, "height")
    maxval, pos = _read_header_int(data, pos, "maxval")
    if width < 1 or height < 1:
        raise ImageFormatError(f"degenerate dimensions {width}x{height}", 2)
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}", pos)
    # Exactly one whitespace byte separates the header from the payload.
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace before payload", pos)
    pos += 1

    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise ImageFormatError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}",
            pos + len(payload),
        )

    raw = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    if channels == 1:
        gray = raw.reshape(height, width)
    else:
        rgb = raw.reshape(height, width, 3)
        gray = _LUMA[0] * rgb[:, :, 0] + _LUMA[1] * rgb[:, :, 1] + _LUMA[2] * rgb[:, :, 2]
    return Image(width=width, height=height, pixels=gray / 255.0)


def save_pgm(img: Image, path):
    """Write a binary PGM (P5, maxval 255). Round-trips losslessly with
    images whose pixels are multiples of 1/255."""
    quantized = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantized.tobytes())


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def resize(img: Image, factor: float) -> Image:
    """Bilinear resampling with half-pixel center alignment.

    Output dimensions are round(input * factor), ties to even.  Source
    coordinates are clamped at the border, so constants are preserved
    exactly and factor 1.0 is the identity.
    """
    if not factor > 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    out_w = int(np.round(img.width * factor))
    out_h = int(np.round(img.height * factor))
    if out_w < 1 or out_h < 1:
        raise ValueError(
            f"resize factor {factor} collapses {img.width}x{img.height} below 1x1"
        )
    if out_w == img.width and out_h == img.height:
        return img

    src = img.pixels
    ys = _sample_coords(out_h, img.height)
    xs = _sample_coords(out_w, img.width)

    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return Image(width=out_w, height=out_h, pixels=np.clip(out, 0.0, 1.0))


def _sample_coords(out_dim, in_dim):
    # Half-pixel centers mapped by the actual axis ratio, clamped inside.
    coords = (np.arange(out_dim) + 0.5) * (in_dim / out_dim) - 0.5
    return np.clip(coords, 0.0, in_dim - 1)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


def _horizon_row(height):
    return int(round(height * _HORIZON_FRAC))


def object_side(scale: float) -> int:
    """Pixel side length of an object square at a given scale factor."""
    return int(np.round(OBJECT_BASE_SIDE * scale))


def grounded_bottom(height: int, side: int) -> int:
    """Row of an object's bottom edge when resting on the ground plane."""
    return _horizon_row(height) + int(np.round(_GROUND_RATE * side))


def _paint_object(canvas, cx, cy, side, inverted=False):
    """Draw the 2x2 checker square centered at (cx, cy); returns its box."""
    lo, hi = (_OBJ_BRIGHT, _OBJ_DARK) if inverted else (_OBJ_DARK, _OBJ_BRIGHT)
    x1 = int(np.round(cx - side / 2.0))
    y1 = int(np.round(cy - side / 2.0))
    x2, y2 = x1 + side, y1 + side
    h = side // 2
    canvas[y1:y1 + h, x1:x1 + h] = lo
    canvas[y1:y1 + h, x1 + h:x2] = hi
    canvas[y1 + h:y2, x1:x1 + h] = hi
    canvas[y1 + h:y2, x1 + h:x2] = lo
    return Box(x1=float(x1), y1=float(y1), x2=float(x2), y2=float(y2))


def _paint_clutter(canvas, cx, cy, side):
    x1 = int(np.round(cx - side / 2.0))
    y1 = int(np.round(cy - side / 2.0))
    x2, y2 = x1 + side, y1 + side
    h = side // 2
    canvas[y1:y2, x1:x1 + h] = _CLUTTER_DARK
    canvas[y1:y2, x1 + h:x2] = _CLUTTER_BRIGHT


def _grounded_background(w, h):
    canvas = np.empty((h, w))
    yh = _horizon_row(h)
    canvas[:yh, :] = _SKY_LEVEL
    canvas[yh:, :] = _GROUND_LEVEL
    # Perspective ground texture: horizontal stripes whose period grows
    # with distance below the horizon, so local texture frequency encodes
    # depth (and therefore expected object size).
    depth = np.arange(h - yh, dtype=np.float64)
    period = 2.0 + depth / 6.0
    phase = np.floor(np.cumsum(1.0 / period)) % 2
    stripe = np.where(phase > 0, 0.06, -0.06)
    canvas[yh:, :] += stripe[:, None]
    # Dark horizon line.
    canvas[yh:yh + 2, :] = 0.20
    return canvas


def _context_free_background(w, h, rng):
    return np.clip(rng.normal(0.55, 0.08, size=(h, w)), 0.0, 1.0)


def _conflicts(cx, cy, side, others):
    for ox, oy, oside in others:
        gap = 0.6 * (side + oside) / 2.0
        if abs(cx - ox) < gap + oside / 2.0 and abs(cy - oy) < gap + oside / 2.0:
            return True
    return False


def _place_confusers(spec, rng, planned):
    """Positions for lookalike/inverted squares: uniform over the canvas
    with size drawn independently.  In grounded mode, spots that would
    accidentally satisfy the ground-plane coupling are resampled so only
    context (not appearance) separates confusers from objects."""
    spots = []
    taken = list(planned)
    for kind, count in (("lookalike", spec.lookalikes), ("inverted", spec.inverted)):
        for _ in range(count):
            for _ in range(30):
                scale = float(
                    spec.confuser_scales[int(rng.integers(len(spec.confuser_scales)))]
                )
                side = object_side(scale)
                if side >= min(spec.width, spec.height) - 4:
                    continue
                cx = float(rng.uniform(side / 2.0 + 1, spec.width - side / 2.0 - 1))
                cy = float(rng.uniform(side / 2.0 + 1, spec.height - side / 2.0 - 1))
                if spec.context_mode == "grounded":
                    coupled = grounded_bottom(spec.height, side) - side / 2.0
                    if abs(cy - coupled) < 0.5 * side:
                        continue
                if _conflicts(cx, cy, side, taken):
                    continue
                taken.append((cx, cy, side))
                spots.append((kind, cx, cy, side))
                break
    return spots


def generate_scene(spec: SceneSpec):
    """Render a scene; returns (Image, list of ground-truth boxes).

    Deterministic for a fixed spec (the seed drives distractor placement
    and pixel noise).  Grounded mode derives each object's vertical
    position from its size so that it rests on the ground plane;
    context-free mode honors the placement's cy and couples nothing.
    """
    w, h = spec.width, spec.height
    rng = np.random.default_rng(spec.seed)

    if spec.context_mode == "grounded":
        canvas = _grounded_background(w, h)
    else:
        canvas = _context_free_background(w, h, rng)

    boxes = []
    planned = []
    for p in spec.placements:
        side = object_side(p.scale)
        if spec.context_mode == "grounded":
            cy = grounded_bottom(h, side) - side / 2.0
        else:
            cy = p.cy
        planned.append((p.cx, cy, side))
        x1 = int(np.round(p.cx - side / 2.0))
        y1 = int(np.round(cy - side / 2.0))
        if x1 < 0 or y1 < 0 or x1 + side > w or y1 + side > h:
            raise ValueError(
                f"placement {p} (side {side}) falls outside the {w}x{h} canvas"
            )

    # Distractors first so true objects overpaint them on overlap.
    for _ in range(spec.clutter):
        side = int(rng.integers(OBJECT_BASE_SIDE // 2, OBJECT_BASE_SIDE * 2))
        cx = float(rng.uniform(side / 2.0, w - side / 2.0))
        cy = float(rng.uniform(side / 2.0, h - side / 2.0))
        _paint_clutter(canvas, cx, cy, side)

    for kind, cx, cy, side in _place_confusers(spec, rng, planned):
        _paint_object(canvas, cx, cy, side, inverted=(kind == "inverted"))

    for cx, cy, side in planned:
        boxes.append(_paint_object(canvas, cx, cy, side))

    canvas = canvas + rng.normal(0.0, _NOISE_SIGMA, size=(h, w))
    img = Image(width=w, height=h, pixels=np.clip(canvas, 0.0, 1.0))
    return img, boxes


# ---------------------------------------------------------------------------
# SceneSpec serialization (flat key=value text)
# ---------------------------------------------------------------------------


def save_scene_spec(spec: SceneSpec, path):
    lines = [
        f"width={spec.width}",
        f"height={spec.height}",
        f"context_mode={spec.context_mode}",
        f"clutter={spec.clutter}",
        f"seed={spec.seed}",
        "placements=" + ";".join(
            f"{p.cx:g},{p.cy:g},{p.scale:g}" for p in spec.placements
        ),
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene_spec(path) -> SceneSpec:
    values = parse_keyvalue_file(path)
    placements = []
    raw = values.get("placements", "")
    if raw:
        for part in raw.split(";"):
            cx, cy, s = (float(v) for v in part.split(","))
            placements.append(Placement(cx=cx, cy=cy, scale=s))
    return SceneSpec(
        width=int(values["width"]),
        height=int(values["height"]),
        placements=tuple(placements),
        context_mode=values.get("context_mode", "grounded"),
        clutter=int(values.get("clutter", 0)),
        seed=int(values.get("seed", 0)),
    )


def parse_keyvalue_file(path) -> dict:
    """Parse a flat key=value file; '#' starts a comment, blanks ignored."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values
