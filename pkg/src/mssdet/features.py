"""Gradient-histogram features, feature pyramids, window reads, and the
MSSFP on-disk pyramid format.

The feature is the 31-channel gradient histogram variant widely used by
rigid-template detectors, computed here on luminance only:

* channels 0-17: contrast-sensitive orientation bins (18 bins over 2*pi),
* channels 18-26: contrast-insensitive bins (opposing pairs summed),
* channels 27-30: gradient-energy features of the four neighboring 2x2
  cell groups, in NW/NE/SW/SE order.

Gradients are centered differences; each pixel votes bilinearly into the
two nearest orientation bins and the four surrounding cells.  Cells are
normalized by each of their four 2x2 neighborhood energies with values
clipped at 0.2; border cells clamp neighborhood indices to the grid.

Pyramid levels are built from resampled copies of the image with a fixed
level-to-level scale ratio of 2**(-1/2).  Padding (zero or replicate) is
a pyramid attribute applied lazily when windows are read, so maps are
stored unpadded and the same levels can serve either policy.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import PyramidLocation, map_location
from .imaging import Image, resize
from .parallel import parallel_map

__all__ = [
    "HOG_CHANNELS",
    "FeatureMap",
    "FeaturePyramid",
    "PyramidFormatError",
    "extract_hog",
    "build_pyramid",
    "level_scale",
    "read_window",
    "read_windows",
    "export_pyramid",
    "import_pyramid",
]

HOG_CHANNELS = 31
ORIENTATIONS = 18

_CLIP = 0.2
_NORM_EPS = 1e-10
_ENERGY_SCALE = 1.0 / np.sqrt(ORIENTATIONS)

PADDING_MODES = ("zero", "replicate")
_PAD_CODE = {"zero": 0, "replicate": 1}
_PAD_NAME = {v: k for k, v in _PAD_CODE.items()}

MSSFP_MAGIC = b"MSSFP1\x00"

# Feature-kind tags recorded in model files.
FEATURE_KINDS = ("hog", "imported")


class PyramidFormatError(ValueError):
    """Raised for malformed MSSFP pyramid files."""


@dataclass(frozen=True)
class FeatureMap:
    """One pyramid level: a cells_high x cells_wide grid of d-channel
    feature vectors, stored row-major by cell, channel-minor."""

    cells_wide: int
    cells_high: int
    channels: int
    values: np.ndarray  # shape (cells_high, cells_wide, channels), read-only

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.shape != (self.cells_high, self.cells_wide, self.channels):
            raise ValueError(
                f"value buffer shape {vals.shape} does not match "
                f"{self.cells_high}x{self.cells_wide}x{self.channels}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature map contains non-finite values")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def flat(self):
        return self.values.reshape(-1)


@dataclass(frozen=True)
class FeaturePyramid:
    """Feature maps over resampled copies of one image.

    ``requested_levels`` records how many levels were asked for; the
    pyramid is truncated (with ``truncated`` set) when coarser levels
    would fall below the minimum feature-extraction size.
    """

    levels: tuple
    scales: np.ndarray  # per-level image scale factor, scales[0] == 1
    cell_stride: tuple  # (cx, cy) image pixels per feature cell
    padding: str
    requested_levels: int
    feature_kind: str = "hog"

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("a pyramid needs at least one level")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"unknown padding mode {self.padding!r}")
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.feature_kind!r}")
        scales = np.asarray(self.scales, dtype=np.float64)
        if len(scales) != len(self.levels):
            raise ValueError("scale list does not match level count")
        if abs(scales[0] - 1.0) > 1e-9:
            raise ValueError(f"level 0 must be original resolution, scale {scales[0]}")
        ratios = scales[1:] / scales[:-1]
        if np.any(np.abs(ratios - 2.0 ** -0.5) > 1e-9):
            raise ValueError("level scales must step by 2**(-1/2)")
        d = self.levels[0].channels
        if any(lvl.channels != d for lvl in self.levels):
            raise ValueError("levels disagree on channel count")
        scales.flags.writeable = False
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "levels", tuple(self.levels))

    @property
    def S(self):
        return len(self.levels)

    @property
    def d(self):
        return self.levels[0].channels

    @property
    def truncated(self):
        return self.S < self.requested_levels

    def with_padding(self, padding: str) -> "FeaturePyramid":
        """Same levels under a different padding policy (maps are shared)."""
        if padding == self.padding:
            return self
        return dataclasses.replace(self, padding=padding)


def level_scale(s) -> float:
    """Image scale factor of pyramid level ``s``."""
    return 2.0 ** (-np.asarray(s) / 2.0)


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


def extract_hog(img: Image, cell_size: int = 8) -> FeatureMap:
    """31-channel gradient-histogram features on a cell grid of
    floor(image dims / cell_size).  A constant image yields all zeros."""
    if img.width < 2 * cell_size or img.height < 2 * cell_size:
        raise ValueError(
            f"image {img.width}x{img.height} smaller than two "
            f"{cell_size}-pixel cells"
        )
    hist = _cell_histograms(img.pixels, cell_size)
    feats = _normalize_cells(hist)
    ch, cw, _ = feats.shape
    return FeatureMap(cells_wide=cw, cells_high=ch, channels=HOG_CHANNELS, values=feats)


def _cell_histograms(pixels: np.ndarray, cell: int) -> np.ndarray:
    """Unnormalized per-cell orientation histograms, shape (ch, cw, 18).

    Gradients use centered differences over interior pixels; magnitude is
    split linearly between the two nearest orientation bins and
    bilinearly among the four cells surrounding the pixel.  Votes to
    cells outside the grid are dropped.
    """
    h, w = pixels.shape
    cw, ch = w // cell, h // cell

    dx = pixels[1:-1, 2:] - pixels[1:-1, :-2]
    dy = pixels[2:, 1:-1] - pixels[:-2, 1:-1]
    mag = np.hypot(dx, dy).ravel()
    ang = np.arctan2(dy, dx).ravel() % (2.0 * np.pi)

    o = ang * (ORIENTATIONS / (2.0 * np.pi))
    o0 = np.floor(o).astype(np.intp) % ORIENTATIONS
    ofrac = o - np.floor(o)
    o1 = (o0 + 1) % ORIENTATIONS

    ys, xs = np.mgrid[1 : h - 1, 1 : w - 1]
    xp = (xs.ravel() + 0.5) / cell - 0.5
    yp = (ys.ravel() + 0.5) / cell - 0.5
    ix = np.floor(xp).astype(np.intp)
    iy = np.floor(yp).astype(np.intp)
    fx = xp - ix
    fy = yp - iy

    hist = np.zeros(ch * cw * ORIENTATIONS)
    for cyi, wy in ((iy, 1.0 - fy), (iy + 1, fy)):
        for cxi, wx in ((ix, 1.0 - fx), (ix + 1, fx)):
            valid = (cyi >= 0) & (cyi < ch) & (cxi >= 0) & (cxi < cw)
            if not valid.any():
                continue
            base = (cyi[valid] * cw + cxi[valid]) * ORIENTATIONS
            wgt = (wy * wx * mag)[valid]
            hist += np.bincount(
                base + o0[valid], weights=wgt * (1.0 - ofrac[valid]),
                minlength=hist.size,
            )
            hist += np.bincount(
                base + o1[valid], weights=wgt * ofrac[valid],
                minlength=hist.size,
            )
    return hist.reshape(ch, cw, ORIENTATIONS)


def _normalize_cells(hist: np.ndarray) -> np.ndarray:
    """Block-normalize histograms into the 31-channel layout."""
    ch, cw, _ = hist.shape
    insensitive = hist[:, :, :9] + hist[:, :, 9:]
    energy = np.sum(insensitive**2, axis=2)

    # 2x2 neighborhood energies with border cells clamped to the grid.
    eext = np.pad(energy, 1, mode="edge")
    blk = eext[:-1, :-1] + eext[:-1, 1:] + eext[1:, :-1] + eext[1:, 1:]
    norms = np.stack(
        [blk[:-1, :-1], blk[:-1, 1:], blk[1:, :-1], blk[1:, 1:]], axis=2
    )
    inv = 1.0 / np.sqrt(norms + _NORM_EPS)  # (ch, cw, 4)

    sens = np.minimum(hist[:, :, :, None] * inv[:, :, None, :], _CLIP)
    insens = np.minimum(insensitive[:, :, :, None] * inv[:, :, None, :], _CLIP)

    out = np.empty((ch, cw, HOG_CHANNELS))
    out[:, :, :18] = 0.5 * sens.sum(axis=3)
    out[:, :, 18:27] = 0.5 * insens.sum(axis=3)
    out[:, :, 27:] = _ENERGY_SCALE * sens.sum(axis=2)
    return out


# ---------------------------------------------------------------------------
# Pyramid construction and window reads
# ---------------------------------------------------------------------------


def build_pyramid(
    img: Image, levels: int, cell_size: int = 8, padding: str = "zero"
) -> FeaturePyramid:
    """Build a feature pyramid with levels scaled by 2**(-s/2).

    Levels whose resampled image would drop below two cells per side are
    not built; the returned pyramid records the requested level count so
    callers can detect the truncation.
    """
    if levels < 1:
        raise ValueError(f"level count must be >= 1, got {levels}")

    buildable = []
    for s in range(levels):
        scale = float(level_scale(s))
        sw = int(np.round(img.width * scale))
        sh = int(np.round(img.height * scale))
        if sw < 2 * cell_size or sh < 2 * cell_size:
            break
        buildable.append(scale)
    if not buildable:
        raise ValueError(
            f"image {img.width}x{img.height} too small for even one "
            f"{cell_size}-pixel-cell level"
        )

    def build_level(scale):
        return extract_hog(resize(img, scale), cell_size)

    maps = parallel_map(build_level, buildable)
    return FeaturePyramid(
        levels=tuple(maps),
        scales=np.array(buildable),
        cell_stride=(cell_size, cell_size),
        padding=padding,
        requested_levels=levels,
    )


def read_windows(
    fmap: FeatureMap, anchors: np.ndarray, template_dims, padding: str
) -> np.ndarray:
    """Gather template windows at integer cell anchors, shape (N, tw*th*d).

    Cells outside the map are zero under "zero" padding and copy the
    nearest edge cell under "replicate"; reads are total either way.
    Output cell order is row-major, channel-minor.
    """
    tw, th = template_dims
    anchors = np.asarray(anchors, dtype=np.intp).reshape(-1, 2)
    vals = fmap.values
    xs = anchors[:, 0][:, None] + np.arange(tw)[None, :]  # (N, tw)
    ys = anchors[:, 1][:, None] + np.arange(th)[None, :]  # (N, th)
    xc = np.clip(xs, 0, fmap.cells_wide - 1)
    yc = np.clip(ys, 0, fmap.cells_high - 1)
    block = vals[yc[:, :, None], xc[:, None, :], :]  # (N, th, tw, d)
    if padding == "zero":
        inside = (
            ((ys >= 0) & (ys < fmap.cells_high))[:, :, None]
            & ((xs >= 0) & (xs < fmap.cells_wide))[:, None, :]
        )
        block = block * inside[..., None]
    elif padding != "replicate":
        raise ValueError(f"unknown padding mode {padding!r}")
    return block.reshape(len(anchors), th * tw * fmap.channels)


def read_window(pyr: FeaturePyramid, loc: PyramidLocation, template_dims) -> np.ndarray:
    """Flat descriptor of one template window in one pyramid level."""
    if not 0 <= loc.s < pyr.S:
        raise IndexError(f"level {loc.s} outside pyramid of {pyr.S} levels")
    fmap = pyr.levels[loc.s]
    return read_windows(
        fmap, np.array([[loc.x, loc.y]]), template_dims, pyr.padding
    )[0]


def read_multiscale(pyr: FeaturePyramid, center, template_dims) -> np.ndarray:
    """Stacked descriptor of template windows at every pyramid level,
    each centered (to the nearest cell) on the same image-space point.
    Blocks are concatenated in level order 0..S-1."""
    parts = []
    for s in range(pyr.S):
        loc = map_location(pyr.scales, pyr.cell_stride, center, s, template_dims)
        parts.append(read_window(pyr, loc, template_dims))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# MSSFP pyramid files
# ---------------------------------------------------------------------------

_MAX_CELLS = 1 << 31


def export_pyramid(pyr: FeaturePyramid, path):
    """Write an MSSFP file.  Values are stored as little-endian float32;
    exporting an imported pyramid reproduces its bytes exactly."""
    cx, cy = pyr.cell_stride
    with open(path, "wb") as fh:
        fh.write(MSSFP_MAGIC)
        fh.write(struct.pack("<5I", pyr.S, pyr.d, cx, cy, _PAD_CODE[pyr.padding]))
        for fmap, scale in zip(pyr.levels, pyr.scales):
            fh.write(struct.pack("<2Id", fmap.cells_wide, fmap.cells_high, scale))
            fh.write(fmap.values.astype("<f4").tobytes())


def import_pyramid(path) -> FeaturePyramid:
    """Read an MSSFP file written by :func:`export_pyramid` or by an
    external feature extractor."""
    with open(path, "rb") as fh:
        data = fh.read()

    if data[: len(MSSFP_MAGIC)] != MSSFP_MAGIC:
        raise PyramidFormatError(
            f"magic mismatch: expected {MSSFP_MAGIC!r}, found {data[:7]!r}"
        )
    pos = len(MSSFP_MAGIC)
    if len(data) < pos + 20:
        raise PyramidFormatError("truncated header")
    s_count, d, cx, cy, pad_code = struct.unpack_from("<5I", data, pos)
    pos += 20
    if s_count < 1:
        raise PyramidFormatError("pyramid declares zero levels")
    if pad_code not in _PAD_NAME:
        raise PyramidFormatError(f"unknown padding code {pad_code}")
    if d < 1:
        raise PyramidFormatError(f"invalid channel count {d}")

    maps = []
    scales = []
    for s in range(s_count):
        if len(data) < pos + 16:
            raise PyramidFormatError(
                f"level {s}: header truncated ({s_count} levels declared)"
            )
        cw, ch, scale = struct.unpack_from("<2Id", data, pos)
        pos += 16
        count = cw * ch * d
        if cw < 1 or ch < 1 or count > _MAX_CELLS:
            raise PyramidFormatError(f"level {s}: dimension overflow {cw}x{ch}x{d}")
        nbytes = count * 4
        if len(data) < pos + nbytes:
            raise PyramidFormatError(
                f"level {s}: descriptor payload needs {nbytes} bytes, "
                f"file has {len(data) - pos}"
            )
        vals = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        pos += nbytes
        maps.append(
            FeatureMap(
                cells_wide=cw,
                cells_high=ch,
                channels=d,
                values=vals.astype(np.float64).reshape(ch, cw, d),
            )
        )
        scales.append(scale)
    if pos != len(data):
        raise PyramidFormatError(
            f"{len(data) - pos} trailing bytes after {s_count} declared levels"
        )

    return FeaturePyramid(
        levels=tuple(maps),
        scales=np.array(scales),
        cell_stride=(cx, cy),
        padding=_PAD_NAME[pad_code],
        requested_levels=s_count,
        feature_kind="imported",
    )
