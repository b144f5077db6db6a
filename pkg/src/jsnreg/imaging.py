"""Joint image and mask types, raster I/O, loss-spectrum heatmaps.

Images and masks are exchanged as portable graymaps (``P2`` plain or ``P5``
binary, 8- or 16-bit). Spatial resolution may be embedded as a header
comment ``# resolution_mm_per_px <value>``. Other raster formats (PNG, TIFF)
are read through Pillow when the extension is not a netpbm one.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIN_SIZE = 16
NETPBM_SUFFIXES = {".pgm", ".pnm", ".ppm"}
_RES_RE = re.compile(r"resolution_mm_per_px\s*[:=]?\s*([0-9.eE+-]+)")


class ImageFormatError(ValueError):
    """Raised for unreadable, multi-channel, or otherwise unsupported rasters."""


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class JointImage:
    """Grayscale joint radiograph crop, intensities in [0, 1]."""

    pixels: np.ndarray
    resolution: float = 1.0
    identity: str = ""

    def __post_init__(self):
        px = _frozen(self.pixels, np.float64)
        if px.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {px.shape}")
        if px.shape[0] < MIN_SIZE or px.shape[1] < MIN_SIZE:
            raise ValueError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        if not (self.resolution > 0 and np.isfinite(self.resolution)):
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "resolution", float(self.resolution))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> "JointImage":
        """Same metadata, new intensity grid (clipped to [0, 1])."""
        return JointImage(np.clip(pixels, 0.0, 1.0), self.resolution, self.identity)


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    """Two-region label grid: 0 = upper bone region, 1 = lower bone region."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {lab.shape}")
        if not np.all((lab == 0) | (lab == 1)):
            raise ValueError("mask values must be 0 or 1")
        lab = _frozen(lab, np.uint8)
        if lab.min() == lab.max():
            raise ValueError("single-region mask: both labels 0 and 1 must occur")
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def upper(self) -> np.ndarray:
        return self.labels == 0

    @property
    def lower(self) -> np.ndarray:
        return self.labels == 1

    def check_matches(self, image: JointImage) -> None:
        if self.shape != image.shape:
            raise ValueError(f"mask shape {self.shape} does not match image shape {image.shape}")


@dataclass(frozen=True, eq=False)
class LossSpectrum:
    """Per-pixel residual magnitude between two images."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values, np.float64)
        if v.ndim != 2:
            raise ValueError("spectrum must be 2-D")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("spectrum values must be finite and non-negative")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def parse_identity(path) -> dict:
    """Split a ``<patient>_<joint>_<date>`` file stem into its parts."""
    stem = Path(path).stem
    parts = stem.split("_")
    if len(parts) < 3:
        return {"patient": stem, "joint": "", "date": ""}
    return {"patient": "_".join(parts[:-2]), "joint": parts[-2], "date": parts[-1]}


# ---------------------------------------------------------------- netpbm


def _tokens(data: bytes, start: int, count: int):
    """Read ``count`` whitespace-separated header tokens, collecting comments."""
    toks, comments = [], []
    i = start
    n = len(data)
    while len(toks) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i >= n:
            raise ImageFormatError("truncated netpbm header")
        if data[i : i + 1] == b"#":
            j = data.find(b"\n", i)
            j = n if j < 0 else j
            comments.append(data[i + 1 : j].decode("ascii", "replace").strip())
            i = j
            continue
        j = i
        while j < n and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
            j += 1
        toks.append(data[i:j])
        i = j
    return toks, comments, i


def read_netpbm(path) -> tuple[np.ndarray, int, list[str]]:
    """Return (raw array, maxval, header comments). Arrays are (H, W) or (H, W, 3)."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5", b"P3", b"P6"):
        raise ImageFormatError(f"{path}: not a netpbm graymap/pixmap")
    (w, h, maxval), comments, pos = _tokens(data, 2, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"{path}: zero-sized image")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: invalid maxval {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * channels
    if magic in (b"P2", b"P3"):
        body = data[pos:]
        body = re.sub(rb"#[^\n]*", b" ", body)
        arr = np.array(body.split()[:count], dtype=np.int64)
    else:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos + 1 : pos + 1 + count * dtype.itemsize]
        arr = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    if arr.size != count:
        raise ImageFormatError(f"{path}: truncated pixel data")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape), maxval, comments


def write_netpbm(path, arr: np.ndarray, maxval: int, comments=(), plain: bool = False) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        magic = "P3" if plain else "P6"
    else:
        magic = "P2" if plain else "P5"
    h, w = arr.shape[:2]
    header = magic + "\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n{maxval}\n"
    if plain:
        rows = [" ".join(str(int(x)) for x in row.ravel()) for row in arr]
        payload = ("\n".join(rows) + "\n").encode("ascii")
    else:
        dtype = ">u2" if maxval > 255 else "u1"
        payload = arr.astype(dtype).tobytes()
    Path(path).write_bytes(header.encode("ascii") + payload)


def _read_raw(path):
    """Single-channel integer raster plus full-scale value and embedded resolution."""
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"{path}: no such file")
    if path.suffix.lower() in NETPBM_SUFFIXES:
        arr, maxval, comments = read_netpbm(path)
        res = None
        for c in comments:
            m = _RES_RE.search(c)
            if m:
                res = float(m.group(1))
        if arr.ndim != 2:
            raise ImageFormatError(f"{path}: multi-channel input")
        return arr, maxval, res
    from PIL import Image

    try:
        with Image.open(path) as im:
            if len(im.getbands()) != 1:
                raise ImageFormatError(f"{path}: multi-channel input")
            mode = im.mode
            arr = np.array(im)
    except OSError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    if arr.size == 0:
        raise ImageFormatError(f"{path}: zero-sized image")
    full = 255 if mode in ("L", "P") else 65535
    if mode == "1":
        arr, full = arr.astype(np.int64) * 255, 255
    return arr.astype(np.int64), full, None


def read_image(path, resolution: float | None = None, identity: str | None = None) -> JointImage:
    """Load an 8/16-bit grayscale raster, rescaled to [0, 1] by its full scale.

    ``resolution`` (mm/pixel) takes precedence over an embedded header value;
    if neither is available the image gets 1.0 mm/pixel.
    """
    arr, full, embedded = _read_raw(path)
    res = resolution if resolution is not None else (embedded if embedded is not None else 1.0)
    ident = identity if identity is not None else Path(path).stem
    return JointImage(arr.astype(np.float64) / full, res, ident)


def write_image(path, image: JointImage, bits: int = 16, plain: bool = False) -> None:
    """Write ``image`` as an 8- or 16-bit graymap with its resolution in the header."""
    full = 65535 if bits == 16 else 255
    raw = np.rint(image.pixels * full).astype(np.int64)
    write_netpbm(path, raw, full, [f"resolution_mm_per_px {image.resolution!r}"], plain=plain)


def read_mask(path, level_tolerance: int | None = None) -> SegmentationMask:
    """Load a bi-level mask: values at or below half scale -> 0 (upper), above -> 1 (lower).

    Pixels must sit within ``level_tolerance`` of either 0 or full scale
    (default: 1/8 of full scale); anything in between is rejected as not bi-level.
    """
    arr, full, _ = _read_raw(path)
    tol = full // 8 if level_tolerance is None else level_tolerance
    near_low = arr <= tol
    near_high = arr >= full - tol
    if not np.all(near_low | near_high):
        levels = np.unique(arr)
        raise ValueError(f"{path}: mask is not bi-level (levels {levels[:8].tolist()})")
    labels = (arr > full / 2).astype(np.uint8)
    if labels.min() == labels.max():
        raise ValueError(f"{path}: single-region mask")
    return SegmentationMask(labels)


def write_mask(path, mask: SegmentationMask, plain: bool = False) -> None:
    write_netpbm(path, mask.labels.astype(np.int64) * 255, 255, plain=plain)


# ---------------------------------------------------------------- heatmaps


def _hot_lut(n: int = 256) -> np.ndarray:
    """Black -> red -> yellow -> white; every channel is non-decreasing."""
    t = np.linspace(0.0, 1.0, n)
    r = np.clip(t * 3.0, 0, 1)
    g = np.clip(t * 3.0 - 1.0, 0, 1)
    b = np.clip(t * 3.0 - 2.0, 0, 1)
    return np.rint(np.stack([r, g, b], axis=1) * 255).astype(np.uint8)


HOT_LUT = _hot_lut()


def colorize_spectrum(spectrum: LossSpectrum, percentile: float = 99.0) -> np.ndarray:
    """Map a spectrum to an (H, W, 3) uint8 array.

    Zero maps to the first colour, the ``percentile`` value to the last,
    larger values clamp. If that percentile is zero the maximum is used.
    """
    v = spectrum.values
    top = float(np.percentile(v, percentile))
    if top <= 0.0:
        top = float(v.max())
    if top <= 0.0:
        idx = np.zeros(v.shape, dtype=np.intp)
    else:
        idx = np.rint(np.clip(v / top, 0.0, 1.0) * (len(HOT_LUT) - 1)).astype(np.intp)
    return HOT_LUT[idx]


def render_spectrum(spectrum: LossSpectrum, path, percentile: float = 99.0) -> None:
    """Write a colour heatmap of ``spectrum`` (PPM, or any Pillow format by extension)."""
    rgb = colorize_spectrum(spectrum, percentile)
    path = Path(path)
    if not path.parent.exists():
        raise OSError(f"{path.parent}: directory does not exist")
    if path.suffix.lower() in NETPBM_SUFFIXES:
        write_netpbm(path, rgb, 255)
    else:
        from PIL import Image

        Image.fromarray(rgb).save(path)
