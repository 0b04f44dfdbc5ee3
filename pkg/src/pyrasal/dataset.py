"""Image/mask/depth I/O (binary PGM/PPM), manifests, resizing and a synthetic scene generator.

Layout produced by :func:`generate_synthetic`::

    root/
      manifest.txt          rgb<TAB>gt<TAB>depth, paths relative to root
      images/syn_0000.ppm
      masks/syn_0000.pgm
      depth/syn_0000.pgm
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .functional import bilinear_matrix

GT_THRESHOLD = 0.5
_WHITESPACE = b" \t\r\n\v\f"


class PNMError(ValueError):
    """Malformed or truncated PGM/PPM payload; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int, path: str | os.PathLike | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


# -- PNM ----------------------------------------------------------------------
def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch in _WHITESPACE and ch:
            pos += 1
        elif ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PNMError("unexpected end of header", pos)
    return buf[start:pos], pos


def _header_int(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    tok, end = _header_token(buf, pos)
    if not tok.isdigit():
        raise PNMError(f"invalid {what} {tok!r}", end - len(tok))
    return int(tok), end


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode an 8-bit binary PGM (P5) or PPM (P6). Returns uint8 ``[H, W]`` or ``[H, W, 3]``."""
    if len(buf) < 2:
        raise PNMError("file too short for a magic number", 0)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"bad magic {magic!r}, expected P5 or P6", 0)
    channels = 1 if magic == b"P5" else 3
    width, pos = _header_int(buf, 2, "width")
    height, pos = _header_int(buf, pos, "height")
    maxval, pos = _header_int(buf, pos, "maxval")
    if width < 1 or height < 1:
        raise PNMError(f"non-positive size {width}x{height}", pos)
    if not 1 <= maxval <= 255:
        raise PNMError(f"maxval {maxval} unsupported (8-bit only)", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise PNMError("missing whitespace after maxval", pos)
    pos += 1
    count = width * height * channels
    if len(buf) - pos < count:
        raise PNMError(f"truncated pixel data: need {count} bytes, have {len(buf) - pos}", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=pos)
    if maxval < 255 and data.size and data.max() > maxval:
        bad = int(np.argmax(data > maxval))
        raise PNMError(f"sample value {data[bad]} exceeds maxval {maxval}", pos + bad)
    arr = data.reshape(height, width, channels) if channels == 3 else data.reshape(height, width)
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return arr.copy()


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError("encode_pnm expects uint8 data")
    if arr.ndim == 2:
        magic, (h, w) = b"P5", arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, (h, w, _) = b"P6", arr.shape
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantise a [0, 1] channel-first image to uint8 HWC/HW."""
    img = np.asarray(img, dtype=np.float64)
    if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    q = np.round(img * 255.0).astype(np.uint8)
    if q.ndim == 3 and q.shape[0] == 1:
        return q[0]
    if q.ndim == 3 and q.shape[0] == 3:
        return q.transpose(1, 2, 0)
    if q.ndim == 2:
        return q
    raise ValueError(f"expected [1|3, H, W] or [H, W], got {img.shape}")


def load_image(path) -> np.ndarray:
    """Read a P5/P6 file into a float32 channel-first array scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    try:
        arr = decode_pnm(buf)
    except PNMError as e:
        raise PNMError(str(e).rsplit(" (byte offset", 1)[0], e.offset, path) from None
    f = arr.astype(np.float32) / 255.0
    return f[None] if f.ndim == 2 else f.transpose(2, 0, 1).copy()


def save_image(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_pnm(to_bytes(img)))


# -- samples and manifests ------------------------------------------------------
@dataclass
class Sample:
    rgb: np.ndarray  # [3, H, W] in [0, 1]
    gt: np.ndarray  # [1, H, W] in {0, 1}
    depth: np.ndarray | None = None  # [1, H, W] in [0, 1]
    name: str = ""

    def __post_init__(self):
        hw = self.rgb.shape[1:]
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"rgb must be [3, H, W], got {self.rgb.shape}")
        if self.gt.shape != (1,) + hw:
            raise ValueError(f"gt {self.gt.shape} does not match rgb {self.rgb.shape}")
        if self.depth is not None and self.depth.shape != (1,) + hw:
            raise ValueError(f"depth {self.depth.shape} does not match rgb {self.rgb.shape}")


@dataclass
class ManifestEntry:
    rgb: str
    gt: str
    depth: str | None = None


@dataclass
class Manifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        self.root = Path(self.root)
        self.entries = sorted(self.entries, key=lambda e: Path(e.rgb).name)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def has_depth(self) -> bool:
        return bool(self.entries) and all(e.depth for e in self.entries)

    def validate(self) -> None:
        for e in self.entries:
            for rel in (e.rgb, e.gt, e.depth):
                if rel is not None and not (self.root / rel).is_file():
                    raise FileNotFoundError(f"manifest references missing file {self.root / rel}")

    def load(self, i: int) -> Sample:
        e = self.entries[i]
        rgb = load_image(self.root / e.rgb)
        if rgb.shape[0] != 3:
            raise ValueError(f"{e.rgb}: expected a colour (P6) image")
        gt = (load_image(self.root / e.gt)[:1] >= GT_THRESHOLD).astype(np.float32)
        depth = load_image(self.root / e.depth)[:1] if e.depth else None
        return Sample(rgb, gt, depth, name=Path(e.rgb).stem)

    def load_all(self) -> list[Sample]:
        self.validate()
        return [self.load(i) for i in range(len(self))]


def read_manifest(path, split: str = "train") -> Manifest:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected 2 or 3 tab-separated paths")
        entries.append(ManifestEntry(parts[0], parts[1], parts[2] if len(parts) == 3 else None))
    return Manifest(path.parent, entries, split)


def write_manifest(path, manifest: Manifest) -> None:
    lines = []
    for e in manifest.entries:
        cols = [e.rgb, e.gt] + ([e.depth] if e.depth else [])
        lines.append("\t".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


# -- resizing -----------------------------------------------------------------
def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a channel-first array (half-pixel centres)."""
    ah = bilinear_matrix(h, img.shape[1])
    aw = bilinear_matrix(w, img.shape[2])
    return np.einsum("oh,chw,pw->cop", ah, img.astype(np.float64), aw).astype(img.dtype)


def resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize; output pixel ``d`` reads source ``floor((d + 0.5) * in/out)``."""
    rows = np.minimum(((np.arange(h) + 0.5) * img.shape[1] / h).astype(int), img.shape[1] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * img.shape[2] / w).astype(int), img.shape[2] - 1)
    return img[:, rows][:, :, cols]


def resize_sample(s: Sample, size: int | tuple[int, int]) -> Sample:
    h, w = (size, size) if isinstance(size, int) else size
    if h % 16 or w % 16:
        raise ValueError(f"target size {h}x{w} must be divisible by 16")
    if (h, w) == s.rgb.shape[1:]:
        return Sample(s.rgb.copy(), s.gt.copy(), None if s.depth is None else s.depth.copy(), s.name)
    rgb = np.clip(resize_bilinear(s.rgb, h, w), 0, 1)
    depth = None if s.depth is None else np.clip(resize_bilinear(s.depth, h, w), 0, 1)
    return Sample(rgb, resize_nearest(s.gt, h, w), depth, s.name)


# -- synthetic scenes -------------------------------------------------------------
@dataclass
class Shape:
    kind: str  # "rect" or "ellipse"
    params: tuple  # rect: (r0, r1, c0, c1) ints; ellipse: (cy, cx, ay, ax) floats

    def mask(self, h: int, w: int) -> np.ndarray:
        """Pixel (r, c) belongs to the shape when its centre (r + 0.5, c + 0.5) does."""
        rr = np.arange(h)[:, None] + 0.5
        cc = np.arange(w)[None, :] + 0.5
        if self.kind == "rect":
            r0, r1, c0, c1 = self.params
            return (rr >= r0) & (rr < r1) & (cc >= c0) & (cc < c1)
        cy, cx, ay, ax = self.params
        return ((rr - cy) / ay) ** 2 + ((cc - cx) / ax) ** 2 <= 1.0


def _random_shape(rng: np.random.Generator, size: int) -> Shape:
    lo, hi = max(3, int(0.15 * size)), max(4, int(0.4 * size))
    hh, ww = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
    r0 = int(rng.integers(0, size - hh + 1))
    c0 = int(rng.integers(0, size - ww + 1))
    if rng.random() < 0.5:
        return Shape("rect", (r0, r0 + hh, c0, c0 + ww))
    return Shape("ellipse", (r0 + hh / 2, c0 + ww / 2, hh / 2, ww / 2))


def _distinct_colors(rng: np.random.Generator, k: int) -> list[np.ndarray]:
    hues = (rng.random() + np.arange(k) / k) % 1.0
    colors = []
    for hue in hues:
        # saturated colour from the hue wheel
        rgb = np.clip(np.abs((hue * 6 + np.array([0.0, 4.0, 2.0])) % 6 - 3) - 1, 0, 1)
        colors.append(0.15 + 0.8 * rgb)
    return colors


def render_scene(rng: np.random.Generator, size: int) -> tuple[Sample, list[Shape]]:
    while True:
        shapes = [_random_shape(rng, size) for _ in range(int(rng.integers(1, 4)))]
        masks = [s.mask(size, size) for s in shapes]
        gt = np.any(masks, axis=0)
        if 0 < gt.mean() < 0.6:
            break
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = 0.35 + 0.2 * rng.random(3)
    angle = rng.random() * 2 * np.pi
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    texture = 0.04 * rng.standard_normal((size, size))
    rgb = np.clip(base[:, None, None] + 0.08 * ramp[None] + texture[None], 0, 1)
    depth = 0.1 + 0.25 * yy  # background: floor receding upwards
    disparities = np.sort(rng.uniform(0.5, 1.0, len(shapes)))
    for shape, mask, color, disp in zip(shapes, masks, _distinct_colors(rng, len(shapes)), disparities):
        rgb[:, mask] = color[:, None]
        depth[mask] = disp
    sample = Sample(rgb.astype(np.float32), gt[None].astype(np.float32), depth[None].astype(np.float32))
    return sample, shapes


def generate_synthetic(root, n: int, size: int = 64, seed: int = 0, split: str = "train") -> Manifest:
    """Write ``n`` synthetic RGB/GT/depth triples under ``root`` and return their manifest."""
    if n < 1:
        raise ValueError("n must be >= 1")
    root = Path(root)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        sample, _ = render_scene(rng, size)
        name = f"syn_{i:04d}"
        e = ManifestEntry(f"images/{name}.ppm", f"masks/{name}.pgm", f"depth/{name}.pgm")
        save_image(root / e.rgb, sample.rgb)
        save_image(root / e.gt, sample.gt)
        save_image(root / e.depth, sample.depth)
        entries.append(e)
    manifest = Manifest(root, entries, split)
    write_manifest(root / "manifest.txt", manifest)
    return manifest
