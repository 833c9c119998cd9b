"""Dataset indexing, PPM/PGM decoding, bilinear rescaling and synthetic data.

Image corpora follow a simplified Market-1501 naming scheme,
``<identity>_c<camera>_<anything>.ppm`` (``.pgm`` also accepted), with
identity ``-1`` marking distractors.  JPEG corpora can be converted first,
e.g. with ImageMagick: ``mogrify -format ppm *.jpg``.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDatasetError,
    ImageHeaderError,
    ImageMaxvalError,
    ImageTruncatedError,
)
from .tensor import Rng

log = logging.getLogger(__name__)

IMAGE_HEIGHT = 128
IMAGE_WIDTH = 64
FILENAME_PATTERN = re.compile(r"^(-?\d+)_c(\d+)_.*\.p[pg]m$")


@dataclass(frozen=True)
class Entry:
    source: str | int  # file path, or row of DatasetIndex.samples
    identity: int
    camera: int


@dataclass(frozen=True)
class LabeledImage:
    identity: int
    camera: int
    pixels: np.ndarray  # 3 x 128 x 64, RGB in [0, 1]


@dataclass
class DatasetIndex:
    entries: list[Entry]
    samples: np.ndarray | None = None
    skipped: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.entries)

    @property
    def identities(self) -> np.ndarray:
        return np.array([e.identity for e in self.entries], dtype=np.int64)

    @property
    def cameras(self) -> np.ndarray:
        return np.array([e.camera for e in self.entries], dtype=np.int64)

    def by_identity(self) -> dict[int, list[int]]:
        """identity -> positions in ``entries`` (ascending)."""
        out: dict[int, list[int]] = {}
        for i, e in enumerate(self.entries):
            out.setdefault(e.identity, []).append(i)
        return out

    def lookup(self, identity: int) -> list[Entry]:
        return [e for e in self.entries if e.identity == identity]

    def subset(self, positions) -> "DatasetIndex":
        return DatasetIndex([self.entries[i] for i in positions], self.samples, _cache=self._cache)

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.samples is not None:
            return tuple(self.samples.shape[1:])
        return (3, IMAGE_HEIGHT, IMAGE_WIDTH)

    def load(self, position: int) -> np.ndarray:
        entry = self.entries[position]
        if self.samples is not None:
            return self.samples[entry.source]
        if entry.source not in self._cache:
            self._cache[entry.source] = load_image(entry).pixels
        return self._cache[entry.source]

    def load_batch(self, positions) -> np.ndarray:
        return np.stack([self.load(i) for i in positions])


# -- directory scanning -----------------------------------------------------

def parse_filename(name: str) -> tuple[int, int] | None:
    m = FILENAME_PATTERN.match(name)
    if m is None or int(m.group(2)) < 1:
        return None
    return int(m.group(1)), int(m.group(2))


def scan_directory(root) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(f"dataset root {root} is not a readable directory")
    entries, skipped = [], 0
    for path in sorted(p for p in root.iterdir() if p.is_file()):
        parsed = parse_filename(path.name)
        if parsed is None:
            skipped += 1
            continue
        entries.append(Entry(str(path), *parsed))
    if skipped:
        log.warning("ignored %d file(s) not matching <identity>_c<camera>_*.ppm in %s", skipped, root)
    if not entries:
        raise EmptyDatasetError(f"no image files matching the naming scheme in {root}")
    return DatasetIndex(entries, skipped=skipped)


# -- PPM / PGM --------------------------------------------------------------

def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageHeaderError("malformed header: unexpected end of file")
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageHeaderError("malformed header: no whitespace before pixel data")
    return tokens, pos + 1


def decode_netpbm(data: bytes) -> np.ndarray:
    """Decode binary P6/P5 bytes to an ``H x W x 3`` uint8 array."""
    if data[:2] not in (b"P6", b"P5"):
        raise ImageHeaderError(f"malformed header: unsupported magic {data[:2]!r}")
    tokens, offset = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageHeaderError(f"malformed header: non-numeric field in {tokens[1:]}") from None
    if width < 1 or height < 1:
        raise ImageHeaderError(f"malformed header: size {width}x{height}")
    if maxval != 255:
        raise ImageMaxvalError(f"unsupported maxval {maxval} (only 8-bit, maxval 255)")
    channels = 3 if tokens[0] == b"P6" else 1
    need = width * height * channels
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise ImageTruncatedError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def _axis_weights(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-centre bilinear sampling."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize ``C x H x W`` with half-pixel centres and edge clamping.

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * in / out - 0.5``.
    """
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()
    lo, hi, f = _axis_weights(h, height)
    rows = img[:, lo, :] * (1.0 - f)[None, :, None] + img[:, hi, :] * f[None, :, None]
    lo, hi, f = _axis_weights(w, width)
    return rows[:, :, lo] * (1.0 - f)[None, None, :] + rows[:, :, hi] * f[None, None, :]


def load_image(entry: Entry | str | Path) -> LabeledImage:
    if isinstance(entry, Entry):
        path, identity, camera = Path(entry.source), entry.identity, entry.camera
    else:
        path = Path(entry)
        identity, camera = parse_filename(path.name) or (-1, 0)
    rgb = decode_netpbm(path.read_bytes())
    chw = rgb.transpose(2, 0, 1).astype(np.float64) / 255.0
    return LabeledImage(identity, camera, resize_bilinear(chw, IMAGE_HEIGHT, IMAGE_WIDTH))


# -- synthetic identities ---------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_identities: int = 25
    samples_per_identity: int = 40
    input_dim: int = 32
    cluster_spread: float = 0.15
    heldout_identities: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.cluster_spread < 0:
            raise ValueError("cluster_spread must be non-negative")
        if not 0 <= self.heldout_identities < self.num_identities:
            raise ValueError("heldout_identities must be in [0, num_identities)")

    @classmethod
    def parse(cls, text: str, **kw) -> "SyntheticSpec":
        """Parse ``"<identities>x<samples>"``, e.g. ``"20x30"``."""
        m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
        if m is None:
            raise ValueError(f"synthetic spec must look like 20x30, got {text!r}")
        return cls(int(m.group(1)), int(m.group(2)), **kw)


@dataclass
class SyntheticData:
    full: DatasetIndex
    train: DatasetIndex
    heldout: DatasetIndex
    unmapped: np.ndarray  # unit vectors before the shared linear map, aligned with full
    directions: np.ndarray  # per-identity unit mean directions


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Gaussian clusters around random unit directions, pushed through one
    shared random linear map so the inputs are not already unit vectors."""
    rng = Rng(spec.seed).stream("synthetic")
    n_id, n_per, dim = spec.num_identities, spec.samples_per_identity, spec.input_dim
    directions = rng.standard_normal((n_id, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    mixing = rng.standard_normal((dim, dim)) / math.sqrt(dim)
    noise = rng.standard_normal((n_id, n_per, dim))
    cameras = rng.integers(1, 3, size=(n_id, n_per))
    heldout = set(rng.permutation(n_id)[:spec.heldout_identities].tolist())

    raw = directions[:, None, :] + spec.cluster_spread * noise
    raw /= np.linalg.norm(raw, axis=2, keepdims=True)
    raw = raw.reshape(n_id * n_per, dim)
    samples = raw @ mixing.T
    entries = [Entry(i * n_per + j, i, int(cameras[i, j])) for i in range(n_id) for j in range(n_per)]
    full = DatasetIndex(entries, samples)
    train_pos = [k for k, e in enumerate(entries) if e.identity not in heldout]
    held_pos = [k for k, e in enumerate(entries) if e.identity in heldout]
    return SyntheticData(full, full.subset(train_pos), full.subset(held_pos), raw, directions)


def split_train_val(index: DatasetIndex, fraction: float, seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Move ``ceil(fraction * count)`` images of every identity to validation.

    Identities with a single image stay in training, and every identity keeps
    at least one training image.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"validation fraction must lie in (0, 1), got {fraction}")
    rng = Rng(seed).stream("split")
    train, val = [], []
    for identity, positions in sorted(index.by_identity().items()):
        count = len(positions)
        n_val = 0 if count < 2 else min(max(1, math.ceil(fraction * count - 1e-9)), count - 1)
        chosen = set(rng.permutation(count)[:n_val].tolist())
        for k, pos in enumerate(positions):
            (val if k in chosen else train).append(pos)
    return index.subset(sorted(train)), index.subset(sorted(val))
