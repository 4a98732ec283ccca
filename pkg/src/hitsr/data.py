"""Dataset ingestion and augmentation.

Layout: ``<root>/hr/`` and ``<root>/ref/`` hold images matched by filename
stem. Supported formats are binary PPM (P6, decoded here) and PNG (decoded
through Pillow, imported lazily). Pixels are float64 HWC in [0, 1]; the
low-resolution input is derived from the high-resolution target by an
exact bicubic 1/4 resize, so a model that reproduces the bicubic upscale
reproduces the evaluation baseline bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError
from .metrics import bicubic_resize
from .rng import RngState

_EXTENSIONS = (".png", ".ppm")


# ----------------------------------------------------------------------
# codecs
# ----------------------------------------------------------------------

def _ppm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comment lines between header tokens
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c in b" \t\r\n":
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos:pos + 1] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header")
    return buf[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) -> float64 (H, W, 3) in [0, 1]."""
    buf = Path(path).read_bytes()
    magic, pos = _ppm_token(buf, 0)
    if magic != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _ppm_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"{path}: bad PPM header token {tok!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    raw = buf[pos:pos + h * w * 3]
    if len(raw) != h * w * 3:
        raise FormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    """float (H, W, 3) in [0, 1] -> binary PPM, rounding to 8 bits."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"PPM writer expects (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def _read_png(path) -> np.ndarray:
    from PIL import Image  # deferred: only PNG datasets need Pillow

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix.lower() == ".ppm":
            return read_ppm(path)
        if path.suffix.lower() == ".png":
            return _read_png(path)
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    raise FormatError(f"unsupported image format: {path.name}")


# ----------------------------------------------------------------------
# samples
# ----------------------------------------------------------------------

@dataclass
class Sample:
    """One HR target with its reference; LR is derived on first access."""

    id: str
    hr: np.ndarray
    ref: np.ndarray
    _lr: np.ndarray | None = field(default=None, repr=False)

    @property
    def lr(self) -> np.ndarray:
        if self._lr is None:
            h, w = self.hr.shape[:2]
            self._lr = bicubic_resize(self.hr, 0.25, out_hw=(h // 4, w // 4))
        return self._lr


def _check_extent(img: np.ndarray, name: str) -> None:
    h, w = img.shape[:2]
    if h % 4 or w % 4:
        raise DimensionError(
            f"{name}: extent {h}x{w} is not a multiple of 4")


def fixture_root() -> Path:
    """The bundled 4-image dataset used by tests and demos."""
    return Path(__file__).parent / "fixtures" / "sample_set"


def load_dataset(root, random_ref: bool = False, seed: int = 0) -> list[Sample]:
    """Read every stem-matched hr/ref pair under root, sorted by stem.

    A stem without a reference is skipped with a warning unless
    ``random_ref`` is set, in which case each sample's reference is another
    HR image drawn with a seeded RNG (single-image mode when the dataset
    has only one stem). References are resized to their target's extent
    when they differ.
    """
    root = Path(root)
    hr_dir, ref_dir = root / "hr", root / "ref"
    if not hr_dir.is_dir():
        raise ConfigurationError(f"dataset root {root} lacks an hr/ directory")
    if not random_ref and not ref_dir.is_dir():
        raise ConfigurationError(f"dataset root {root} lacks a ref/ directory")

    def index(d: Path) -> dict:
        out = {}
        if d.is_dir():
            for p in sorted(d.iterdir()):
                if p.suffix.lower() in _EXTENSIONS:
                    if p.stem in out:
                        raise ConfigurationError(
                            f"duplicate stem {p.stem!r} in {d}")
                    out[p.stem] = p
        return out

    hr_paths = index(hr_dir)
    ref_paths = index(ref_dir)
    if not hr_paths:
        raise ConfigurationError(f"empty dataset: no images under {hr_dir}")

    stems = sorted(hr_paths)
    hr_imgs = {}
    for stem in stems:
        img = load_image(hr_paths[stem])
        _check_extent(img, f"hr/{hr_paths[stem].name}")
        hr_imgs[stem] = img

    rng = RngState(seed).derive("random_ref")
    samples = []
    for stem in stems:
        hr = hr_imgs[stem]
        if random_ref:
            others = [s for s in stems if s != stem] or [stem]
            pick = others[int(rng.integers(0, len(others)))]
            ref = hr_imgs[pick]
        elif stem in ref_paths:
            ref = load_image(ref_paths[stem])
        else:
            warnings.warn(f"no reference for stem {stem!r}; skipped")
            continue
        if ref.shape[:2] != hr.shape[:2]:
            ref = bicubic_resize(ref, 1.0, out_hw=hr.shape[:2])
        samples.append(Sample(id=stem, hr=hr, ref=ref.copy()))
    if not samples:
        raise ConfigurationError(f"empty dataset: no usable pairs under {root}")
    return samples


# ----------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------

def _dihedral(img: np.ndarray, vflip: bool, hflip: bool, quarter_turns: int) -> np.ndarray:
    if vflip:
        img = img[::-1]
    if hflip:
        img = img[:, ::-1]
    if quarter_turns % 4:
        img = np.rot90(img, quarter_turns % 4, axes=(0, 1))
    return np.ascontiguousarray(img)


def augment(sample: Sample, rng: RngState) -> Sample:
    """Random vertical flip, horizontal flip (p = 0.5 each) and a multiple
    of 90 degrees, applied jointly to lr/hr; the reference gets its own
    independent draws. Identity draws return an unchanged copy."""
    v = bool(rng.uniform(()) < 0.5)
    h = bool(rng.uniform(()) < 0.5)
    u = int(rng.integers(0, 4))
    rv = bool(rng.uniform(()) < 0.5)
    rh = bool(rng.uniform(()) < 0.5)
    ru = int(rng.integers(0, 4))
    return Sample(
        id=sample.id,
        hr=_dihedral(sample.hr, v, h, u),
        ref=_dihedral(sample.ref, rv, rh, ru),
        _lr=_dihedral(sample.lr, v, h, u),
    )
