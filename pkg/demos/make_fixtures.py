"""Regenerate the bundled 4-image dataset under src/hitsr/fixtures/.

Each image is 64x64 with band-limited texture: enough high-frequency
content that the bicubic 4x baseline is beatable, low enough that a tiny
model can overfit four crops. References reuse the target's content from
a shifted viewpoint, except `c_radial`, whose reference is built from a
radial profile and is therefore exactly invariant under 90-degree
rotation (the robustness harness's rotation control relies on this).

Running this script twice produces byte-identical files; the fixtures
checked into the package were made exactly this way.
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from hitsr.data import write_ppm  # noqa: E402
from hitsr.metrics import bicubic_resize  # noqa: E402

SIZE = 64


def smooth_noise(rng: np.random.Generator, cells: int) -> np.ndarray:
    """Low-frequency field: coarse noise upsampled to SIZE."""
    coarse = rng.random((cells, cells))
    return bicubic_resize(coarse, SIZE / cells, out_hw=(SIZE, SIZE))


def normalize(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return 0.05 + 0.9 * (x - lo) / (hi - lo)


def textured(seed: int) -> np.ndarray:
    """Sinusoid mixture plus two noise octaves, distinct phase per channel.

    Frequencies sit high enough that the bicubic 4x baseline lands near
    30 dB; a model that learns the residual has headroom to beat it.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(SIZE), np.arange(SIZE), indexing="ij")
    chans = []
    for c in range(3):
        f1, f2 = rng.uniform(0.5, 1.3, size=2)
        th = rng.uniform(0, np.pi)
        wave = (np.sin(f1 * (np.cos(th) * yy + np.sin(th) * xx) + c)
                + 0.6 * np.sin(f2 * (xx - 0.3 * yy) + 2 * c))
        detail = smooth_noise(rng, 16) + 0.5 * smooth_noise(rng, 32)
        chans.append(normalize(wave + 2.0 * detail))
    return np.stack(chans, axis=-1)


def shifted_view(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Same scene from a different offset: roll plus mild brightness shift."""
    dy, dx = rng.integers(6, 14, size=2)
    out = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
    return np.clip(out * 0.95 + 0.02, 0.0, 1.0)


def radial_reference() -> np.ndarray:
    """Channelwise functions of squared radius about the exact center.

    rot90 maps (y, x) to (x, H-1-y), which preserves the squared radius
    term for term, so np.rot90(ref) == ref holds bitwise.
    """
    c = (SIZE - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(SIZE, dtype=np.float64),
                         np.arange(SIZE, dtype=np.float64), indexing="ij")
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    chans = [0.5 + 0.4 * np.sin(0.02 * r2 + phase) for phase in (0.0, 1.3, 2.6)]
    return np.stack(chans, axis=-1)


def main() -> None:
    root = Path(__file__).resolve().parents[1] / "src" / "hitsr" / "fixtures" / "sample_set"
    for sub in ("hr", "ref"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    specs = [("a_waves", 11), ("b_grain", 22), ("c_radial", 33), ("d_blend", 44)]
    for stem, seed in specs:
        hr = textured(seed)
        if stem == "c_radial":
            ref = radial_reference()
            assert np.array_equal(np.rot90(ref), ref)
        else:
            ref = shifted_view(hr, np.random.default_rng(seed + 1000))
        write_ppm(root / "hr" / f"{stem}.ppm", hr)
        write_ppm(root / "ref" / f"{stem}.ppm", ref)
        print(f"wrote {stem}: hr [{hr.min():.3f}, {hr.max():.3f}]")


if __name__ == "__main__":
    main()
