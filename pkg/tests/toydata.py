"""Synthetic "malware families": byte streams built from family-specific section layouts.

Each family is a sequence of sections (zero runs, periodic motifs, uniform
noise, byte ramps) whose relative sizes jitter per sample; a few percent of
bytes are overwritten with noise. File length varies, so the grayscale
width and height vary too.
"""

from pathlib import Path

import numpy as np

from malvis.visualize import RawBinary, bytes_to_image, write_image_png

# (fraction, kind, period) per section
LAYOUTS = (
    ((0.3, "zeros", 0), (0.7, "motif", 3)),
    ((0.5, "random", 0), (0.5, "zeros", 0)),
    ((0.2, "ramp", 0), (0.8, "motif", 8)),
    ((0.6, "motif", 13), (0.4, "random", 0)),
    ((0.1, "zeros", 0), (0.4, "random", 0), (0.5, "motif", 21)),
    ((0.5, "motif", 5), (0.5, "ramp", 0)),
)


def family_bytes(family: int, rng: np.random.Generator, min_len=2048, max_len=8192) -> bytes:
    layout = LAYOUTS[family % len(LAYOUTS)]
    n = int(rng.integers(min_len, max_len))
    fracs = np.array([f for f, _, _ in layout]) + rng.uniform(-0.05, 0.05, len(layout))
    fracs = np.clip(fracs, 0.02, None)
    sizes = np.floor(fracs / fracs.sum() * n).astype(int)
    sizes[-1] = n - sizes[:-1].sum()
    parts = []
    for (_, kind, period), size in zip(layout, sizes):
        if kind == "zeros":
            seg = np.zeros(size, np.uint8)
        elif kind == "random":
            seg = rng.integers(0, 256, size).astype(np.uint8)
        elif kind == "ramp":
            seg = (np.arange(size) % 256).astype(np.uint8)
        else:
            motif = np.random.default_rng(1000 + family).integers(0, 256, period)
            off = int(rng.integers(0, period))
            seg = np.tile(motif, size // period + 2)[off:off + size].astype(np.uint8)
        parts.append(seg)
    data = np.concatenate(parts)
    noise = rng.random(n) < 0.05
    data[noise] = rng.integers(0, 256, int(noise.sum()))
    return bytes(data)


def write_binaries(root, families=5, per_family=100, seed=0):
    """Raw byte files laid out as root/famX/NNN.bin."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for f in range(families):
        d = root / f"fam{f}"
        d.mkdir(parents=True, exist_ok=True)
        for j in range(per_family):
            (d / f"{j:03d}.bin").write_bytes(family_bytes(f, rng))
    return root


def write_images(root, families=5, per_family=100, seed=0):
    """Grayscale PNGs laid out as root/famX/NNN.png."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for f in range(families):
        d = root / f"fam{f}"
        d.mkdir(parents=True, exist_ok=True)
        for j in range(per_family):
            write_image_png(bytes_to_image(RawBinary(family_bytes(f, rng))), d / f"{j:03d}.png")
    return root
