#!/usr/bin/env python3
"""Generate a synthetic stained-tissue slide and optionally ingest it.

Writes a multi-level tiled TIFF with blob-shaped chromatic regions on a
white background, the kind of input every analyzer in the registry can
chew on. With --data-dir the slide is registered into that store and the
slide id is printed; otherwise only the file path is printed.
"""

import argparse
import random
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from tiffgen import build_tiff  # noqa: E402


def halve(arr):
    a = arr.astype(np.int64)
    h, w, _ = a.shape
    ye, xe = np.arange(0, h, 2), np.arange(0, w, 2)
    sums = np.add.reduceat(np.add.reduceat(a, ye, axis=0), xe, axis=1)
    counts = np.multiply.outer(
        np.minimum(ye + 2, h) - ye, np.minimum(xe + 2, w) - xe
    )[:, :, None]
    return ((2 * sums + counts) // (2 * counts)).astype(np.uint8)


def tissue_image(rng, width, height):
    img = np.full((height, width, 3), 247, dtype=np.uint8)
    palette = [(186, 80, 150), (150, 70, 170), (200, 120, 90)]
    yy, xx = np.ogrid[:height, :width]
    for _ in range(rng.randint(3, 7)):
        r = rng.randint(min(width, height) // 12, min(width, height) // 5)
        cx = rng.randint(r, width - r - 1)
        cy = rng.randint(r, height - r - 1)
        blob = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[blob] = palette[rng.randrange(len(palette))]
    # sprinkle dark nuclei inside the stained regions
    stained = np.any(img != 247, axis=2)
    for _ in range(rng.randint(40, 90)):
        cx, cy = rng.randrange(width), rng.randrange(height)
        if not stained[cy, cx]:
            continue
        rr = rng.randint(2, 4)
        disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= rr * rr
        img[disc] = (60, 40, 90)
    return img


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("demo-slide.tif"))
    parser.add_argument("--width", type=int, default=1600)
    parser.add_argument("--height", type=int, default=1200)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--data-dir", type=Path, default=None,
                        help="Also register the slide into this store.")
    parser.add_argument("--name", default=None, help="Slide id when ingesting.")
    args = parser.parse_args()

    rng = random.Random(args.seed)
    base = tissue_image(rng, args.width, args.height)
    levels = [base]
    while max(levels[-1].shape[:2]) > 256:
        levels.append(halve(levels[-1]))
    args.out.write_bytes(build_tiff(
        levels, tile=(256, 256), description="demo|AppMag = 40|MPP = 0.25"))
    print(args.out)

    if args.data_dir is not None:
        from pimip.config import PimipConfig
        from pimip.store import open_store

        store = open_store(PimipConfig(data_dir=args.data_dir))
        try:
            row = store.register_slide(args.out, args.name)
            print(row.slide_id)
        finally:
            store.close()


if __name__ == "__main__":
    main()
