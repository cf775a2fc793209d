#!/usr/bin/env python3
"""Convert the 10,000 digits bundled in the `mnist` npm package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

Writes a 7,000-image train split and a 3,000-image test split, each gzipped,
with the standard IDX layout (magic 0x00000803 / 0x00000801, big-endian dims).
Pixel values in the package are stored as p/255 rounded to three decimals, so
they are recovered with round(v * 255).
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    items = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        for i in range(len(flat) // 784):
            pixels = bytes(round(v * 255) for v in flat[i * 784:(i + 1) * 784])
            items.append((pixels, digit))
    random.Random(20170707).shuffle(items)
    dst.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", items[:7000]), ("t10k", items[7000:])):
        with gzip.GzipFile(dst / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(part), 28, 28))
            for pixels, _ in part:
                f.write(pixels)
        with gzip.GzipFile(dst / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(part)))
            f.write(bytes(label for _, label in part))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
