#!/usr/bin/env python3
"""Convert the per-class JSON dumps shipped by the `fashion-mnist` npm package
into the standard IDX files (train: first 6000 per class, test: next 1000).

usage: fashion_json_to_idx.py <clothes-json-dir> <out-dir>
"""
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(out: Path, stem: str, samples):
    with open(out / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(bytes(pixels))
    with open(out / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for label in range(10):
        rows = json.loads((src / f"{label}.json").read_text())["data"]
        rows = [r for r in rows if len(r) == 28 * 28]
        train += [(r, label) for r in rows[:6000]]
        test += [(r, label) for r in rows[6000:7000]]
    rng = random.Random(0)
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx(out, "train", train)
    write_idx(out, "t10k", test)


if __name__ == "__main__":
    main()
