#!/usr/bin/env python3
"""Build the desk-scale MNIST subset in IDX format.

Converts the 10,000-digit MNIST subset shipped with the `mnist` npm package
(https://www.npmjs.com/package/mnist, MIT) into the four standard IDX files:

    train-images-idx3-ubyte   train-labels-idx1-ubyte
    t10k-images-idx3-ubyte    t10k-labels-idx1-ubyte

The npm package stores each digit as a flat JSON array of pixel intensities
in [0,1] (original byte / 255, rounded to 3 decimals); round(v*255) recovers
the original byte exactly. The split is stratified per digit (85% train,
15% test) with a fixed shuffle seed so the output is reproducible.

Usage:
    npm install mnist            # anywhere; pass the package dir below
    python3 scripts/prepare_mnist.py --npm-dir node_modules/mnist --out data/mnist

If you have the official 60k/10k MNIST distribution, skip this script and
point GATEON_DATA_DIR at a directory containing the four uncompressed IDX
files instead; the loader reads the published format bit-exactly.
"""

import argparse
import json
import random
import struct
from pathlib import Path

TRAIN_FRACTION = 0.85
SHUFFLE_SEED = 20240901


def write_idx_images(path: Path, images: list[bytes]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(img)


def write_idx_labels(path: Path, labels: list[int]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--npm-dir", required=True, help="path to the installed npm 'mnist' package")
    ap.add_argument("--out", required=True, help="output directory for the IDX files")
    args = ap.parse_args()

    digits_dir = Path(args.npm_dir) / "src" / "digits"
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    train: list[tuple[bytes, int]] = []
    test: list[tuple[bytes, int]] = []
    for digit in range(10):
        flat = json.loads((digits_dir / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0, f"digit {digit}: unexpected payload length"
        samples = [
            bytes(round(v * 255) for v in flat[i : i + 784])
            for i in range(0, len(flat), 784)
        ]
        rng = random.Random(SHUFFLE_SEED + digit)
        rng.shuffle(samples)
        n_train = int(len(samples) * TRAIN_FRACTION)
        train.extend((s, digit) for s in samples[:n_train])
        test.extend((s, digit) for s in samples[n_train:])

    random.Random(SHUFFLE_SEED).shuffle(train)
    random.Random(SHUFFLE_SEED + 100).shuffle(test)

    write_idx_images(out_dir / "train-images-idx3-ubyte", [s for s, _ in train])
    write_idx_labels(out_dir / "train-labels-idx1-ubyte", [l for _, l in train])
    write_idx_images(out_dir / "t10k-images-idx3-ubyte", [s for s, _ in test])
    write_idx_labels(out_dir / "t10k-labels-idx1-ubyte", [l for _, l in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {out_dir}")


if __name__ == "__main__":
    main()
