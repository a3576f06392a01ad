#!/usr/bin/env python3
"""Build the bundled MNIST subset (IDX, gzip) from the `mnist` npm package.

The npm package ships 10,000 MNIST digits as JSON arrays of intensities
rounded to three decimals. Every value is an exact k/255 after rounding,
so the original u8 pixels are recovered with round(v * 255).

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import os
import random
import struct
import sys

SIDE = 28
TRAIN = 8000
SEED = 20210604


def main(src, dst):
    samples = []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as fh:
            raw = json.load(fh)["data"]
        n = len(raw) // (SIDE * SIDE)
        for i in range(n):
            px = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            b = bytes(int(round(v * 255)) for v in px)
            samples.append((b, digit))
    random.Random(SEED).shuffle(samples)
    os.makedirs(dst, exist_ok=True)
    for name, part in (("train", samples[:TRAIN]), ("test", samples[TRAIN:])):
        with gzip.GzipFile(os.path.join(dst, f"{name}-images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
            fh.write(struct.pack(">IIII", 2051, len(part), SIDE, SIDE))
            for b, _ in part:
                fh.write(b)
        with gzip.GzipFile(os.path.join(dst, f"{name}-labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
            fh.write(struct.pack(">II", 2049, len(part)))
            fh.write(bytes(lbl for _, lbl in part))
        print(name, len(part))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
