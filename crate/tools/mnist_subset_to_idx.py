"""Convert the digits bundled in the npm `mnist` package into IDX files.

The package ships 10,000 MNIST training digits as per-class JSON arrays of
pixel intensities rounded to 3 decimals. Rounding v*255 recovers the original
bytes exactly. Digits are split per class 80/20 (seeded) into train and test.

usage: python3 mnist_subset_to_idx.py <package/src/digits> <out dir>
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main(src, out):
    rng = random.Random(20200)
    train, test = [], []
    for digit in range(10):
        flat = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        samples = [
            bytes(round(v * 255) for v in flat[i : i + 784])
            for i in range(0, len(flat), 784)
        ]
        rng.shuffle(samples)
        cut = (len(samples) * 4) // 5
        train += [(s, digit) for s in samples[:cut]]
        test += [(s, digit) for s in samples[cut:]]
    rng.shuffle(train)
    rng.shuffle(test)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train), ("t10k", test)):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, [len(split), 28, 28],
                  b"".join(s for s, _ in split))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(split)],
                  bytes(d for _, d in split))
        print(name, len(split))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
