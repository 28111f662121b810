"""Write the 5,000-sample MNIST subset shipped inside the mlxtend wheel as gzipped IDX files.

usage: python tools/make_mnist_subset.py path/to/mlxtend-*.whl src/bcflsim/data/mnist5k
"""
import argparse
import gzip
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("wheel")
    ap.add_argument("out")
    args = ap.parse_args()
    raw = gzip.decompress(zipfile.ZipFile(args.wheel).read(MEMBER))
    rows = np.loadtxt(raw.decode().splitlines(), delimiter=",", dtype=np.int64)
    images = rows[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = rows[:, -1].astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the gzip output byte-stable
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28) + images.tobytes())
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)) + labels.tobytes())
    print(f"wrote {len(images)} samples to {out}")


if __name__ == "__main__":
    main()
