"""Build the bundled MNIST subset (IDX, gzip) from the 5k-sample CSV that ships in mlxtend.

Usage: python scripts/make_mnist_subset.py path/to/mlxtend-*.whl [outdir]

The CSV holds 500 images per digit, sorted by digit, label in the last column.
A fixed-seed stratified split keeps 400 per digit for training, 100 for test.
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx_gz(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    code = 0x0803 if array.ndim == 3 else 0x0801
    header = struct.pack(">I", code) + struct.pack(">" + "I" * array.ndim, *array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.tobytes())


def main(wheel, outdir="data"):
    raw = zipfile.ZipFile(wheel).read(MEMBER)
    table = np.loadtxt(gzip.decompress(raw).decode().splitlines(), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)

    rng = np.random.default_rng(20160101)
    train_idx, test_idx = [], []
    for digit in range(10):
        idx = rng.permutation(np.flatnonzero(labels == digit))
        train_idx.append(idx[:400])
        test_idx.append(idx[400:])
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", train_idx), ("t10k", test_idx)):
        idx = rng.permutation(np.concatenate(idx))
        write_idx_gz(out / f"mnist5k-{name}-images-idx3-ubyte.gz", images[idx])
        write_idx_gz(out / f"mnist5k-{name}-labels-idx1-ubyte.gz", labels[idx])


if __name__ == "__main__":
    main(*sys.argv[1:])
