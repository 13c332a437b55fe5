"""Build data/mnist5k-images-idx3-ubyte.gz from the 5000-digit MNIST sample
bundled in the ``mlxtend`` wheel (fetched with ``pip download``).

Usage: python scripts/make_mnist_subset.py [--wheel PATH]
"""

import argparse
import glob
import gzip
import io
import subprocess
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from mango.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel")
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "mnist5k-images-idx3-ubyte.gz"))
    args = ap.parse_args()
    wheel = args.wheel
    if wheel is None:
        tmp = tempfile.mkdtemp()
        subprocess.run(["pip", "download", "--no-deps", "-d", tmp, "mlxtend==0.24.0"], check=True)
        wheel = glob.glob(f"{tmp}/mlxtend-*.whl")[0]
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    pixels = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    write_idx(args.out, pixels, compress=True)
    print(f"wrote {len(pixels)} images to {args.out}")


if __name__ == "__main__":
    main()
