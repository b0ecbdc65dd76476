"""Write the 5000-digit MNIST sample bundled with mlxtend as gzipped IDX files.

    pip install mlxtend
    python scripts/build_mnist_subset.py tests/data

Produces ``mnist5k-images-idx3-ubyte.gz`` and ``mnist5k-labels-idx1-ubyte.gz``
(500 images per digit, 28x28, original byte values).
"""
import gzip
import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from iseat.data import idx_images_bytes, idx_labels_bytes


def main(out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    X, y = mnist_data()
    images = X.astype(np.uint8).reshape(-1, 28, 28)
    for name, payload in (
        ("mnist5k-images-idx3-ubyte.gz", idx_images_bytes(images)),
        ("mnist5k-labels-idx1-ubyte.gz", idx_labels_bytes(y)),
    ):
        # mtime=0 keeps the archive byte-identical across rebuilds
        (out / name).write_bytes(gzip.compress(payload, mtime=0))
        print(out / name)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data")
