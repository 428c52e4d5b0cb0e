#!/usr/bin/env python3
"""Build IDX-format MNIST files from the digit subset bundled in the `mnist` npm package.

The npm tarball ships ~10k MNIST digits as JSON arrays of pixel intensities in
[0, 1] (rounded to three decimals). Bytes are recovered as round(255 * x), which
is exact at that precision. The digits are shuffled with a fixed seed and split
into 8000 training and the remaining test images.

Usage: python3 scripts/fetch_mnist.py [OUT_DIR]   (default: data/mnist)
"""
import io
import json
import struct
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

import numpy as np

N_TRAIN = 8000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        tgz = next(Path(tmp).glob("mnist-*.tgz"))
        images, labels = [], []
        with tarfile.open(tgz) as tar:
            for digit in range(10):
                member = tar.extractfile(f"package/src/digits/{digit}.json")
                raw = np.asarray(json.load(io.TextIOWrapper(member))["data"])
                pix = np.rint(raw * 255.0).reshape(-1, 784)
                images.append(pix)
                labels.append(np.full(len(pix), digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    perm = np.random.RandomState(0).permutation(len(images))
    images, labels = images[perm], labels[perm]
    write_images(out / "train-images-idx3-ubyte", images[:N_TRAIN])
    write_labels(out / "train-labels-idx1-ubyte", labels[:N_TRAIN])
    write_images(out / "t10k-images-idx3-ubyte", images[N_TRAIN:])
    write_labels(out / "t10k-labels-idx1-ubyte", labels[N_TRAIN:])
    print(f"wrote {N_TRAIN} train / {len(images) - N_TRAIN} test images to {out}")


if __name__ == "__main__":
    main()
