"""Write the 5,000-image MNIST sample bundled with mlxtend as IDX files.

Usage: python scripts/make_mnist_subset.py [OUT_DIR]

Downloads the mlxtend wheel with pip (no install), reads
``mlxtend/data/data/mnist_5k.csv.gz`` (500 images per digit, 785 columns:
784 pixels then the label) and writes gzipped IDX files:
``subset-images-idx3-ubyte.gz`` and ``subset-labels-idx1-ubyte.gz``.
"""
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from tdvcl.tasks import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(out_dir="data/mnist5k"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q",
                        "-d", tmp, "mlxtend==0.24.0"], check=True)
        wheel = next(Path(tmp).glob("mlxtend-*.whl"))
        raw = zipfile.ZipFile(wheel).read(MEMBER)
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",", dtype=np.int64)
    images = table[:, :784].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, 784].astype(np.uint8)
    write_idx(images, labels, out / "subset-images-idx3-ubyte.gz",
              out / "subset-labels-idx1-ubyte.gz", compress=True)
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
