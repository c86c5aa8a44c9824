"""Convert the 5,000-image MNIST sample shipped inside the mlxtend wheel to IDX.

The sample stores one image per CSV row (784 pixels then the label). The
script writes ``images.idx``, ``labels.idx`` and a ``mnist5k.json`` dataset
descriptor into the output directory.

    pip download mlxtend==0.24.0 --no-deps -d /tmp/dl
    python3 scripts/mnist5k_to_idx.py /tmp/dl/mlxtend-0.24.0-py3-none-any.whl data/mnist5k
"""

import argparse
import gzip
import json
import zipfile
from pathlib import Path

import numpy as np

from layerscope.data import Dataset, write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel", help="mlxtend wheel (or the mnist_5k.csv.gz file itself)")
    parser.add_argument("out", help="output directory")
    args = parser.parse_args()

    if args.wheel.endswith(".whl"):
        with zipfile.ZipFile(args.wheel) as z, z.open(MEMBER) as f:
            rows = np.loadtxt(gzip.open(f), delimiter=",", dtype=np.int64)
    else:
        rows = np.loadtxt(gzip.open(args.wheel), delimiter=",", dtype=np.int64)
    images = rows[:, :784].reshape(-1, 1, 28, 28) / 255.0
    dataset = Dataset(images, rows[:, 784], "mnist5k")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(dataset, out / "images.idx", out / "labels.idx")
    desc = {"name": "mnist", "format": "idx", "images": "images.idx", "labels": "labels.idx"}
    (out / "mnist5k.json").write_text(json.dumps(desc, indent=2) + "\n")
    print(f"{len(dataset)} images written to {out}")


if __name__ == "__main__":
    main()
