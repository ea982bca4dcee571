"""Write MNIST digits in IDX format from the 5000-digit subset shipped with mlxtend.

Usage: python tools/make_mnist_idx.py [--out data/mnist] [--wheel path/to/mlxtend.whl]

Without --wheel the installed mlxtend package is used; if neither is available
the wheel is fetched with pip.
"""

import argparse
import gzip
import io
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv_bytes(wheel):
    if wheel:
        with zipfile.ZipFile(wheel) as z:
            return z.read(MEMBER)
    try:
        import mlxtend  # noqa: F401

        path = pathlib.Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"
        return path.read_bytes()
    except ImportError:
        pass
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-d", tmp, "mlxtend"]
        )
        whl = next(pathlib.Path(tmp).glob("mlxtend-*.whl"))
        with zipfile.ZipFile(whl) as z:
            return z.read(MEMBER)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--wheel", default=None)
    args = ap.parse_args()

    text = gzip.decompress(read_csv_bytes(args.wheel)).decode()
    images, labels = bytearray(), bytearray()
    count = 0
    for line in io.StringIO(text):
        values = line.strip().split(",")
        if len(values) != 785:
            continue
        images.extend(int(round(float(v))) for v in values[:784])
        labels.append(int(float(values[784])))
        count += 1

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images.idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, count, 28, 28) + bytes(images))
    (out / "labels.idx1-ubyte").write_bytes(struct.pack(">II", 0x801, count) + bytes(labels))
    print(f"wrote {count} digits to {out}")


if __name__ == "__main__":
    main()
