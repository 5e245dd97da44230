#!/usr/bin/env python3
"""Download the 4 MNIST IDX files into a directory and verify checksums.

Usage: python scripts/fetch_mnist.py <target-dir> [base-url]

Any mirror hosting the canonical gzipped files works; the defaults try
the ossci S3 mirror. Files already present and checksum-clean are kept.
"""

import hashlib
import sys
import urllib.request
from pathlib import Path

FILES = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}

DEFAULT_BASE = "https://ossci-datasets.s3.amazonaws.com/mnist/"


def main() -> int:
    if len(sys.argv) < 2:
        print(__doc__)
        return 2
    target = Path(sys.argv[1])
    base = sys.argv[2] if len(sys.argv) > 2 else DEFAULT_BASE
    target.mkdir(parents=True, exist_ok=True)
    for name, md5 in FILES.items():
        path = target / name
        if path.exists() and hashlib.md5(path.read_bytes()).hexdigest() == md5:
            print(f"{name}: ok (cached)")
            continue
        url = base.rstrip("/") + "/" + name
        print(f"fetching {url}")
        data = urllib.request.urlopen(url, timeout=60).read()
        digest = hashlib.md5(data).hexdigest()
        if digest != md5:
            print(f"{name}: checksum mismatch ({digest} != {md5})", file=sys.stderr)
            return 1
        path.write_bytes(data)
        print(f"{name}: ok ({len(data):,} bytes)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
