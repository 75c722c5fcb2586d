#!/usr/bin/env python3
"""Download BloodMNIST and convert it to a ccsi dataset pack.

Requires network access and numpy.  The output is the single-file pack
format the ccsi CLI consumes via --dataset <path>.pack:

    magic "CCSIPACK", version u32, N u32, H u32, W u32, C u32, K u32,
    manifest count u32 + (key,value) length-prefixed strings,
    pixels u8 [N*H*W*C] (NHWC), labels u32 [N], split ids u8 [N]
    (0 = train, 1 = val, 2 = test); all integers little-endian.

Usage:
    python3 tools/fetch_bloodmnist.py [--out data/bloodmnist.pack]
    python3 tools/fetch_bloodmnist.py --npz /path/to/bloodmnist.npz
"""

import argparse
import os
import struct
import sys
import tempfile
import urllib.request

import numpy as np

MIRRORS = [
    "https://zenodo.org/records/10519652/files/bloodmnist.npz?download=1",
    "https://zenodo.org/record/6496656/files/bloodmnist.npz?download=1",
]


def download(dest):
    last = None
    for url in MIRRORS:
        try:
            print(f"downloading {url}")
            urllib.request.urlretrieve(url, dest)
            return
        except Exception as e:  # try the next mirror
            last = e
            print(f"  failed: {e}", file=sys.stderr)
    raise SystemExit(f"all mirrors failed; last error: {last}")


def write_str(f, s):
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def convert(npz_path, out_path):
    data = np.load(npz_path)
    splits = [
        ("train", data["train_images"], data["train_labels"]),
        ("val", data["val_images"], data["val_labels"]),
        ("test", data["test_images"], data["test_labels"]),
    ]

    images, labels, split_ids = [], [], []
    for sid, (_, imgs, labs) in enumerate(splits):
        if imgs.ndim == 3:  # grayscale packs lack the channel axis
            imgs = imgs[..., None]
        images.append(np.ascontiguousarray(imgs, dtype=np.uint8))
        labels.append(labs.reshape(-1).astype(np.uint32))
        split_ids.append(np.full(len(labs), sid, dtype=np.uint8))

    n = sum(len(l) for l in labels)
    h, w, c = images[0].shape[1:4]
    k = int(max(l.max() for l in labels)) + 1
    counts = {name: len(labs) for (name, _, labs) in splits}
    print(f"{n} images {h}x{w}x{c}, {k} classes, splits {counts}")

    manifest = {
        "name": "bloodmnist",
        "classes": str(k),
        "source": "MedMNIST v2",
    }
    with open(out_path, "wb") as f:
        f.write(b"CCSIPACK")
        f.write(struct.pack("<6I", 1, n, h, w, c, k))
        f.write(struct.pack("<I", len(manifest)))
        for key in sorted(manifest):
            write_str(f, key)
            write_str(f, manifest[key])
        for imgs in images:
            f.write(imgs.tobytes())
        for labs in labels:
            f.write(labs.astype("<u4").tobytes())
        for ids in split_ids:
            f.write(ids.tobytes())
    print(f"wrote {out_path} ({os.path.getsize(out_path)} bytes)")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/bloodmnist.pack")
    ap.add_argument("--npz", help="use an already-downloaded bloodmnist.npz")
    args = ap.parse_args()

    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    if args.npz:
        convert(args.npz, args.out)
        return
    with tempfile.TemporaryDirectory() as tmp:
        npz = os.path.join(tmp, "bloodmnist.npz")
        download(npz)
        convert(npz, args.out)


if __name__ == "__main__":
    main()
