#!/usr/bin/env python3
"""Writes a few CAMUS-style 2CH patient folders (MetaImage + Info_2CH.cfg).

usage: make_fake_camus.py <root> <patients>
Sequences are 40 wide, 30 high, 6 frames, ED=2, ES=5; odd patients use zlib payloads.
"""
import os
import sys
import zlib

W, H, N, ED, ES = 40, 30, 6, 2, 5


def write_mhd(path, dims, payload, compressed):
    base = os.path.splitext(os.path.basename(path))[0]
    data_name = base + (".zraw" if compressed else ".raw")
    blob = zlib.compress(payload) if compressed else payload
    lines = [
        "ObjectType = Image",
        f"NDims = {len(dims)}",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"CompressedData = {'True' if compressed else 'False'}",
    ]
    if compressed:
        lines.append(f"CompressedDataSize = {len(blob)}")
    lines += [
        "ElementSpacing = " + " ".join("1" for _ in dims),
        "DimSize = " + " ".join(str(d) for d in dims),
        "ElementType = MET_UCHAR",
        f"ElementDataFile = {data_name}",
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(os.path.dirname(path), data_name), "wb") as f:
        f.write(blob)


def main():
    root, patients = sys.argv[1], int(sys.argv[2])
    for p in range(1, patients + 1):
        pid = f"patient{p:04d}"
        d = os.path.join(root, "training", pid)
        os.makedirs(d, exist_ok=True)
        compressed = p % 2 == 1
        seq = bytearray()
        for z in range(N):
            for y in range(H):
                for x in range(W):
                    seq.append((x * 5 + y * 3 + z * 20 + p) % 256)
        write_mhd(os.path.join(d, f"{pid}_2CH_sequence.mhd"), (W, H, N), bytes(seq), compressed)
        gt = bytearray((x // 10) % 4 for y in range(H) for x in range(W))
        write_mhd(os.path.join(d, f"{pid}_2CH_ED_gt.mhd"), (W, H), bytes(gt), compressed)
        with open(os.path.join(d, "Info_2CH.cfg"), "w") as f:
            f.write(f"ED: {ED}\nES: {ES}\nNbFrame: {N}\nSex: F\nAge: 50\nImageQuality: Good\n")


if __name__ == "__main__":
    main()
