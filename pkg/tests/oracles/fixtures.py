"""Byte-level writers for loader fixtures, built with ``struct`` only."""

import struct


def idx_images(images, magic=0x00000803):
    """``images`` is a list of row lists of ints in 0..255."""
    rows, cols = len(images[0]), len(images[0][0])
    out = struct.pack(">IIII", magic, len(images), rows, cols)
    for img in images:
        for row in img:
            out += struct.pack(f">{cols}B", *row)
    return out


def idx_labels(labels, magic=0x00000801):
    return struct.pack(">II", magic, len(labels)) + struct.pack(f">{len(labels)}B", *labels)


def cifar_records(records):
    """``records`` is a list of ``(label, flat pixel list)``."""
    out = b""
    for label, pixels in records:
        out += struct.pack("B", label) + struct.pack(f"{len(pixels)}B", *pixels)
    return out


def checkpoint_header(version=1, metadata=b"{}"):
    return b"UNSR" + struct.pack("<HI", version, len(metadata)) + metadata
