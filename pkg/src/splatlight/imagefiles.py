"""Bit-exact image file formats for golden testing.

HDR frames are portable float maps: header ``PF``, ``width height``, scale
``-1.0`` (little-endian), rows bottom-up, 32-bit RGB floats.  Display frames
are binary portable pixmaps (``P6``, maxval 255, rows top-down).
"""

import numpy as np


def pfm_bytes(image):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PFM writer expects an (H, W, 3) array")
    h, w, _ = image.shape
    header = b"PF\n" + f"{w} {h}\n".encode("ascii") + b"-1.0\n"
    return header + np.ascontiguousarray(image[::-1], dtype="<f4").tobytes()


def write_pfm(path, image):
    with open(path, "wb") as f:
        f.write(pfm_bytes(image))


def read_pfm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"PF":
            raise ValueError(f"not a color PFM file: magic {magic!r}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        count = w * h * 3
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dtype, count=count)
        return data.reshape(h, w, 3)[::-1].astype(np.float64)


def write_ppm(path, image):
    """8-bit binary PPM from [0, 1] display values."""
    data = ppm_bytes(image)
    with open(path, "wb") as f:
        f.write(data)


def ppm_bytes(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM writer expects an (H, W, 3) array")
    h, w, _ = image.shape
    if image.dtype == np.uint8:
        pixels = image
    else:
        pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_ppm(path_or_bytes):
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as f:
            data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM file")
    # header: magic, width, height, maxval, single whitespace, then payload
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only maxval 255 supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3)


def write_images(hdr, ldr, prefix, frame):
    """Write the frame pair; returns (hdr path, ldr path)."""
    hdr_path = f"{prefix}_{frame:04d}.pfm"
    ldr_path = f"{prefix}_{frame:04d}.ppm"
    write_pfm(hdr_path, hdr)
    write_ppm(ldr_path, ldr)
    return hdr_path, ldr_path
