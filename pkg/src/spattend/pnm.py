"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""

import numpy as np


def to_bytes(image):
    """Float image in [0, 1] (H, W) / (H, W, 1) / (H, W, 3) -> PNM file bytes."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return magic + b"\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def write(path, image):
    with open(path, "wb") as f:
        f.write(to_bytes(image))


def _tokens(data, count, pos):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(data[start:pos])
    return out, pos


def from_bytes(data):
    """Decode P5/P6 bytes to a float ``(H, W, C)`` array in [0, 1]."""
    (magic, w, h, maxval), pos = _tokens(data, 4, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 256:
        raise ValueError(f"only 8-bit PNM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    c = 1 if magic == b"P5" else 3
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    return raw.reshape(h, w, c).astype(np.float64) / maxval


def read(path):
    with open(path, "rb") as f:
        return from_bytes(f.read())
