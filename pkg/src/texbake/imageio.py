"""PNG encoding for textures, renders, depth maps and masks."""

import base64
import io

import numpy as np
from PIL import Image


def to_uint8(rgb):
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def rgb_png_bytes(rgb):
    buf = io.BytesIO()
    Image.fromarray(to_uint8(rgb), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def depth_png_bytes(depth01):
    """16-bit grayscale PNG of values in [0, 1]."""
    q = np.round(np.clip(depth01, 0.0, 1.0) * 65535.0).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    return buf.getvalue()


def mask_png_bytes(mask):
    buf = io.BytesIO()
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_rgb(data):
    img = Image.open(io.BytesIO(data))
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def decode_depth(data):
    img = Image.open(io.BytesIO(data))
    arr = np.asarray(img)
    if arr.dtype != np.uint16:
        arr = np.asarray(img.convert("I"), dtype=np.int64)
    return arr.astype(np.float64) / 65535.0


def decode_mask(data):
    arr = np.asarray(Image.open(io.BytesIO(data)).convert("L"))
    return arr >= 128


def b64(data):
    return base64.b64encode(data).decode("ascii")


def unb64(text):
    return base64.b64decode(text.encode("ascii"), validate=True)


def read_rgb(path):
    with open(path, "rb") as fh:
        return decode_rgb(fh.read())


def write_rgb(path, rgb):
    with open(path, "wb") as fh:
        fh.write(rgb_png_bytes(rgb))


def write_depth(path, depth01):
    with open(path, "wb") as fh:
        fh.write(depth_png_bytes(depth01))


def read_depth(path):
    with open(path, "rb") as fh:
        return decode_depth(fh.read())


def write_mask(path, mask):
    with open(path, "wb") as fh:
        fh.write(mask_png_bytes(mask))


def read_mask(path):
    with open(path, "rb") as fh:
        return decode_mask(fh.read())
