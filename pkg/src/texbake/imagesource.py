"""Target-image providers for the bake loop.

Every provider answers ``generate(requests, params)`` with one float RGB
image per request, sized like the request's render. The bake loop applies
the keep/update blend afterwards, whichever provider produced the images.

The remote provider speaks a small JSON protocol (POST /v1/generate) to a
depth-conditioned generator; ``make_mock_server`` implements the same
protocol by rendering a ground-truth textured mesh.
"""

from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, HTTPServer
import json
import os
from typing import NamedTuple
import urllib.error
import urllib.request

import numpy as np

from texbake import imageio
from texbake.raster import Camera, rasterize


class ImageSourceError(RuntimeError):
    pass


class SourceConnectionError(ImageSourceError):
    pass


class SourceHTTPError(ImageSourceError):
    def __init__(self, status, message):
        super().__init__(f"HTTP {status}: {message}")
        self.status = status


class SourceProtocolError(ImageSourceError):
    pass


class SourceSizeMismatch(ImageSourceError):
    pass


class GenerationParams(NamedTuple):
    prompt: str = ""
    negative_prompt: str = ""
    denoise_steps: int = 100
    noise_strength: float = 1.0
    seed: int = 0


@dataclass(eq=False)
class ViewRequest:
    index: int
    camera: Camera
    depth: np.ndarray  # (H, W) in [0, 1], near = 1
    init: np.ndarray  # (H, W, 3) render of the current texture
    update_mask: np.ndarray  # (H, W) bool

    @property
    def descriptor(self):
        return self.camera.descriptor

    @property
    def size(self):
        return self.camera.height, self.camera.width


# ------------------------------------------------------------- view grouping


def pair_symmetric_views(plan):
    """Symmetric pairs first (plan order, lower index leading), then singletons."""
    paired = set()
    groups = []
    for i, j in sorted((min(p), max(p)) for p in plan.symmetric_pairs):
        groups.append((i, j))
        paired.update((i, j))
    groups += [(i,) for i in range(len(plan.cameras)) if i not in paired]
    return groups


def splice_condition(depth_a, depth_b=None):
    """Side-by-side concatenation of two images of equal height."""
    if depth_b is None:
        return depth_a
    if depth_a.shape[0] != depth_b.shape[0]:
        raise ValueError("spliced images must share their height")
    return np.concatenate([depth_a, depth_b], axis=1)


def split_spliced(image, left_width):
    return image[:, :left_width], image[:, left_width:]


def blend_keep_update(generated, init, update_mask):
    """Generated pixels where the mask is set, the initial render elsewhere."""
    if generated.shape != init.shape or generated.shape[:2] != update_mask.shape:
        raise ValueError("blend inputs must share dimensions")
    mask = update_mask[..., None] if generated.ndim == 3 else update_mask
    return np.where(mask, generated, init)


# ------------------------------------------------------------------ providers


def oracle_targets(gt_mesh, gt_texture, camera):
    return rasterize(gt_mesh, camera, gt_texture).color


def quantize8(image):
    """Round to the 8-bit grid that PNG transport and image files impose."""
    return imageio.to_uint8(image) / 255.0


class OracleSource:
    """Renders a hidden ground-truth texture: perfectly view-consistent targets.

    Like every other provider it delivers 8-bit images unless ``quantize`` is
    off, so a bake does not depend on whether the images crossed the wire.
    """

    def __init__(self, gt_mesh, gt_texture, quantize=True):
        self.gt_mesh = gt_mesh
        self.gt_texture = gt_texture
        self.quantize = quantize

    def generate(self, requests, params=None):
        images = [oracle_targets(self.gt_mesh, self.gt_texture, r.camera) for r in requests]
        return [quantize8(i) for i in images] if self.quantize else images


def view_filename(descriptor, index):
    return (descriptor.replace(" ", "_") if descriptor else f"view_{index:02d}") + ".png"


class FileSource:
    """Reads pre-generated targets named after each view's descriptor."""

    def __init__(self, directory):
        self.directory = directory

    def generate(self, requests, params=None):
        images = []
        for r in requests:
            path = os.path.join(self.directory, view_filename(r.descriptor, r.index))
            try:
                img = imageio.read_rgb(path)
            except OSError as exc:
                raise ImageSourceError(f"cannot read target {path}: {exc}") from exc
            if img.shape[:2] != r.size:
                raise SourceSizeMismatch(f"{path} is {img.shape[1]}x{img.shape[0]}, expected {r.size[1]}x{r.size[0]}")
            images.append(img)
        return images


def encode_request(requests, params):
    if not 1 <= len(requests) <= 2:
        raise ValueError("a generation request carries one or two views")
    if len({r.size for r in requests}) != 1:
        raise ValueError("paired views must share their image size")
    if params.denoise_steps < 1:
        raise ValueError("denoise_steps must be at least 1")
    return {
        "prompt": params.prompt,
        "negative_prompt": params.negative_prompt,
        "denoise_steps": int(params.denoise_steps),
        "noise_strength": float(params.noise_strength),
        "seed": int(params.seed),
        "views": [
            {
                "descriptor": r.descriptor,
                "depth_png_b64": imageio.b64(imageio.depth_png_bytes(r.depth)),
                "init_png_b64": imageio.b64(imageio.rgb_png_bytes(r.init)),
                "mask_png_b64": imageio.b64(imageio.mask_png_bytes(r.update_mask)),
                "camera": r.camera.to_dict(),
            }
            for r in requests
        ],
    }


def decode_response(body, requests):
    """Images from a response body, split at the splice boundary when a pair
    came back as one wide image."""
    try:
        payload = json.loads(body)
        encoded = payload["images_png_b64"]
        images = [imageio.decode_rgb(imageio.unb64(s)) for s in encoded]
    except (ValueError, KeyError, TypeError, OSError) as exc:
        raise SourceProtocolError(f"malformed response body: {exc}") from exc
    if len(requests) == 2 and len(images) == 1:
        h, w = requests[0].size
        if images[0].shape[:2] != (h, w + requests[1].size[1]):
            raise SourceSizeMismatch(f"spliced image is {images[0].shape[1]}x{images[0].shape[0]}")
        images = list(split_spliced(images[0], w))
    if len(images) != len(requests):
        raise SourceProtocolError(f"expected {len(requests)} images, got {len(images)}")
    for img, r in zip(images, requests):
        if img.shape[:2] != r.size:
            raise SourceSizeMismatch(
                f"view '{r.descriptor}': got {img.shape[1]}x{img.shape[0]}, expected {r.size[1]}x{r.size[0]}"
            )
    return images


def remote_targets(endpoint, requests, params, timeout=600.0):
    body = json.dumps(encode_request(requests, params)).encode("utf-8")
    url = endpoint.rstrip("/") + "/v1/generate"
    req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            payload = resp.read()
    except urllib.error.HTTPError as exc:
        try:
            message = json.loads(exc.read()).get("error", exc.reason)
        except (ValueError, AttributeError):
            message = exc.reason
        raise SourceHTTPError(exc.code, message) from exc
    except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
        raise SourceConnectionError(f"cannot reach {url}: {getattr(exc, 'reason', exc)}") from exc
    images = decode_response(payload, requests)
    return [blend_keep_update(img, r.init, r.update_mask) for img, r in zip(images, requests)]


class RemoteSource:
    def __init__(self, endpoint, timeout=600.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def generate(self, requests, params=None):
        return remote_targets(self.endpoint, requests, params or GenerationParams(), self.timeout)


# ----------------------------------------------------------------- mock server


class _BadRequest(ValueError):
    pass


def _parse_views(payload):
    if not isinstance(payload, dict):
        raise _BadRequest("body must be a JSON object")
    views = payload.get("views")
    if not isinstance(views, list) or not 1 <= len(views) <= 2:
        raise _BadRequest("'views' must be a list of one or two entries")
    steps = payload.get("denoise_steps", 100)
    if not isinstance(steps, int) or steps < 1:
        raise _BadRequest("'denoise_steps' must be a positive integer")
    parsed = []
    for v in views:
        try:
            cam = Camera.from_dict(v["camera"], v.get("descriptor", ""))
            init = imageio.decode_rgb(imageio.unb64(v["init_png_b64"])) if v.get("init_png_b64") else None
            mask = imageio.decode_mask(imageio.unb64(v["mask_png_b64"])) if v.get("mask_png_b64") else None
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise _BadRequest(f"bad view entry: {exc}") from exc
        for name, arr in (("init", init), ("mask", mask)):
            if arr is not None and arr.shape[:2] != (cam.height, cam.width):
                raise _BadRequest(f"{name} image does not match the camera size")
        parsed.append((cam, init, mask))
    if len({(c.width, c.height) for c, _, _ in parsed}) != 1:
        raise _BadRequest("paired views must share their image size")
    return parsed


def make_mock_server(gt_mesh, gt_texture, port=0, host="127.0.0.1", spliced=False):
    """HTTP server answering each view with the ground-truth render for its camera.

    Keep pixels are copied from the request's init image when a mask is sent.
    With ``spliced`` a pair is answered as one side-by-side image.
    """

    class Handler(BaseHTTPRequestHandler):
        def _send(self, status, payload):
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            if self.path.rstrip("/") != "/v1/generate":
                self._send(404, {"error": f"unknown path {self.path}"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            try:
                views = _parse_views(json.loads(self.rfile.read(length)))
            except (ValueError, UnicodeDecodeError) as exc:
                self._send(400, {"error": str(exc)})
                return
            images = []
            for cam, init, mask in views:
                img = oracle_targets(gt_mesh, gt_texture, cam)
                if mask is not None and init is not None:
                    img = blend_keep_update(img, init, mask)
                images.append(img)
            if spliced and len(images) == 2:
                images = [splice_condition(images[0], images[1])]
            self._send(200, {"images_png_b64": [imageio.b64(imageio.rgb_png_bytes(i)) for i in images]})

        def log_message(self, fmt, *args):
            pass

    return HTTPServer((host, port), Handler)


def serve_mock(gt_mesh, gt_texture, port, host="127.0.0.1"):
    server = make_mock_server(gt_mesh, gt_texture, port, host)
    try:
        server.serve_forever()
    finally:
        server.server_close()
