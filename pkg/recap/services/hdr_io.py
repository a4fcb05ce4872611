"""File formats: Radiance RGBE images, PNG previews, float dumps, BRDF tables, scene records and camera lists.

Binary layouts (all little-endian):

- float dump: b"RCAPFLT1", u32 ndim, ndim x u32 dims, f32 payload in C order
- BRDF table: b"RCAPLUT1", u32 resolution, u32 samples, u32 seed, f32 payload (R, R, 2)
- scene:      b"RCAPSCN1", u32 version, u32 count, then one f32 block per field
              (position 3, scale 3, rotation 4, opacity 1, basecolor 3,
              specular_tint 3, roughness 1, metallic 1), each block (count, width)
"""
import logging
import re
import struct
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import orjson
import torch
from PIL import Image
from pydantic import ValidationError

from recap.config import DTYPE
from recap.models.schemas import GaussianPoint, HdrParseError, InvalidArgumentError, MaterialParams, SceneFormatError
from recap.services.brdf import BrdfLut
from recap.services.envmap import LatLongImage
from recap.services.splat import Camera, GaussianScene

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

HDR_MAGICS = (b"#?RADIANCE", b"#?RGBE")
HDR_FORMAT = "32-bit_rle_rgbe"
HDR_MAX_DIM = 1 << 15
FLOAT_MAGIC = b"RCAPFLT1"
LUT_MAGIC = b"RCAPLUT1"
SCENE_MAGIC = b"RCAPSCN1"
SCENE_VERSION = 1
SCENE_FIELDS = (
    ("position", 3),
    ("scale", 3),
    ("rotation", 4),
    ("opacity", 1),
    ("basecolor", 3),
    ("specular_tint", 3),
    ("roughness", 1),
    ("metallic", 1),
)

_RESOLUTION = re.compile(r"^([+-])Y (\d+) ([+-])X (\d+)$")


def _as_array(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        return img.detach().cpu().numpy()
    if isinstance(img, LatLongImage):
        return img.texels.detach().cpu().numpy()
    return np.asarray(img)


# Radiance RGBE

class _ByteReader:
    """Bounds-checked cursor; every overrun becomes an HdrParseError at the failing offset"""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if n > self.remaining():
            raise HdrParseError(f"Truncated {what}: needed {n} bytes, {self.remaining()} left", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def byte(self, what: str) -> int:
        return self.take(1, what)[0]

    def line(self) -> str:
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise HdrParseError("Unterminated header line", self.pos)
        text = self.data[self.pos:end].decode("latin-1")
        self.pos = end + 1
        return text


def rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    """(..., 4) uint8 to (..., 3) float32: mantissa * 2^(e - 136), zero when e == 0"""
    mantissa = rgbe[..., :3].astype(np.float64)
    exponent = rgbe[..., 3:].astype(np.int32)
    value = np.ldexp(mantissa, exponent - 136)
    return np.where(exponent > 0, value, 0.0).astype(np.float32)


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if not np.all(np.isfinite(rgb)) or np.any(rgb < 0):
        raise InvalidArgumentError("RGBE encoding requires finite non-negative values")
    peak = rgb.max(axis=-1)
    mantissa, exponent = np.frexp(peak)
    if np.any(exponent + 128 > 255):
        raise InvalidArgumentError(f"Value {float(peak.max()):.3e} exceeds the RGBE range")
    nonzero = peak >= 1e-32
    scale = np.where(nonzero, mantissa * 256.0 / np.where(nonzero, peak, 1.0), 0.0)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    out[..., :3] = np.where(nonzero[..., None], np.floor(rgb * scale[..., None]), 0).astype(np.uint8)
    out[..., 3] = np.where(nonzero, exponent + 128, 0).astype(np.uint8)
    return out


def _parse_header(reader: _ByteReader) -> Tuple[int, int, str, str]:
    first = reader.line().encode("latin-1")
    if first not in HDR_MAGICS:
        raise HdrParseError(f"Bad magic {first[:16]!r}", 0)
    fmt = None
    while True:
        offset = reader.pos
        line = reader.line()
        if line == "":
            break
        if line.startswith("FORMAT="):
            fmt = line[len("FORMAT="):]
            if fmt != HDR_FORMAT:
                raise HdrParseError(f"Unsupported FORMAT '{fmt}'", offset)
    if fmt is None:
        raise HdrParseError("Header has no FORMAT line", reader.pos)

    offset = reader.pos
    match = _RESOLUTION.match(reader.line())
    if not match:
        raise HdrParseError("Unsupported or malformed resolution line", offset)
    y_sign, height, x_sign, width = match.groups()
    height, width = int(height), int(width)
    if not (0 < height <= HDR_MAX_DIM and 0 < width <= HDR_MAX_DIM):
        raise HdrParseError(f"Resolution {width}x{height} out of bounds", offset)
    return height, width, y_sign, x_sign


def _read_rle_scanline(reader: _ByteReader, width: int) -> np.ndarray:
    start = reader.pos
    head = reader.take(4, "scanline header")
    if ((head[2] << 8) | head[3]) != width:
        raise HdrParseError(f"Scanline width {(head[2] << 8) | head[3]} != {width}", start)
    row = np.zeros((width, 4), dtype=np.uint8)
    for channel in range(4):
        i = 0
        while i < width:
            offset = reader.pos
            count = reader.byte("run length")
            if count > 128:
                count -= 128
                if i + count > width:
                    raise HdrParseError("Run overruns the scanline", offset)
                row[i:i + count, channel] = reader.byte("run value")
            else:
                if count == 0 or i + count > width:
                    raise HdrParseError(f"Bad literal count {count}", offset)
                row[i:i + count, channel] = np.frombuffer(reader.take(count, "literal run"), dtype=np.uint8)
            i += count
    return row


def _read_flat_scanline(reader: _ByteReader, width: int, previous: Optional[np.ndarray]) -> np.ndarray:
    """Uncompressed pixels with the old (1, 1, 1, n) repeat encoding"""
    row = np.zeros((width, 4), dtype=np.uint8)
    i = 0
    shift = 0
    last = previous[-1] if previous is not None else None
    while i < width:
        offset = reader.pos
        pixel = np.frombuffer(reader.take(4, "pixel"), dtype=np.uint8)
        if pixel[0] == 1 and pixel[1] == 1 and pixel[2] == 1:
            if last is None:
                raise HdrParseError("Repeat code with no preceding pixel", offset)
            count = int(pixel[3]) << shift
            if i + count > width:
                raise HdrParseError("Repeat run overruns the scanline", offset)
            row[i:i + count] = last
            i += count
            shift += 8
            if shift > 24:
                raise HdrParseError("Repeat shift overflow", offset)
        else:
            row[i] = pixel
            last = pixel
            i += 1
            shift = 0
    return row


def read_rgbe(path: PathLike) -> np.ndarray:
    """Decode a Radiance file to float32 (H, W, 3), top row first"""
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"HDR file not found: {path}")
    reader = _ByteReader(path.read_bytes())
    height, width, y_sign, x_sign = _parse_header(reader)

    rows = []
    previous = None
    for _ in range(height):
        new_style = (
            8 <= width <= 0x7FFF
            and reader.remaining() >= 4
            and reader.data[reader.pos] == 2
            and reader.data[reader.pos + 1] == 2
            and reader.data[reader.pos + 2] < 128
        )
        row = _read_rle_scanline(reader, width) if new_style else _read_flat_scanline(reader, width, previous)
        rows.append(row)
        previous = row
    if reader.remaining():
        logger.debug(f"{path.name}: {reader.remaining()} trailing bytes ignored")

    image = rgbe_to_float(np.stack(rows))
    if y_sign == "+":
        image = image[::-1]
    if x_sign == "-":
        image = image[:, ::-1]
    return np.ascontiguousarray(image)


def read_hdr(path: PathLike) -> LatLongImage:
    return LatLongImage(torch.as_tensor(read_rgbe(path), dtype=DTYPE))


def _encode_rle_channel(data: np.ndarray) -> bytearray:
    out = bytearray()
    width = len(data)
    cur = 0
    while cur < width:
        begin_run = cur
        run_count = 0
        old_run_count = 0
        while run_count < 4 and begin_run < width:
            begin_run += old_run_count
            old_run_count = run_count
            run_count = 1
            while begin_run + run_count < width and run_count < 127 and data[begin_run] == data[begin_run + run_count]:
                run_count += 1
        if 1 < old_run_count == begin_run - cur:
            out += bytes((128 + old_run_count, data[cur]))
            cur = begin_run
        while cur < begin_run:
            n = min(begin_run - cur, 128)
            out.append(n)
            out += data[cur:cur + n].tobytes()
            cur += n
        if run_count >= 4:
            out += bytes((128 + run_count, data[begin_run]))
            cur += run_count
    return out


def write_hdr(img, path: PathLike) -> Path:
    """New-style RLE Radiance file; flat scanlines when the width is outside the RLE range"""
    rgb = _as_array(img)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InvalidArgumentError(f"HDR image must be (H, W, 3), got {rgb.shape}")
    rgbe = float_to_rgbe(rgb)
    height, width = rgbe.shape[:2]

    payload = bytearray(f"#?RADIANCE\nFORMAT={HDR_FORMAT}\n\n-Y {height} +X {width}\n".encode("ascii"))
    rle = 8 <= width <= 0x7FFF
    for row in rgbe:
        if not rle:
            payload += row.tobytes()
            continue
        payload += bytes((2, 2, width >> 8, width & 0xFF))
        for channel in range(4):
            payload += _encode_rle_channel(np.ascontiguousarray(row[:, channel]))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(payload))
    return path


# PNG

def write_png(img, path: PathLike) -> Path:
    """8-bit RGB, rounding half up"""
    data = _as_array(img).astype(np.float64)
    if data.ndim != 3 or data.shape[2] != 3:
        raise InvalidArgumentError(f"PNG image must be (H, W, 3), got {data.shape}")
    if np.any(np.isnan(data)) or data.min(initial=0.0) < 0.0 or data.max(initial=0.0) > 1.0:
        raise InvalidArgumentError("PNG values must lie in [0, 1]")
    quantized = np.floor(data * 255.0 + 0.5).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantized).save(path, format="PNG")
    return path


def read_png(path: PathLike) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"Image not found: {path}")
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return torch.as_tensor(data, dtype=DTYPE)


# Float dumps

def write_float_dump(array, path: PathLike) -> Path:
    data = np.ascontiguousarray(_as_array(array), dtype="<f4")
    header = FLOAT_MAGIC + struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + data.tobytes())
    return path


def read_float_dump(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FLOAT_MAGIC or len(raw) < 12:
        raise InvalidArgumentError(f"{path} is not a float dump")
    (ndim,) = struct.unpack_from("<I", raw, 8)
    if len(raw) < 12 + 4 * ndim:
        raise InvalidArgumentError(f"{path}: truncated float dump header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    payload = raw[12 + 4 * ndim:]
    if len(payload) != 4 * int(np.prod(dims, dtype=np.int64)):
        raise InvalidArgumentError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def write_lut(lut: BrdfLut, path: PathLike) -> Path:
    table = np.ascontiguousarray(lut.table.detach().numpy(), dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(LUT_MAGIC + struct.pack("<3I", lut.resolution, lut.samples, lut.seed) + table.tobytes())
    return path


def read_lut(path: PathLike) -> BrdfLut:
    raw = Path(path).read_bytes()
    if raw[:8] != LUT_MAGIC or len(raw) < 20:
        raise InvalidArgumentError(f"{path} is not a BRDF table")
    resolution, samples, seed = struct.unpack_from("<3I", raw, 8)
    payload = raw[20:]
    if len(payload) != resolution * resolution * 2 * 4:
        raise InvalidArgumentError(f"{path}: payload does not match resolution {resolution}")
    table = np.frombuffer(payload, dtype="<f4").reshape(resolution, resolution, 2)
    return BrdfLut(table=torch.as_tensor(table.astype(np.float64), dtype=DTYPE), samples=samples, seed=seed)


# Scene records

def write_scene(scene: GaussianScene, path: PathLike) -> Path:
    mat = scene.materials
    columns = {
        "position": scene.positions,
        "scale": scene.scales,
        "rotation": scene.rotations,
        "opacity": scene.opacities[:, None],
        "basecolor": mat.basecolor,
        "specular_tint": mat.tint,
        "roughness": mat.roughness[:, None],
        "metallic": mat.metallic[:, None],
    }
    payload = bytearray(SCENE_MAGIC + struct.pack("<2I", SCENE_VERSION, len(scene)))
    for name, width in SCENE_FIELDS:
        block = np.ascontiguousarray(columns[name].detach().numpy().reshape(len(scene), width), dtype="<f4")
        payload += block.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(payload))
    return path


def read_scene(path: PathLike) -> GaussianScene:
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"Scene file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != SCENE_MAGIC:
        raise SceneFormatError(f"{path}: bad scene magic")
    version, count = struct.unpack_from("<2I", raw, 8)
    if version != SCENE_VERSION:
        raise SceneFormatError(f"{path}: unsupported scene version {version}")
    if count == 0:
        raise SceneFormatError(f"{path}: scene has no points")
    per_point = sum(width for _, width in SCENE_FIELDS)
    if len(raw) - 16 != 4 * per_point * count:
        raise SceneFormatError(f"{path}: expected {4 * per_point * count} payload bytes, found {len(raw) - 16}")

    values = np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise SceneFormatError(f"{path}: non-finite values in scene payload")
    fields = {}
    cursor = 0
    for name, width in SCENE_FIELDS:
        fields[name] = values[cursor:cursor + count * width].reshape(count, width)
        cursor += count * width

    points = []
    try:
        for i in range(count):
            q = fields["rotation"][i]
            points.append(GaussianPoint(
                position=tuple(fields["position"][i]),
                scale=tuple(fields["scale"][i]),
                rotation=tuple(q / np.linalg.norm(q)) if np.linalg.norm(q) > 0 else tuple(q),
                opacity=float(fields["opacity"][i, 0]),
                material=MaterialParams(
                    basecolor=tuple(fields["basecolor"][i]),
                    specular_tint=tuple(fields["specular_tint"][i]),
                    roughness=float(fields["roughness"][i, 0]),
                    metallic=float(fields["metallic"][i, 0]),
                ),
            ))
    except ValidationError as e:
        raise SceneFormatError(f"{path}: invalid point record {len(points)}: {e.errors()[0]['msg']}") from e
    return GaussianScene.from_points(points)


# Cameras

def write_cameras(cameras: List[Camera], path: PathLike, file_paths: Optional[List[str]] = None) -> Path:
    """Synthetic-dataset transforms JSON; one shared horizontal field of view"""
    if not cameras:
        raise InvalidArgumentError("No cameras to write")
    first = cameras[0]
    frames = []
    for i, cam in enumerate(cameras):
        frame = {"transform_matrix": cam.to_transform().tolist()}
        if file_paths is not None:
            frame["file_path"] = file_paths[i]
        frames.append(frame)
    doc = {"camera_angle_x": first.fov_x, "w": first.width, "h": first.height, "frames": frames}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(doc, option=orjson.OPT_INDENT_2))
    return path


def read_transforms(path: PathLike, width: Optional[int] = None, height: Optional[int] = None) -> Tuple[List[Camera], List[Optional[str]]]:
    """Cameras plus each frame's file_path (None when absent)"""
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"Camera file not found: {path}")
    try:
        doc = orjson.loads(path.read_bytes())
        fov = float(doc["camera_angle_x"])
        w = int(width or doc["w"])
        h = int(height or doc["h"])
        cameras = [Camera.from_transform(f["transform_matrix"], fov, w, h) for f in doc["frames"]]
        files = [f.get("file_path") for f in doc["frames"]]
    except (orjson.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        if isinstance(e, InvalidArgumentError):
            raise
        raise InvalidArgumentError(f"{path}: malformed camera file ({e})") from e
    if not cameras:
        raise InvalidArgumentError(f"{path}: camera file has no frames")
    return cameras, files
