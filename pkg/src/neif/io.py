"""File formats: PFM/PGM rasters, scene manifests, DiLiGenT folders, model bundles, CSV."""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .scene import Scene

MANIFEST = "scene.json"
MANIFEST_VERSION = 1
MODEL_FILE = "model.json"
PARAMS_FILE = "params.npz"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.csv"
HISTORY_TERMS = ("rec", "si", "az", "gp", "shadow", "recshadow")


class DataError(Exception):
    """Malformed or missing input data; ``path`` names the offending file."""

    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = None if path is None else str(path)


# ---- atomic writes ------------------------------------------------------------------

def atomic_write(path, data: bytes):
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write(path, text.encode("utf-8"))


# ---- rasters --------------------------------------------------------------------------

def encode_pfm(array) -> bytes:
    """Little-endian PFM (scale -1); 2-D -> greyscale, (H, W, 3) -> colour."""
    a = np.asarray(array)
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds (H, W) or (H, W, 3) arrays, got {a.shape}")
    h, w = a.shape[:2]
    body = np.ascontiguousarray(a[::-1], dtype="<f4").tobytes()  # PFM rows run bottom-up
    return tag + b"\n%d %d\n-1.0\n" % (w, h) + body


def decode_pfm(data: bytes, path=None) -> np.ndarray:
    stream = _io.BytesIO(data)
    try:
        tag = stream.readline().strip()
        w, h = (int(v) for v in stream.readline().split())
        scale = float(stream.readline())
    except ValueError as exc:
        raise DataError("malformed PFM header", path) from exc
    if tag not in (b"Pf", b"PF"):
        raise DataError("not a PFM file", path)
    channels = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    body = stream.read()
    if len(body) != h * w * channels * 4:
        raise DataError(f"PFM payload size mismatch for {w}x{h}x{channels}", path)
    a = np.frombuffer(body, dtype=dtype).reshape((h, w, channels) if channels == 3 else (h, w))
    return a[::-1].astype(np.float64)


def write_pfm(path, array):
    atomic_write(path, encode_pfm(array))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(_read_bytes(path), path)


def encode_pgm(array) -> bytes:
    """Binary P5 with maxval 255; booleans are stored as 0/255."""
    a = np.asarray(array)
    if a.ndim != 2:
        raise ValueError("PGM holds 2-D arrays")
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    if a.min() < 0 or a.max() > 255:
        raise ValueError("PGM values must be in [0, 255]")
    h, w = a.shape
    return b"P5\n%d %d\n255\n" % (w, h) + a.astype(np.uint8).tobytes()


def decode_pgm(data: bytes, path=None) -> np.ndarray:
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise DataError("truncated PGM header", path)
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise DataError("not a binary PGM file", path)
    w, h, maxval = (int(v) for v in fields[1:])
    body = data[pos + 1:]
    if maxval > 255 or len(body) != w * h:
        raise DataError("unsupported or truncated PGM payload", path)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, array):
    atomic_write(path, encode_pgm(array))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(_read_bytes(path), path)


def read_mask(path) -> np.ndarray:
    return read_pgm(path) > 127


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError("missing file", path) from exc


# ---- scene manifests --------------------------------------------------------------------

def save_scene(scene: Scene, directory):
    """Write images/maps as rasters plus a JSON manifest; the manifest goes last.

    Rasters are float32, so arrays round-trip exactly when they are already
    float32-representable (``quantize_scene``).
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {"images": [], "mask": "mask.pgm"}
    for j, img in enumerate(scene.images):
        name = f"image_{j:03d}.pfm"
        write_pfm(d / name, img)
        files["images"].append(name)
    write_pgm(d / files["mask"], scene.mask)
    if scene.gt_normals is not None:
        files["normals"] = "normals.pfm"
        write_pfm(d / files["normals"], scene.gt_normals)
    if scene.gt_depth is not None:
        files["depth"] = "depth.pfm"
        write_pfm(d / files["depth"], scene.gt_depth)
    manifest = {
        "version": MANIFEST_VERSION,
        "resolution": list(scene.shape),
        "n_lights": scene.n_images,
        "files": files,
        "lights": None if scene.gt_lights is None else np.asarray(scene.gt_lights).tolist(),
        "intensities": None if scene.gt_intensities is None else np.asarray(scene.gt_intensities).tolist(),
        "provenance": scene.meta,
    }
    atomic_write_text(d / MANIFEST, json.dumps(manifest, indent=2))
    return d / MANIFEST


def quantize_scene(scene: Scene) -> Scene:
    """Round every array to float32 precision (values kept as float64)."""
    def q(a):
        return None if a is None else np.asarray(a, dtype=np.float32).astype(np.float64)

    return Scene(q(scene.images), scene.mask, q(scene.gt_normals), q(scene.gt_depth),
                 scene.gt_lights, scene.gt_intensities, dict(scene.meta))


def load_scene(path) -> Scene:
    """Load a scene from a manifest, its directory, or a DiLiGenT-style folder."""
    p = Path(path)
    if p.is_dir() and not (p / MANIFEST).exists() and (p / "filenames.txt").exists():
        return load_diligent(p)
    manifest_path = p / MANIFEST if p.is_dir() else p
    try:
        manifest = json.loads(_read_bytes(manifest_path))
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON ({exc.msg})", manifest_path) from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unknown manifest version {manifest.get('version')!r}", manifest_path)
    root = manifest_path.parent
    files = manifest.get("files", {})
    if "images" not in files or "mask" not in files:
        raise DataError("manifest lacks images or mask entry", manifest_path)
    shape = tuple(manifest["resolution"])
    mask = read_mask(root / files["mask"])
    images = []
    for name in files["images"]:
        img = read_pfm(root / name)
        if img.shape != shape:
            raise DataError(f"image shape {img.shape} differs from declared {shape}", root / name)
        images.append(img)
    if mask.shape != shape:
        raise DataError(f"mask shape {mask.shape} differs from declared {shape}", root / files["mask"])
    if len(images) != manifest["n_lights"]:
        raise DataError(f"manifest declares {manifest['n_lights']} lights but lists {len(images)} images", manifest_path)
    normals = read_pfm(root / files["normals"]) if "normals" in files else None
    depth = read_pfm(root / files["depth"]) if "depth" in files else None
    lights = None if manifest.get("lights") is None else np.array(manifest["lights"], dtype=np.float64)
    ints = None if manifest.get("intensities") is None else np.array(manifest["intensities"], dtype=np.float64)
    try:
        return Scene(np.stack(images), mask, normals, depth, lights, ints, manifest.get("provenance") or {})
    except ValueError as exc:
        raise DataError(str(exc), manifest_path) from exc


def _read_image(path):
    path = Path(path)
    if not path.exists():
        raise DataError("missing file", path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    if path.suffix.lower() in (".pgm",):
        return read_pgm(path).astype(np.float64)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise DataError("PNG decoding needs Pillow; convert images to PFM first", path) from exc
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.dtype == np.uint16 or im.mode.startswith("I;16"):
        scale = 65535.0
    else:
        scale = 255.0
    return a.astype(np.float64) / scale


def _to_gray(a):
    return a[..., :3].mean(axis=-1) if a.ndim == 3 else a


def load_diligent(directory) -> Scene:
    """Read the DiLiGenT layout: filenames.txt, light_directions.txt,
    light_intensities.txt (RGB per line), mask.png and optionally Normal_gt.mat.

    Colour images are converted to grey by averaging the channels; the
    ground-truth intensity is the channel mean too.
    """
    d = Path(directory)

    def lines(name):
        path = d / name
        if not path.exists():
            raise DataError("missing file", path)
        return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]

    names = lines("filenames.txt")
    try:
        lights = np.loadtxt(d / "light_directions.txt", ndmin=2)
        ints = np.loadtxt(d / "light_intensities.txt", ndmin=2)
    except OSError as exc:
        raise DataError("missing light files", d) from exc
    except ValueError as exc:
        raise DataError(f"unparseable light file ({exc})", d) from exc
    if not (len(names) == len(lights) == len(ints)):
        raise DataError(f"{len(names)} images, {len(lights)} directions, {len(ints)} intensities", d)
    mask_path = next((d / n for n in ("mask.png", "mask.pgm") if (d / n).exists()), d / "mask.png")
    mask = _to_gray(_read_image(mask_path)) > 0.5
    images = np.stack([_to_gray(_read_image(d / n)) for n in names])
    lights = lights / np.linalg.norm(lights, axis=1, keepdims=True)
    normals = None
    if (d / "Normal_gt.mat").exists():
        from scipy.io import loadmat

        normals = np.asarray(loadmat(d / "Normal_gt.mat")["Normal_gt"], dtype=np.float64)
    try:
        return Scene(images, mask, normals, None, lights, ints.mean(axis=1), {"generator": "diligent", "source": str(d)})
    except ValueError as exc:
        raise DataError(str(exc), d) from exc


# ---- provenance and CSV -----------------------------------------------------------------

def config_hash(*dicts) -> str:
    """Stable 12-hex digest of JSON-serialisable configuration dictionaries."""
    blob = json.dumps(dicts, sort_keys=True, default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "__dict__"):
        return vars(obj)
    raise TypeError(f"not serialisable: {type(obj)}")


def history_csv(history, chash) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "phase", *HISTORY_TERMS, "total", "config_hash"])
    for r in history:
        row = [r.epoch, r.phase]
        row += [repr(float(r.terms[t])) if t in r.terms else "" for t in HISTORY_TERMS]
        writer.writerow(row + [repr(float(r.total)), chash])
    return buf.getvalue()


def write_rows(path, header, rows):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---- trained models ---------------------------------------------------------------------

def save_model(model, directory, extra=None):
    """Parameters to npz, estimates to rasters, configuration to JSON (written last)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    buf = _io.BytesIO()
    np.savez(buf, **model.fields.params)
    atomic_write(d / PARAMS_FILE, buf.getvalue())
    write_pfm(d / "normals.pfm", model.normals)
    write_pfm(d / "depth.pfm", model.depth)
    train_cfg = model.config.to_dict() if model.config is not None else None
    chash = config_hash(model.fields.config.to_dict(), train_cfg)
    atomic_write_text(d / HISTORY_FILE, history_csv(model.history, chash))
    doc = {
        "field_config": model.fields.config.to_dict(),
        "train_config": train_cfg,
        "config_hash": chash,
        "lights": np.asarray(model.lights).tolist(),
        "intensities": np.asarray(model.intensities).tolist(),
        "extra": extra or {},
    }
    atomic_write_text(d / MODEL_FILE, json.dumps(doc, indent=2, default=_jsonable))
    return chash


def load_model(directory):
    from .fields import FieldConfig, NeuralFields
    from .trainer import TrainConfig, TrainedModel

    d = Path(directory)
    try:
        doc = json.loads(_read_bytes(d / MODEL_FILE))
    except json.JSONDecodeError as exc:
        raise DataError("model file is not valid JSON", d / MODEL_FILE) from exc
    try:
        with np.load(d / PARAMS_FILE) as z:
            params = {k: z[k].astype(np.float64) for k in z.files}
    except FileNotFoundError as exc:
        raise DataError("missing file", d / PARAMS_FILE) from exc
    fields = NeuralFields(FieldConfig.from_dict(doc["field_config"]), params=params)
    cfg = TrainConfig.from_dict(doc["train_config"]) if doc.get("train_config") else None
    model = TrainedModel(
        fields,
        read_pfm(d / "normals.pfm"),
        np.array(doc["lights"]),
        np.array(doc["intensities"]),
        read_pfm(d / "depth.pfm"),
        [],
        cfg,
        doc.get("config_hash", ""),
    )
    return model
