"""On-disk sample store.

Layout::

    root/manifest.txt
    root/<split>/<id>/audio.f32    little-endian float32, interleaved L/R, 6400 values
    root/<split>/<id>/depth.pgm16  binary PGM (P5), maxval 65535, big-endian samples
    root/<split>/<id>/gray.pgm16   same encoding
    root/<split>/<id>/scene.txt    scene file the sample was rendered from
    root/<split>/<id>/meta.txt     key=value: id, split, seed, scene_hash, onset_index,
                                   resolution and sha256 of the three data files

Image values are stored as ``round(v * 65535)``.
"""
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .preprocess import BinauralClip, CLIP_LENGTH

SPLITS = ("train", "val", "test")
MANIFEST = "manifest.txt"
FORMAT_TAG = "echo2depth-dataset-v1"
# Desk-scale split counts (a tenth of a 52k-sample capture).
DEFAULT_SPLIT_COUNTS = {"train": 3950, "val": 750, "test": 504}
# scene seeds for split s live in [SEED_STRIDE * k_s, SEED_STRIDE * (k_s + 1)) + base
SEED_STRIDE = 1_000_000


class DatasetError(RuntimeError):
    pass


@dataclass
class SampleRecord:
    id: str
    clip: BinauralClip
    depth: np.ndarray
    gray: np.ndarray
    scene_seed: int
    split: str
    scene_text: str = ""

    @property
    def scene_hash(self) -> str:
        return hashlib.sha256(self.scene_text.encode()).hexdigest()


def split_seed_range(split: str, base_seed: int = 0) -> range:
    k = SPLITS.index(split)
    start = base_seed * len(SPLITS) * SEED_STRIDE + k * SEED_STRIDE
    return range(start, start + SEED_STRIDE)


def split_of_seed(seed: int) -> str:
    return SPLITS[(seed // SEED_STRIDE) % len(SPLITS)]


# -- primitive encoders -----------------------------------------------------


def encode_audio(clip: BinauralClip) -> bytes:
    return np.ascontiguousarray(clip.data.T, dtype="<f4").tobytes()


def decode_audio(raw: bytes) -> np.ndarray:
    a = np.frombuffer(raw, dtype="<f4")
    if a.size != 2 * CLIP_LENGTH:
        raise DatasetError(f"audio has {a.size} values, expected {2 * CLIP_LENGTH}")
    return a.reshape(CLIP_LENGTH, 2).T.astype(np.float32)


def encode_pgm16(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if np.any(img < 0) or np.any(img > 1):
        raise ValueError("image values must lie in [0, 1]")
    q = np.round(img * 65535).astype(">u2")
    h, w = img.shape
    return f"P5\n{w} {h}\n65535\n".encode() + q.tobytes()


def decode_pgm16(raw: bytes) -> np.ndarray:
    # header: magic, width, height, maxval separated by single whitespace
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode())
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != "P5" or maxval != 65535:
        raise DatasetError(f"unsupported PGM header {fields}")
    data = np.frombuffer(raw[pos:], dtype=">u2")
    if data.size != w * h:
        raise DatasetError("PGM payload size mismatch")
    return data.reshape(h, w).astype(np.float64) / 65535.0


def write_key_values(path: Path, items: dict):
    path.write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def read_key_values(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


# -- dataset level ------------------------------------------------------------


class DatasetWriter:
    """Streams samples to disk; the manifest is written on :meth:`close`."""

    def __init__(self, root, force: bool = False):
        self.root = Path(root)
        if (self.root / MANIFEST).exists() and not force:
            raise DatasetError(f"{self.root / MANIFEST} exists; pass force=True to overwrite")
        self.root.mkdir(parents=True, exist_ok=True)
        self.ids = {s: [] for s in SPLITS}
        self.resolution = None

    def add(self, rec: SampleRecord):
        if rec.split not in SPLITS:
            raise DatasetError(f"unknown split {rec.split!r}")
        if any(rec.id in ids for ids in self.ids.values()):
            raise DatasetError(f"duplicate sample id {rec.id!r}")
        res = int(np.asarray(rec.depth).shape[0])
        if self.resolution is None:
            self.resolution = res
        elif res != self.resolution:
            raise DatasetError("all samples must share one image resolution")
        d = self.root / rec.split / rec.id
        d.mkdir(parents=True, exist_ok=True)
        blobs = {
            "audio.f32": encode_audio(rec.clip),
            "depth.pgm16": encode_pgm16(rec.depth),
            "gray.pgm16": encode_pgm16(rec.gray),
        }
        for name, blob in blobs.items():
            (d / name).write_bytes(blob)
        (d / "scene.txt").write_text(rec.scene_text)
        write_key_values(d / "meta.txt", {
            "id": rec.id,
            "split": rec.split,
            "seed": rec.scene_seed,
            "scene_hash": rec.scene_hash,
            "onset_index": rec.clip.onset_index,
            "resolution": res,
            "audio_sha256": _sha(blobs["audio.f32"]),
            "depth_sha256": _sha(blobs["depth.pgm16"]),
            "gray_sha256": _sha(blobs["gray.pgm16"]),
        })
        self.ids[rec.split].append(rec.id)

    def close(self) -> dict:
        lines = [f"format={FORMAT_TAG}", f"resolution={self.resolution or 0}"]
        lines += [f"count.{s}={len(self.ids[s])}" for s in SPLITS]
        for s in SPLITS:
            lines += [f"{s} {i}" for i in self.ids[s]]
        (self.root / MANIFEST).write_text("\n".join(lines) + "\n")
        return read_manifest(self.root)


def write_dataset(samples, root, force: bool = False) -> dict:
    writer = DatasetWriter(root, force=force)
    for rec in samples:
        writer.add(rec)
    return writer.close()


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    header = {}
    ids = {s: [] for s in SPLITS}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if "=" in line:
            k, _, v = line.partition("=")
            header[k] = v
            continue
        split, _, sid = line.partition(" ")
        if split not in ids:
            raise DatasetError(f"manifest lists unknown split {split!r}")
        ids[split].append(sid)
    if header.get("format") != FORMAT_TAG:
        raise DatasetError(f"unrecognised manifest format {header.get('format')!r}")
    for s in SPLITS:
        if int(header.get(f"count.{s}", -1)) != len(ids[s]):
            raise DatasetError(f"manifest count for {s} disagrees with its id list")
    return {"resolution": int(header["resolution"]), "counts": {s: len(ids[s]) for s in SPLITS},
            "ids": ids}


def read_dataset(root, split: str):
    """Yield :class:`SampleRecord` for ``split`` in manifest order, verifying checksums."""
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    root = Path(root)
    manifest = read_manifest(root)
    ids = manifest["ids"][split]
    split_dir = root / split
    on_disk = {p.name for p in split_dir.iterdir() if p.is_dir()} if split_dir.exists() else set()
    if on_disk != set(ids):
        raise DatasetError(f"manifest and disk disagree for split {split!r}: "
                           f"{len(set(ids) - on_disk)} missing, {len(on_disk - set(ids))} extra")
    for sid in ids:
        d = split_dir / sid
        try:
            meta = read_key_values(d / "meta.txt")
            blobs = {n: (d / n).read_bytes() for n in ("audio.f32", "depth.pgm16", "gray.pgm16")}
            scene_text = (d / "scene.txt").read_text()
        except FileNotFoundError as e:
            raise DatasetError(f"sample {sid}: missing file {e.filename}") from None
        for n, key in (("audio.f32", "audio_sha256"), ("depth.pgm16", "depth_sha256"),
                       ("gray.pgm16", "gray_sha256")):
            if _sha(blobs[n]) != meta.get(key):
                raise DatasetError(f"sample {sid}: checksum mismatch for {n}")
        if _sha(scene_text.encode()) != meta.get("scene_hash"):
            raise DatasetError(f"sample {sid}: checksum mismatch for scene.txt")
        if meta.get("split") != split:
            raise DatasetError(f"sample {sid}: meta split {meta.get('split')!r} != {split!r}")
        clip = BinauralClip(decode_audio(blobs["audio.f32"]), onset_index=int(meta["onset_index"]))
        yield SampleRecord(id=sid, clip=clip, depth=decode_pgm16(blobs["depth.pgm16"]),
                           gray=decode_pgm16(blobs["gray.pgm16"]), scene_seed=int(meta["seed"]),
                           split=split, scene_text=scene_text)


def downsample(img: np.ndarray, resolution: int) -> np.ndarray:
    """Block-average ``(..., R, R)`` images to ``resolution``, ignoring zero (invalid) pixels."""
    img = np.asarray(img, dtype=np.float64)
    r = img.shape[-1]
    if r == resolution:
        return img
    if r % resolution:
        raise ValueError(f"cannot downsample {r} to {resolution}")
    k = r // resolution
    blocks = img.reshape(img.shape[:-2] + (resolution, k, resolution, k))
    valid = blocks > 0
    total = blocks.sum(axis=(-3, -1))
    count = valid.sum(axis=(-3, -1))
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


@dataclass
class SplitArrays:
    audio: np.ndarray   # (n, 2, 3200) float32
    depth: np.ndarray   # (n, R, R) float32
    gray: np.ndarray    # (n, R, R) float32
    seeds: np.ndarray
    ids: list

    def __len__(self):
        return len(self.ids)

    def target(self, name: str) -> np.ndarray:
        if name == "depth":
            return self.depth
        if name in ("gray", "grayscale"):
            return self.gray
        raise ValueError(f"unknown target {name!r}")


def load_split(root, split: str, resolution: int | None = None) -> SplitArrays:
    """Read a whole split into memory, optionally block-averaging the images."""
    audio, depth, gray, seeds, ids = [], [], [], [], []
    for rec in read_dataset(root, split):
        audio.append(rec.clip.data)
        depth.append(rec.depth)
        gray.append(rec.gray)
        seeds.append(rec.scene_seed)
        ids.append(rec.id)
    if not ids:
        res = resolution or read_manifest(root)["resolution"]
        return SplitArrays(np.zeros((0, 2, CLIP_LENGTH), np.float32), np.zeros((0, res, res), np.float32),
                           np.zeros((0, res, res), np.float32), np.zeros(0, np.int64), [])
    depth = np.stack(depth)
    gray = np.stack(gray)
    if resolution is not None:
        depth = downsample(depth, resolution)
        gray = downsample(gray, resolution)
    return SplitArrays(np.stack(audio).astype(np.float32), depth.astype(np.float32),
                       gray.astype(np.float32), np.asarray(seeds), ids)
