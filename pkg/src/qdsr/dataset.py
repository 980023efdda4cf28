"""Training pairs: generation, validation split and archive storage.

Archive layout (little-endian)::

    b"QSRA"  magic
    u8       version (0x01)
    u64      record count
    records, each:
        u64 length, input .qsrt blob  (lo x lo, float64 photons)
        u64 length, target .qsrt blob (hi x hi, float64, unit sum)
        u64 length, UTF-8 JSON meta   (psf, background_mean, seed, index)
    u64 length, UTF-8 JSON footer     (count, seed, scene config)

The footer carries no timestamp, so archives written from the same seed are
byte-identical. The creation time lives in the sidecar manifest
``<archive>.manifest.json``.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from .numerics import make_rng
from .optics import PsfSpec, SceneConfig, rasterize_ground_truth, render_psf, sample_scene, synthesize_frame
from .tensorio import FormatError, encode_tensor, read_tensor

ARCHIVE_MAGIC = b"QSRA"
ARCHIVE_VERSION = 1
MAX_ATTEMPTS = 10


@dataclass
class SamplePair:
    input: np.ndarray
    target: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    archives: list[str]
    count: int
    seed: int
    scene: dict
    created: str

    def to_dict(self) -> dict:
        return asdict(self)


def make_pair(seed: int, index: int, config: SceneConfig = SceneConfig()) -> SamplePair:
    """Simulate pair ``index`` from its own child stream of ``seed``."""
    rng = make_rng(seed, index)
    for _ in range(MAX_ATTEMPTS):
        emitters, psf, background = sample_scene(rng, config)
        truth = rasterize_ground_truth(rng, emitters)
        total = truth.sum()
        if total > 0:
            break
    else:
        raise RuntimeError(
            f"pair {index} (seed {seed}): zero ground-truth flux after {MAX_ATTEMPTS} attempts")
    frame = synthesize_frame(rng, truth, render_psf(psf), background, factor=config.factor)
    meta = {
        "index": index,
        "seed": seed,
        "psf": asdict(psf),
        "background_mean": background,
        "emitters": [[e.x, e.y, e.mean_photons] for e in emitters],
    }
    return SamplePair(frame, truth / total, meta)


def generate_pairs(seed: int, config: SceneConfig = SceneConfig(), n: int = 1,
                   start: int = 0, workers: int = 1) -> list[SamplePair]:
    """Pairs ``start .. start + n - 1``; each depends only on ``(seed, index)``.

    With ``workers > 1`` the pairs are simulated in a process pool. The result
    is identical to the serial one since no stream is shared.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    indices = range(start, start + n)
    if workers <= 1 or n < 2:
        return [make_pair(seed, i, config) for i in indices]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(partial(make_pair, seed, config=config), indices,
                             chunksize=max(1, n // (4 * workers))))


def _rank_key(seed: int, index: int) -> bytes:
    return hashlib.blake2b(struct.pack("<QQ", seed, index), digest_size=8).digest()


def split_validation(pairs: list, fraction: float = 0.25, seed: int = 0):
    """Deterministic split by index hash.

    The ``round(fraction * n)`` indices with the smallest hash go to
    validation; relative order is preserved in both halves.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = len(pairs)
    n_val = int(math.floor(fraction * n + 0.5))
    ranked = sorted(range(n), key=lambda i: _rank_key(seed, i))
    val_idx = set(ranked[:n_val])
    train = [p for i, p in enumerate(pairs) if i not in val_idx]
    val = [p for i, p in enumerate(pairs) if i in val_idx]
    return train, val


def _blob(data: bytes) -> bytes:
    return struct.pack("<Q", len(data)) + data


def save_archive(path, pairs: list[SamplePair], seed: int,
                 config: SceneConfig = SceneConfig()) -> DatasetManifest:
    path = Path(path)
    parts = [ARCHIVE_MAGIC, struct.pack("<BQ", ARCHIVE_VERSION, len(pairs))]
    for pair in pairs:
        parts.append(_blob(encode_tensor(np.asarray(pair.input, dtype=np.float64))))
        parts.append(_blob(encode_tensor(np.asarray(pair.target, dtype=np.float64))))
        parts.append(_blob(json.dumps(pair.meta, sort_keys=True).encode()))
    footer = {"count": len(pairs), "seed": seed, "scene": config.to_dict()}
    parts.append(_blob(json.dumps(footer, sort_keys=True).encode()))
    path.write_bytes(b"".join(parts))
    manifest = DatasetManifest(
        [path.name], len(pairs), seed, config.to_dict(),
        _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2))
    return manifest


def _take(buf: bytes, pos: int, what: str) -> tuple[bytes, int]:
    if len(buf) - pos < 8:
        raise FormatError(
            f"truncated archive at offset {pos}: expected 8 bytes for {what} length, "
            f"got {len(buf) - pos}")
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) - pos < n:
        raise FormatError(
            f"truncated archive at offset {pos}: expected {n} bytes for {what}, "
            f"got {len(buf) - pos}")
    return buf[pos:pos + n], pos + n


def load_archive(path) -> tuple[list[SamplePair], dict]:
    """Read an archive; returns the pairs and the footer record."""
    buf = Path(path).read_bytes()
    if len(buf) < 13:
        raise FormatError(f"truncated archive header: expected 13 bytes, got {len(buf)}")
    if buf[:4] != ARCHIVE_MAGIC:
        raise FormatError(f"bad archive magic at offset 0: {buf[:4]!r}")
    version, count = struct.unpack_from("<BQ", buf, 4)
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {version} at offset 4")
    pos = 13
    pairs = []
    for i in range(count):
        blobs = []
        for what in ("input", "target", "meta"):
            data, end = _take(buf, pos, f"record {i} {what}")
            blobs.append((data, pos + 8))
            pos = end
        arrays = []
        for data, at in blobs[:2]:
            try:
                arr, used = read_tensor(data)
            except FormatError as exc:
                raise FormatError(f"record {i} tensor at offset {at}: {exc}") from None
            if used != len(data):
                raise FormatError(f"record {i} tensor at offset {at}: length mismatch")
            arrays.append(arr)
        pairs.append(SamplePair(arrays[0], arrays[1], json.loads(blobs[2][0])))
    data, pos = _take(buf, pos, "footer")
    footer = json.loads(data)
    if footer.get("count") != count:
        raise FormatError(f"footer count {footer.get('count')} does not match header count {count}")
    if pos != len(buf):
        raise FormatError(f"trailing data at offset {pos}: {len(buf) - pos} bytes")
    return pairs, footer


def pair_psf(pair: SamplePair) -> PsfSpec:
    return PsfSpec(**pair.meta["psf"])
