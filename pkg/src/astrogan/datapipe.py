"""Dataset acquisition and sample preparation.

The manifest is a newline-delimited JSON file. An optional first line of the
form ``{"version": N}`` carries the manifest version; every other line is one
entry with keys ``id``, ``source_url``, ``sha256`` and ``split``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
import shutil
import threading
import time
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .colorspace import (
    ContractError,
    ImageGrid,
    Space,
    denormalize,
    lab_to_rgb,
    merge_lab,
    normalize,
    rgb_to_gray,
    rgb_to_lab,
    split_lab,
    to_uint8,
)

log = logging.getLogger(__name__)

DATA_DIR_ENV = "ASTRO_DATA_DIR"
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"
    UNASSIGNED = "unassigned"


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    source_url: str
    sha256: str | None = None
    split: Split = Split.UNASSIGNED

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "source_url": self.source_url,
            "sha256": self.sha256,
            "split": Split(self.split).value,
        }


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...] = ()
    version: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        seen: set[str] = set()
        for e in self.entries:
            if e.id in seen:
                raise ContractError(f"duplicate manifest id {e.id!r}")
            seen.add(e.id)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self, split: Split | None = None) -> list[str]:
        return [e.id for e in self.entries if split is None or e.split == split]


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    entries = []
    version = 1
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if set(rec) == {"version"}:
                version = int(rec["version"])
                continue
            try:
                entries.append(
                    ManifestEntry(
                        id=str(rec["id"]),
                        source_url=str(rec["source_url"]),
                        sha256=rec.get("sha256") or None,
                        split=Split(rec.get("split", "unassigned")),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ContractError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
    return DatasetManifest(tuple(entries), version)


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"version": manifest.version}) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# fetching


@dataclass
class FetchReport:
    fetched: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def counts(self) -> dict[str, int]:
        return {
            "fetched": len(self.fetched),
            "skipped": len(self.skipped),
            "failed": len(self.failed),
        }


class _RateLimiter:
    """Global minimum spacing between request starts, shared across threads."""

    def __init__(self, rate: float | None):
        self.interval = 1.0 / rate if rate and rate > 0 else 0.0
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            time.sleep(start - now)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _is_remote(source: str) -> bool:
    return urllib.parse.urlparse(source).scheme in ("http", "https")


def _local_path(source: str) -> Path:
    parsed = urllib.parse.urlparse(source)
    if parsed.scheme == "file":
        return Path(urllib.request.url2pathname(parsed.path))
    return Path(source)


def _extension(source: str) -> str:
    path = urllib.parse.urlparse(source).path if _is_remote(source) else source
    ext = Path(path).suffix.lower()
    return ext if ext in IMAGE_EXTENSIONS else ".png"


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def fetch_images(
    manifest: DatasetManifest,
    dest_dir: str | os.PathLike | None = None,
    rate_limit: float | None = 2.0,
    parallelism: int = 4,
    timeout: float = 60.0,
) -> FetchReport:
    """Download (or copy) every manifest entry into ``dest_dir/<id><ext>``.

    Entries whose file already exists (and matches its checksum, if one is
    given) are skipped. Failures are recorded per id and never abort the run;
    files failing checksum verification are moved to ``dest_dir/quarantine``.
    """
    dest = Path(dest_dir) if dest_dir is not None else default_data_dir()
    dest.mkdir(parents=True, exist_ok=True)
    limiter = _RateLimiter(rate_limit)
    report = FetchReport()
    lock = threading.Lock()

    def work(entry: ManifestEntry) -> tuple[str, str | None]:
        target = dest / f"{entry.id}{_extension(entry.source_url)}"
        if target.exists() and (
            entry.sha256 is None or _sha256_file(target) == entry.sha256.lower()
        ):
            return "skipped", None
        tmp = target.with_name(target.name + ".part")
        try:
            if _is_remote(entry.source_url):
                limiter.wait()
                req = urllib.request.Request(
                    entry.source_url, headers={"User-Agent": "astrogan-fetch/0.1"}
                )
                with urllib.request.urlopen(req, timeout=timeout) as resp, open(tmp, "wb") as out:
                    shutil.copyfileobj(resp, out)
            else:
                shutil.copyfile(_local_path(entry.source_url), tmp)
        except (OSError, ValueError) as exc:
            tmp.unlink(missing_ok=True)
            return "failed", f"{type(exc).__name__}: {exc}"
        if entry.sha256 is not None:
            digest = _sha256_file(tmp)
            if digest != entry.sha256.lower():
                qdir = dest / "quarantine"
                qdir.mkdir(exist_ok=True)
                os.replace(tmp, qdir / target.name)
                return "failed", f"checksum mismatch: expected {entry.sha256}, got {digest}"
        os.replace(tmp, target)
        return "fetched", None

    def run(entry: ManifestEntry) -> None:
        status, reason = work(entry)
        with lock:
            if status == "fetched":
                report.fetched.append(entry.id)
            elif status == "skipped":
                report.skipped.append(entry.id)
            else:
                log.warning("fetch %s failed: %s", entry.id, reason)
                report.failed[entry.id] = reason or "unknown error"

    if manifest.entries:
        with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
            list(pool.map(run, manifest.entries))
    order = {e.id: i for i, e in enumerate(manifest.entries)}
    report.fetched.sort(key=order.__getitem__)
    report.skipped.sort(key=order.__getitem__)
    return report


# ---------------------------------------------------------------------------
# image I/O and geometry


def read_image(path: str | os.PathLike) -> ImageGrid:
    """Read a PNG/JPEG as SRGB_8BIT; grayscale and alpha inputs become RGB."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return ImageGrid(arr, Space.SRGB_8BIT)


def write_image(img: ImageGrid, path: str | os.PathLike) -> None:
    """Write an sRGB image as an 8-bit RGB PNG."""
    if img.space is Space.SRGB_UNIT:
        img = normalize(img, Space.SRGB_8BIT)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def _resize(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Antialiased bicubic (Keys, a=-0.5) resize of an H x W x C array."""
    if pixels.shape[:2] == (height, width):
        return np.array(pixels, dtype=np.float64)
    t = torch.from_numpy(np.array(pixels, dtype=np.float64, order="C"))
    t = t.permute(2, 0, 1)[None]
    out = F.interpolate(
        t, size=(height, width), mode="bicubic", antialias=True, align_corners=False
    )
    return out[0].permute(1, 2, 0).numpy()


def _resize_short_side(raw: ImageGrid, side: int) -> np.ndarray:
    h, w = raw.height, raw.width
    if h < 16 or w < 16:
        raise ContractError(f"image {h}x{w} too small to standardize (need >= 16)")
    if side <= 0:
        raise ContractError(f"side must be positive, got {side}")
    if h <= w:
        nh, nw = side, max(side, round(w * side / h))
    else:
        nh, nw = max(side, round(h * side / w)), side
    return _resize(raw.pixels, nh, nw)


def standardize_image(raw: ImageGrid, side: int = 256) -> ImageGrid:
    """Resize the shorter side to ``side`` (bicubic) then center-crop to a square."""
    if raw.space is not Space.SRGB_8BIT:
        raise ContractError(f"expected srgb_8bit image, got {raw.space.value}")
    px = _resize_short_side(raw, side)
    top = (px.shape[0] - side) // 2
    left = (px.shape[1] - side) // 2
    return ImageGrid(px[top : top + side, left : left + side], Space.SRGB_8BIT)


def extract_tiles(raw: ImageGrid, side: int = 256, count: int = 1) -> list[ImageGrid]:
    """Cut ``count`` evenly spaced side x side tiles along the longer axis.

    ``count=1`` is exactly :func:`standardize_image`.
    """
    if count < 1:
        raise ContractError(f"tile count must be >= 1, got {count}")
    if count == 1:
        return [standardize_image(raw, side)]
    px = _resize_short_side(raw, side)
    h, w = px.shape[:2]
    span = max(h, w) - side
    offsets = np.rint(np.linspace(0, span, count)).astype(int)
    tiles = []
    for off in offsets:
        crop = px[off : off + side, :side] if h > w else px[:side, off : off + side]
        tiles.append(ImageGrid(crop, Space.SRGB_8BIT))
    return tiles


def downsample_bicubic(hr: ImageGrid, scale: int) -> ImageGrid:
    if hr.space is not Space.SRGB_UNIT:
        raise ContractError(f"expected srgb_unit image, got {hr.space.value}")
    if scale < 1 or hr.height % scale or hr.width % scale:
        raise ContractError(
            f"image {hr.height}x{hr.width} not divisible by scale {scale}"
        )
    lr = _resize(hr.pixels, hr.height // scale, hr.width // scale)
    return ImageGrid(np.clip(lr, 0.0, 1.0), Space.SRGB_UNIT)


# ---------------------------------------------------------------------------
# splitting


def _split_key(seed: int, ident: str) -> str:
    return hashlib.sha256(f"{seed}\x00{ident}".encode()).hexdigest()


def assign_splits(
    manifest: DatasetManifest, test_fraction: float = 0.10, seed: int = 0
) -> DatasetManifest:
    """Deterministic hash-ranked split; the test set holds round(N * test_fraction) ids."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractError(f"test_fraction must be in (0, 1), got {test_fraction}")
    ids = [e.id for e in manifest.entries]
    if len(set(ids)) != len(ids):
        raise ContractError("manifest contains duplicate ids")
    n_test = int(math.floor(len(ids) * test_fraction + 0.5))
    ranked = sorted(ids, key=lambda i: _split_key(seed, i))
    test_ids = set(ranked[:n_test])
    entries = tuple(
        replace(e, split=Split.TEST if e.id in test_ids else Split.TRAIN)
        for e in manifest.entries
    )
    return DatasetManifest(entries, manifest.version)


def holdout(ids: list[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Split ``ids`` into (kept, held_out) with the same hash ranking; holds out at least one."""
    n_out = max(1, int(math.floor(len(ids) * fraction + 0.5))) if len(ids) > 1 else 0
    ranked = sorted(ids, key=lambda i: _split_key(seed, i))
    out = set(ranked[:n_out])
    return [i for i in ids if i not in out], [i for i in ids if i in out]


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class ColorizationSample:
    """(condition, target) pair for colorization.

    Lab mode: ``input_l`` is the normalized L channel and ``target_ab`` the
    normalized (a, b) pair. RGB mode: ``input_l`` is GRAY_UNIT luma and
    ``target_ab`` holds the full SRGB_UNIT image.
    """

    input_l: ImageGrid
    target_ab: ImageGrid
    id: str

    def __post_init__(self) -> None:
        if self.input_l.shape[:2] != self.target_ab.shape[:2]:
            raise ContractError(
                f"sample {self.id}: input {self.input_l.shape[:2]} "
                f"vs target {self.target_ab.shape[:2]}"
            )

    @property
    def mode(self) -> str:
        return "lab" if self.target_ab.space is Space.LAB_NORM else "rgb"


@dataclass(frozen=True)
class SRSample:
    input_lr: ImageGrid
    target_hr: ImageGrid
    scale: int
    id: str

    def __post_init__(self) -> None:
        if (self.input_lr.height * self.scale, self.input_lr.width * self.scale) != (
            self.target_hr.height,
            self.target_hr.width,
        ):
            raise ContractError(
                f"sample {self.id}: hr {self.target_hr.shape[:2]} != "
                f"lr {self.input_lr.shape[:2]} x {self.scale}"
            )


def make_colorization_sample(
    img: ImageGrid, id: str, side: int | None = 256, mode: str = "lab"
) -> ColorizationSample:
    """Build a colorization pair from an SRGB_8BIT image.

    ``side`` is the required square size; pass ``None`` to accept any shape.
    """
    if img.space is not Space.SRGB_8BIT:
        raise ContractError(f"expected srgb_8bit image, got {img.space.value}")
    if side is not None and img.shape != (side, side, 3):
        raise ContractError(f"expected {side}x{side}x3 image, got {img.shape}")
    if mode == "lab":
        l_part, ab_part = split_lab(normalize(rgb_to_lab(img), Space.LAB_NORM))
        return ColorizationSample(l_part, ab_part, id)
    if mode == "rgb":
        unit = normalize(img, Space.SRGB_UNIT)
        return ColorizationSample(rgb_to_gray(unit), unit, id)
    raise ContractError(f"unknown colorization mode {mode!r}")


def reconstruct_rgb(input_l: ImageGrid, ab: ImageGrid) -> ImageGrid:
    """Merge an L condition with (a, b) chroma and render to SRGB_8BIT."""
    return lab_to_rgb(denormalize(merge_lab(input_l, ab)))


def make_sr_sample(img: ImageGrid, scale: int, id: str) -> SRSample:
    if scale not in (2, 4):
        raise ContractError(f"scale must be 2 or 4, got {scale}")
    if img.space is not Space.SRGB_8BIT:
        raise ContractError(f"expected srgb_8bit image, got {img.space.value}")
    hr = normalize(img, Space.SRGB_UNIT)
    return SRSample(downsample_bicubic(hr, scale), hr, scale, id)


def list_images(directory: str | os.PathLike) -> list[Path]:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
