"""UTKFace-style ingestion, filtering, rebalancing, splitting and image loading.

Every transformation returns a new :class:`Manifest` and appends one
provenance step, so a manifest file records how it was produced.  Record
order is canonical: the lexicographic directory listing, with sampling
steps keeping the relative order of the records they retain.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DomainError, ImageDecodeError, MalformedNameError
from .rng import SplitMix64, round_half_away

IMAGE_SIZE = 200
MAX_AGE = 116
PIXEL_MIN = 0.0
PIXEL_MAX = 255.0

MALE, FEMALE = 0, 1
VALID_GENDERS = (MALE, FEMALE)


@dataclass(frozen=True)
class FaceRecord:
    path: str
    age: int
    gender: int
    raw_gender: Optional[int] = None
    race: Optional[int] = None
    datestamp: Optional[str] = None

    def __post_init__(self):
        if self.raw_gender is None:
            object.__setattr__(self, "raw_gender", self.gender)

    def to_dict(self) -> dict:
        return {"path": self.path, "age": self.age, "gender": self.gender}


@dataclass(frozen=True)
class Step:
    name: str
    params: dict
    in_count: int
    out_count: int

    def to_dict(self) -> dict:
        return {"name": self.name, "params": self.params, "in_count": self.in_count, "out_count": self.out_count}


@dataclass(frozen=True)
class Manifest:
    records: tuple[FaceRecord, ...] = ()
    seed: int = 0
    steps: tuple[Step, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ages(self) -> list[int]:
        return [r.age for r in self.records]

    @property
    def genders(self) -> list[int]:
        return [r.gender for r in self.records]

    def derive(self, records: Iterable[FaceRecord], step: Step, seed: Optional[int] = None) -> "Manifest":
        return Manifest(
            records=tuple(records),
            seed=self.seed if seed is None else seed,
            steps=self.steps + (step,),
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "steps": [s.to_dict() for s in self.steps],
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "Manifest":
        try:
            records = tuple(
                FaceRecord(path=str(r["path"]), age=int(r["age"]), gender=int(r["gender"]))
                for r in obj["records"]
            )
            steps = tuple(
                Step(s["name"], dict(s.get("params", {})), int(s["in_count"]), int(s["out_count"]))
                for s in obj.get("steps", [])
            )
            return cls(records=records, seed=int(obj.get("seed", 0)), steps=steps)
        except (KeyError, TypeError, ValueError) as exc:
            raise DomainError(f"malformed manifest: {exc}") from None


def save_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text(manifest.to_json(), encoding="utf-8")


def load_manifest(path) -> Manifest:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DomainError(f"malformed manifest {str(path)!r}: {exc}") from None
    if not isinstance(obj, dict):
        raise DomainError(f"malformed manifest {str(path)!r}: top level is not an object")
    return Manifest.from_dict(obj)


# -- ingestion -----------------------------------------------------------------


def parse_utk_filename(name: str) -> FaceRecord:
    """Parse ``age_gender[_race[_datestamp]].ext`` into a record.

    The extension and any fields past the fourth are ignored.  Age must
    fall in the dataset's 0-116 range.
    """
    base = os.path.basename(name)
    stem = os.path.splitext(base)[0]
    fields = stem.split("_")
    if len(fields) < 2:
        raise MalformedNameError(base, "needs at least age and gender fields")
    age_s, gender_s = fields[0], fields[1]
    if not (age_s.isdigit() and gender_s.isdigit()):
        raise MalformedNameError(base, "age and gender must be non-negative integers")
    age = int(age_s)
    if age > MAX_AGE:
        raise MalformedNameError(base, f"age {age} outside 0..{MAX_AGE}")
    gender = int(gender_s)
    race = int(fields[2]) if len(fields) > 2 and fields[2].isdigit() else None
    datestamp = fields[3] if len(fields) > 3 else None
    return FaceRecord(path=name, age=age, gender=gender, raw_gender=gender, race=race, datestamp=datestamp)


def ingest_directory(directory, seed: int = 0) -> Manifest:
    """Parse every file in ``directory`` (sorted by name); unparseable names are skipped."""
    directory = os.fspath(directory)
    try:
        names = sorted(e.name for e in os.scandir(directory) if e.is_file())
    except OSError as exc:
        raise OSError(f"cannot read directory {directory!r}: {exc}") from exc
    records, skipped = [], []
    for name in names:
        try:
            rec = parse_utk_filename(name)
        except MalformedNameError:
            skipped.append(name)
            continue
        records.append(replace(rec, path=os.path.join(directory, name)))
    step = Step(
        "ingest",
        {"dir": directory, "skipped": len(skipped), "skipped_files": skipped},
        len(names),
        len(records),
    )
    return Manifest(records=tuple(records), seed=seed, steps=(step,))


def filter_invalid_gender(m: Manifest) -> Manifest:
    """Drop records whose gender label is not 0 or 1 (e.g. the stray class 3)."""
    kept = [r for r in m.records if r.raw_gender in VALID_GENDERS]
    step = Step(
        "filter_invalid_gender",
        {"allowed": list(VALID_GENDERS), "removed": len(m) - len(kept)},
        len(m),
        len(kept),
    )
    return m.derive(kept, step)


def rebalance_age(
    m: Manifest,
    low_age: int = 1,
    high_age: int = 4,
    keep_frac: float = 0.2,
    seed: int = 0,
) -> Manifest:
    """Subsample the over-represented ``[low_age, high_age]`` group to ``keep_frac``."""
    if not 0 < keep_frac <= 1:
        raise DomainError(f"keep_frac must be in (0, 1], got {keep_frac}")
    if low_age > high_age:
        raise DomainError(f"low_age {low_age} exceeds high_age {high_age}")
    group = [i for i, r in enumerate(m.records) if low_age <= r.age <= high_age]
    n_keep = round_half_away(keep_frac * len(group))
    picked = list(group)
    SplitMix64(seed).shuffle(picked)
    keep = set(picked[:n_keep])
    kept = [r for i, r in enumerate(m.records) if i in keep or not low_age <= r.age <= high_age]
    step = Step(
        "rebalance_age",
        {
            "low_age": low_age,
            "high_age": high_age,
            "keep_frac": keep_frac,
            "seed": seed,
            "group_count": len(group),
            "group_kept": n_keep,
        },
        len(m),
        len(kept),
    )
    return m.derive(kept, step, seed=seed)


def holdout_split(m: Manifest, train_frac: float = 0.7, seed: int = 0) -> tuple[Manifest, Manifest]:
    """Seeded random partition into train and test; both keep canonical order."""
    if not 0 < train_frac < 1:
        raise DomainError(f"train_frac must be in (0, 1), got {train_frac}")
    n = len(m)
    if n == 0:
        raise DomainError("cannot split an empty manifest")
    n_train = round_half_away(train_frac * n)
    perm = SplitMix64(seed).permutation(n)
    train_idx = sorted(perm[:n_train])
    test_idx = sorted(perm[n_train:])
    params = {"train_frac": train_frac, "seed": seed}
    train = m.derive(
        (m.records[i] for i in train_idx),
        Step("split", {**params, "part": "train"}, n, len(train_idx)),
        seed=seed,
    )
    test = m.derive(
        (m.records[i] for i in test_idx),
        Step("split", {**params, "part": "test"}, n, len(test_idx)),
        seed=seed,
    )
    return train, test


def age_histogram(m: Manifest, bin_width: int = 10) -> dict[int, int]:
    hist: dict[int, int] = {}
    for r in m.records:
        lo = (r.age // bin_width) * bin_width
        hist[lo] = hist.get(lo, 0) + 1
    return dict(sorted(hist.items()))


def gender_counts(m: Manifest) -> dict[int, int]:
    counts: dict[int, int] = {}
    for r in m.records:
        counts[r.raw_gender] = counts.get(r.raw_gender, 0) + 1
    return dict(sorted(counts.items()))


# -- images --------------------------------------------------------------------


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, clamped to the edge samples
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an H×W×C array; returns float64."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        out = img.copy()
    else:
        lo, hi, f = _axis_weights(h, height)
        rows = img[lo] * (1 - f)[:, None, None] + img[hi] * f[:, None, None]
        lo, hi, f = _axis_weights(w, width)
        out = rows[:, lo] * (1 - f)[None, :, None] + rows[:, hi] * f[None, :, None]
    return out[:, :, 0] if squeeze else out


def decode_rgb(path) -> np.ndarray:
    """Decode a JPEG/PNG into an H×W×3 uint8 array (grayscale is replicated)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(path, str(exc)) from None


def load_image(record, size: int = IMAGE_SIZE) -> np.ndarray:
    """Decode and resize to a 3×size×size float32 array of raw 0-255 values."""
    path = record.path if isinstance(record, FaceRecord) else record
    rgb = decode_rgb(path)
    resized = resize_bilinear(rgb, size, size)
    return np.ascontiguousarray(resized.transpose(2, 0, 1), dtype=np.float32)


def normalize(t: np.ndarray) -> np.ndarray:
    """Min-max scaling over the fixed 8-bit range: 0 -> 0.0, 255 -> 1.0."""
    t = np.asarray(t, dtype=np.float32)
    return (t - np.float32(PIXEL_MIN)) / np.float32(PIXEL_MAX - PIXEL_MIN)


def denormalize(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float32)
    return t * np.float32(PIXEL_MAX - PIXEL_MIN) + np.float32(PIXEL_MIN)


class ImageCache:
    """Normalized image tensors keyed by path, bounded by a byte budget."""

    def __init__(self, max_bytes: int = 1 << 30, size: int = IMAGE_SIZE):
        self.max_bytes = max_bytes
        self.size = size
        self._store: dict[str, np.ndarray] = {}
        self._bytes = 0

    def get(self, record) -> np.ndarray:
        path = record.path if isinstance(record, FaceRecord) else str(record)
        arr = self._store.get(path)
        if arr is None:
            arr = normalize(load_image(path, self.size))
            if self._bytes + arr.nbytes <= self.max_bytes:
                self._store[path] = arr
                self._bytes += arr.nbytes
        return arr

    def batch(self, records) -> np.ndarray:
        return np.stack([self.get(r) for r in records])


# -- synthetic fixtures --------------------------------------------------------

SYNTH_MAX_AGE = 80
SYNTH_CHANNEL_OFFSET = 20  # red/blue sit +-20 around the mean: 40 apart
SYNTH_NOISE = 8


def synthetic_age(brightness: float) -> int:
    """Planted age label for a given mean brightness."""
    return round_half_away(brightness / PIXEL_MAX * SYNTH_MAX_AGE)


def synthetic_gender(red_mean: float, blue_mean: float) -> int:
    return MALE if red_mean > blue_mean else FEMALE


def render_synthetic(brightness: float, gender: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """H×W×3 uint8 image whose mean is ``brightness``, red or blue dominant by gender."""
    off = SYNTH_CHANNEL_OFFSET if gender == MALE else -SYNTH_CHANNEL_OFFSET
    base = np.array([brightness + off, brightness, brightness - off])
    noise = rng.integers(-SYNTH_NOISE, SYNTH_NOISE + 1, size=(size, size, 1))
    noise = noise - int(round(noise.mean()))
    img = np.clip(np.rint(base[None, None, :] + noise), 0, 255)
    return img.astype(np.uint8)


def generate_synthetic(seed: int, n: int, out_dir, size: int = IMAGE_SIZE) -> Manifest:
    """Write ``n`` PNG faces with planted labels and return their manifest.

    Brightness is drawn uniformly from the range that keeps red and blue
    means a full 40 levels apart without clipping.  Labels are computed
    from the pixels actually written.
    """
    if n < 1:
        raise DomainError(f"need at least one synthetic image, got n={n}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {str(out_dir)!r}: {exc}") from exc
    picker = SplitMix64(seed)
    texture = np.random.Generator(np.random.PCG64(seed))
    lo = SYNTH_CHANNEL_OFFSET + SYNTH_NOISE
    hi = PIXEL_MAX - lo
    records = []
    for i in range(n):
        brightness = lo + picker.uniform() * (hi - lo)
        gender = picker.below(2)
        img = render_synthetic(brightness, gender, texture, size)
        means = img.reshape(-1, 3).mean(axis=0)
        age = synthetic_age(float(img.mean()))
        label = synthetic_gender(means[0], means[2])
        path = out_dir / f"{age}_{label}_0_synth{seed}x{i:05d}.png"
        try:
            Image.fromarray(img).save(path, format="PNG")
        except OSError as exc:
            raise OSError(f"cannot write {str(path)!r}: {exc}") from exc
        records.append(FaceRecord(path=str(path), age=age, gender=label))
    step = Step("synthesize", {"seed": seed, "n": n, "size": size}, 0, n)
    return Manifest(records=tuple(records), seed=seed, steps=(step,))
