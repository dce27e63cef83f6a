"""Study metadata parsing, CDR-based labeling, PGM image loading, one-hot
encoding, and seeded subject-level train/test splitting.

Labeling rule: a clinical dementia rating of 0 is the control class,
any positive rating is the positive (AD) class, and subjects with no
rating recorded are controls (young cohorts are included without a
rating precisely because no dementia was clinically indicated).

Splits are made by subject, never by image, so no subject contributes
to both sides.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadDimensionsError,
    BadMagicError,
    BadValueError,
    EmptyDatasetError,
    MissingColumnError,
    OutOfRangeError,
    TruncatedFileError,
)
from .tensor import Tensor

VALID_CDR = (0.0, 0.5, 1.0, 2.0, 3.0)
REQUIRED_COLUMNS = ("ID", "Age", "CDR")

LABEL_CONTROL = 0
LABEL_AD = 1
CLASS_NAMES = ("control", "alzheimer")


@dataclass
class SubjectRecord:
    """One parsed metadata row; unknown columns ride along in `extra`."""

    id: str
    age: int
    cdr: Optional[float] = None
    mmse: Optional[int] = None
    extra: dict[str, str] = None

    def __post_init__(self):
        if self.extra is None:
            self.extra = {}


@dataclass
class LabeledExample:
    """An (image, one-hot label) training pair tied to its subject."""

    image: Tensor
    label: int
    one_hot: Tensor
    subject_id: str


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int
    test_fraction: float


def parse_metadata_csv(path) -> list[SubjectRecord]:
    """Parse the study CSV; requires ID, Age, CDR columns (CDR may be empty)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumnError("empty file: no header row") from None
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise MissingColumnError(f"required column {col!r} not in header")
        idx = {name: i for i, name in enumerate(header)}

        records = []
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                row = row + [""] * (len(header) - len(row))

            def cell(col):
                return row[idx[col]].strip()

            sid = cell("ID")
            if not sid:
                raise BadValueError(row_num, "ID", "empty subject id")
            try:
                age = int(cell("Age"))
            except ValueError:
                raise BadValueError(row_num, "Age",
                                    f"not an integer: {cell('Age')!r}") from None
            if age < 0:
                raise BadValueError(row_num, "Age", f"negative age {age}")

            raw_cdr = cell("CDR")
            if raw_cdr == "":
                cdr = None
            else:
                try:
                    cdr = float(raw_cdr)
                except ValueError:
                    raise BadValueError(row_num, "CDR",
                                        f"not a number: {raw_cdr!r}") from None
                if cdr not in VALID_CDR:
                    raise BadValueError(row_num, "CDR",
                                        f"{cdr} not one of {list(VALID_CDR)}")

            mmse = None
            if "MMSE" in idx:
                raw_mmse = cell("MMSE")
                if raw_mmse:
                    try:
                        mmse = int(raw_mmse)
                    except ValueError:
                        raise BadValueError(row_num, "MMSE",
                                            f"not an integer: {raw_mmse!r}") from None

            extra = {name: row[i] for name, i in idx.items()
                     if name not in ("ID", "Age", "CDR", "MMSE")}
            records.append(SubjectRecord(sid, age, cdr, mmse, extra))
    return records


def write_metadata_csv(records: Sequence[SubjectRecord], path):
    """Serialize records back to CSV (ID, Age, CDR, MMSE, then extras)."""
    extra_cols: list[str] = []
    for rec in records:
        for key in rec.extra:
            if key not in extra_cols:
                extra_cols.append(key)
    header = list(REQUIRED_COLUMNS) + ["MMSE"] + extra_cols
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for rec in records:
            cdr = "" if rec.cdr is None else _format_cdr(rec.cdr)
            mmse = "" if rec.mmse is None else str(rec.mmse)
            row = [rec.id, str(rec.age), cdr, mmse]
            row += [rec.extra.get(col, "") for col in extra_cols]
            writer.writerow(row)


def _format_cdr(cdr: float) -> str:
    return str(int(cdr)) if cdr == int(cdr) else str(cdr)


def label_from_cdr(rec: SubjectRecord) -> int:
    """0 (control) for rating 0 or no rating; 1 (AD) for any positive rating."""
    if rec.cdr is not None and rec.cdr > 0:
        return LABEL_AD
    return LABEL_CONTROL


def one_hot(label: int, num_classes: int) -> Tensor:
    if not (0 <= label < num_classes):
        raise OutOfRangeError(f"label {label} outside [0, {num_classes})")
    vec = np.zeros(num_classes)
    vec[label] = 1.0
    return Tensor(vec)


# --- PGM loading ---

def _read_pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read whitespace/comment-separated ASCII integers from a PGM header;
    returns the values and the offset just past the last one."""
    values: list[int] = []
    pos = 0
    while len(values) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] not in (0x0A, 0x0D):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token:
            raise TruncatedFileError("header ended before width/height/maxval")
        try:
            values.append(int(token))
        except ValueError:
            raise BadDimensionsError(f"non-numeric header token {token!r}") from None
    return values, pos


def load_image(path, target_w: int, target_h: int) -> Tensor:
    """Load a binary (P5) 8-bit PGM as a [target_h, target_w, 1] tensor in
    [0, 1]; larger sources are center-cropped, smaller ones zero-padded."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise BadMagicError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    try:
        (width, height, maxval), pos = _read_pgm_tokens(data[2:], 3)
    except TruncatedFileError:
        raise TruncatedFileError(f"{path}: header ended early") from None
    pos += 2  # offset was relative to the post-magic slice
    if width < 1 or height < 1:
        raise BadDimensionsError(f"{path}: bad extents {width}x{height}")
    if maxval != 255:
        raise BadDimensionsError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos:pos + width * height]
    if len(raster) < width * height:
        raise TruncatedFileError(
            f"{path}: raster holds {len(raster)} of {width * height} bytes")

    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    img = pixels.astype(np.float64) / 255.0
    return Tensor(_fit_to(img, target_h, target_w)[:, :, None])


def _fit_to(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Center-crop axes that are too large, zero-pad axes that are too small."""
    h, w = img.shape
    if h > target_h:
        top = (h - target_h) // 2
        img = img[top:top + target_h, :]
    if w > target_w:
        left = (w - target_w) // 2
        img = img[:, left:left + target_w]
    h, w = img.shape
    if h < target_h or w < target_w:
        out = np.zeros((target_h, target_w))
        top = (target_h - h) // 2
        left = (target_w - w) // 2
        out[top:top + h, left:left + w] = img
        img = out
    return img


# --- shuffling and splitting ---

def shuffle_split(examples: Sequence, seed: int, test_fraction: float) -> DatasetSplit:
    """Seeded permutation plus subject-level split.

    Works on anything carrying a `subject_id`; all of a subject's examples
    land on the same side. The test side gets max(1, floor(subjects *
    test_fraction)) subjects.
    """
    if not examples:
        raise EmptyDatasetError("no examples to split")
    if not (0.0 < test_fraction < 1.0):
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")

    rng = np.random.default_rng(seed)
    subjects = sorted({ex.subject_id for ex in examples})
    subject_order = [subjects[i] for i in rng.permutation(len(subjects))]
    n_test = max(1, math.floor(len(subjects) * test_fraction))
    test_ids = set(subject_order[:n_test])

    order = rng.permutation(len(examples))
    shuffled = [examples[i] for i in order]
    train = [ex for ex in shuffled if ex.subject_id not in test_ids]
    test = [ex for ex in shuffled if ex.subject_id in test_ids]
    return DatasetSplit(train, test, seed, test_fraction)


# --- split manifest ---

@dataclass
class ManifestEntry:
    subject_id: str
    image_path: str
    label: int
    split: str  # train | test


def write_manifest(entries: Sequence[ManifestEntry], path):
    """One line per example: subject_id, image path, label, split —
    tab-separated, byte-reproducible for a given seed."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for e in entries:
            fh.write(f"{e.subject_id}\t{e.image_path}\t{e.label}\t{e.split}\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line_num, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[3] not in ("train", "test"):
                raise BadValueError(line_num, "manifest", f"malformed line {line!r}")
            entries.append(ManifestEntry(parts[0], parts[1], int(parts[2]), parts[3]))
    return entries


def match_images_to_subjects(image_paths: Sequence, records: Sequence[SubjectRecord]
                             ) -> list[tuple[str, Path]]:
    """Pair image files with subjects by longest filename-stem prefix.

    Files whose stem does not start with any known subject id are skipped.
    """
    by_len = sorted((rec.id for rec in records), key=len, reverse=True)
    pairs = []
    for p in sorted(Path(p) for p in image_paths):
        stem = p.stem
        for sid in by_len:
            if stem == sid or stem.startswith(sid):
                pairs.append((sid, p))
                break
    return pairs


def load_examples(entries: Sequence[ManifestEntry], target_w: int, target_h: int,
                  split: Optional[str] = None) -> list[LabeledExample]:
    """Materialize manifest entries as labeled image tensors."""
    out = []
    for e in entries:
        if split is not None and e.split != split:
            continue
        img = load_image(e.image_path, target_w, target_h)
        out.append(LabeledExample(img, e.label, one_hot(e.label, 2), e.subject_id))
    return out
