"""Dataset types, preprocessing and DeepPCB-layout loading.

The on-disk layout mirrors the published PCB pair dataset: a split list
file per split (``train.txt``/``trainval.txt`` and ``test.txt``) whose
lines name a tested image and its annotation file, with the template
image derived by replacing the ``_test`` suffix with ``_temp``.
Annotation files carry one defect per line as five whitespace-separated
integers ``x1 y1 x2 y2 class_id`` in pixel corner coordinates of the
tested image (x2/y2 exclusive). The parser is deliberately isolated so a
schema surprise in the upstream dataset is a one-line fix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .geometry import Box, EmptyClipError, clip_box

logger = logging.getLogger(__name__)

CLASS_NAMES = {
    1: "open",
    2: "short",
    3: "mousebite",
    4: "spur",
    5: "spurious_copper",
    6: "pin_hole",
}
CLASS_IDS = {name: cid for cid, name in CLASS_NAMES.items()}

LOSSLESS_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".pgm"}
LOSSY_SUFFIXES = {".jpg", ".jpeg", ".webp"}


class AnnotationParseError(ValueError):
    """Malformed annotation line (wrong arity or non-integer fields)."""


class AnnotationSchemaError(ValueError):
    """Annotation violates the schema (class id or box out of range)."""


class DatasetIntegrityError(ValueError):
    """Dataset directory is missing required files or pairs disagree."""


class LossyImageError(ValueError):
    """A lossy-compressed image was rejected.

    Binarization of compression artifacts corrupts labels; pass
    ``allow_lossy=True`` explicitly to read such files anyway (the
    published dataset ships JPEGs of binary-valued scans).
    """


@dataclass(frozen=True)
class Annotation:
    """A defect: normalized box plus class id (1..6)."""

    box: Box
    class_id: int

    def __post_init__(self) -> None:
        if self.class_id not in CLASS_NAMES:
            raise AnnotationSchemaError(f"class_id outside 1..6: {self.class_id}")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]


@dataclass(frozen=True)
class ImagePair:
    """Aligned template + tested single-channel binary images."""

    template: np.ndarray
    tested: np.ndarray
    source_id: str = ""

    def __post_init__(self) -> None:
        if self.template.shape != self.tested.shape:
            raise ValueError(
                f"pair shape mismatch: {self.template.shape} vs {self.tested.shape}"
            )
        if self.template.ndim != 2:
            raise ValueError(f"expected 2-D single-channel images, got {self.template.ndim}-D")

    @property
    def shape(self) -> tuple[int, int]:
        return self.template.shape  # type: ignore[return-value]


def read_image(path: str | Path, allow_lossy: bool = False) -> np.ndarray:
    """Read a single-channel raster as a uint8 (H, W) array.

    Lossy formats are rejected unless ``allow_lossy`` is set.
    """
    path = Path(path)
    if path.suffix.lower() in LOSSY_SUFFIXES and not allow_lossy:
        raise LossyImageError(
            f"{path}: lossy format; re-encode losslessly or pass allow_lossy=True"
        )
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write a grayscale or binary ({0,1}) array as a lossless raster."""
    path = Path(path)
    if path.suffix.lower() in LOSSY_SUFFIXES:
        raise LossyImageError(f"{path}: refusing to write a lossy format")
    arr = np.asarray(image)
    if arr.max(initial=0) <= 1:
        arr = (arr * 255).astype(np.uint8)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def otsu_threshold(image: np.ndarray) -> float:
    """Otsu's histogram threshold for a uint8 grayscale image."""
    hist = np.bincount(np.asarray(image, dtype=np.uint8).ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    weight_bg = np.cumsum(hist)
    weight_fg = total - weight_bg
    cum_sum = np.cumsum(hist * levels)
    mean_bg = np.divide(cum_sum, weight_bg, out=np.zeros(256), where=weight_bg > 0)
    mean_fg = np.divide(cum_sum[-1] - cum_sum, weight_fg, out=np.zeros(256), where=weight_fg > 0)
    between = weight_bg * weight_fg * (mean_bg - mean_fg) ** 2
    # threshold t separates [0, t] from (t, 255]; binarize uses >= t, hence +1
    return float(np.argmax(between)) + 1.0


def binarize(image: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Threshold a grayscale raster into a {0, 1} uint8 array.

    A pixel maps to 1 when its intensity is >= ``threshold``. With
    ``threshold=None`` the threshold is picked by Otsu's method, except
    that already-binary inputs ({0,1} or {0,255}) pass through unchanged.
    """
    arr = np.asarray(image)
    if threshold is None:
        values = np.unique(arr)
        if values.size <= 2 and set(values.tolist()) <= {0, 1, 255}:
            return (arr > 0).astype(np.uint8)
        threshold = otsu_threshold(arr)
    return (arr >= threshold).astype(np.uint8)


def align(
    template: np.ndarray, tested: np.ndarray, max_shift: int = 8
) -> tuple[np.ndarray, tuple[int, int]]:
    """Correct residual integer translation between a pair.

    Exhaustively searches shifts (dx, dy) in [-max_shift, max_shift]^2,
    scoring each by the count of disagreeing pixels in the overlap region,
    and returns the tested image shifted by the best offset
    (replicate-padded) together with that offset. Rotation is not
    corrected; dataset pairs arrive pre-aligned and only residual
    translation is handled.
    """
    if template.shape != tested.shape:
        raise ValueError(f"shape mismatch: {template.shape} vs {tested.shape}")
    if not 0 <= max_shift <= 32:
        raise ValueError(f"max_shift outside [0, 32]: {max_shift}")

    h, w = template.shape
    t = template.astype(np.int16)
    q = tested.astype(np.int16)
    best = None
    best_offset = (0, 0)
    # fixed row-major scan; strict improvement keeps the first (deterministic)
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            ty0, ty1 = max(dy, 0), h + min(dy, 0)
            tx0, tx1 = max(dx, 0), w + min(dx, 0)
            qy0, qy1 = max(-dy, 0), h + min(-dy, 0)
            qx0, qx1 = max(-dx, 0), w + min(-dx, 0)
            disagree = int(
                np.count_nonzero(t[ty0:ty1, tx0:tx1] != q[qy0:qy1, qx0:qx1])
            )
            if best is None or disagree < best:
                best = disagree
                best_offset = (dx, dy)

    dx, dy = best_offset
    pad = max_shift
    padded = np.pad(tested, pad, mode="edge")
    shifted = padded[pad - dy : pad - dy + h, pad - dx : pad - dx + w]
    return shifted, best_offset


def parse_annotation_line(line: str, image_hw: tuple[int, int]) -> Annotation:
    fields = line.split()
    if len(fields) != 5:
        raise AnnotationParseError(f"expected 5 fields, got {len(fields)}: {line!r}")
    try:
        x1, y1, x2, y2, class_id = (int(f) for f in fields)
    except ValueError as exc:
        raise AnnotationParseError(f"non-integer field in {line!r}") from exc
    h, w = image_hw
    if not (x1 < x2 and y1 < y2):
        raise AnnotationSchemaError(f"degenerate box in {line!r}")
    box = Box.from_corners(x1 / w, y1 / h, x2 / w, y2 / h)
    try:
        box = clip_box(box)
    except EmptyClipError as exc:
        raise AnnotationSchemaError(f"box fully outside the image: {line!r}") from exc
    if class_id not in CLASS_NAMES:
        raise AnnotationSchemaError(f"class_id outside 1..6 in {line!r}")
    return Annotation(box=box, class_id=class_id)


def parse_annotation_file(path: str | Path, image_hw: tuple[int, int] = (640, 640)) -> list[Annotation]:
    """Parse a defect annotation file into normalized annotations.

    Args:
        path: text file with one defect per line: ``x1 y1 x2 y2 class_id``
            in pixel corner coordinates (x2/y2 exclusive).
        image_hw: (height, width) of the tested image the pixels refer to.

    Raises:
        AnnotationParseError / AnnotationSchemaError: with the file name
            and 1-based line number of the offending line.
    """
    path = Path(path)
    annotations = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            annotations.append(parse_annotation_line(line, image_hw))
        except (AnnotationParseError, AnnotationSchemaError) as exc:
            raise type(exc)(f"{path}:{lineno}: {exc}") from None
    return annotations


def write_annotation_file(
    path: str | Path, annotations: Sequence[Annotation], image_hw: tuple[int, int]
) -> None:
    """Write annotations as pixel corner lines, the inverse of the parser."""
    h, w = image_hw
    lines = []
    for ann in annotations:
        x1, y1, x2, y2 = ann.box.corners()
        lines.append(
            f"{round(x1 * w)} {round(y1 * h)} {round(x2 * w)} {round(y2 * h)} {ann.class_id}"
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def augment_pair(
    pair: ImagePair,
    annotations: Sequence[Annotation],
    rng: int | np.random.Generator,
    crop_size: int = 512,
    min_area_fraction: float = 0.25,
) -> tuple[ImagePair, list[Annotation]]:
    """Random paired flip + crop, applied identically to both images.

    One seeded draw decides a horizontal flip (p=0.5), one a vertical
    flip (p=0.5), then a random ``crop_size`` square window is cut from
    both images. Boxes are flipped/translated accordingly; a box is kept
    iff at least ``min_area_fraction`` of its area survives the crop, and
    is then clipped to the window. Deterministic given the seed.
    """
    rng = np.random.default_rng(rng) if isinstance(rng, int) else rng
    h, w = pair.shape
    if crop_size > h or crop_size > w:
        raise ValueError(f"crop {crop_size} larger than image {h}x{w}")

    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    x0 = int(rng.integers(0, w - crop_size + 1))
    y0 = int(rng.integers(0, h - crop_size + 1))

    def transform_image(img: np.ndarray) -> np.ndarray:
        if hflip:
            img = img[:, ::-1]
        if vflip:
            img = img[::-1, :]
        return np.ascontiguousarray(img[y0 : y0 + crop_size, x0 : x0 + crop_size])

    out_annotations = []
    for ann in annotations:
        cx, cy, bw, bh = ann.box.cx, ann.box.cy, ann.box.w, ann.box.h
        if hflip:
            cx = 1.0 - cx
        if vflip:
            cy = 1.0 - cy
        # to pixel corners relative to the crop window
        px1, px2 = cx * w - bw * w / 2 - x0, cx * w + bw * w / 2 - x0
        py1, py2 = cy * h - bh * h / 2 - y0, cy * h + bh * h / 2 - y0
        ix1, ix2 = max(px1, 0.0), min(px2, float(crop_size))
        iy1, iy2 = max(py1, 0.0), min(py2, float(crop_size))
        if ix2 <= ix1 or iy2 <= iy1:
            continue
        if (ix2 - ix1) * (iy2 - iy1) < min_area_fraction * (px2 - px1) * (py2 - py1):
            continue
        out_annotations.append(
            Annotation(
                box=Box.from_corners(
                    ix1 / crop_size, iy1 / crop_size, ix2 / crop_size, iy2 / crop_size
                ),
                class_id=ann.class_id,
            )
        )

    return (
        ImagePair(
            template=transform_image(pair.template),
            tested=transform_image(pair.tested),
            source_id=pair.source_id,
        ),
        out_annotations,
    )


@dataclass(frozen=True)
class PairRecord:
    """Index entry for one template/tested pair on disk."""

    source_id: str
    template_path: Path
    tested_path: Path
    annotation_path: Path
    annotations: tuple[Annotation, ...]
    image_hw: tuple[int, int]


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    train: tuple[PairRecord, ...]
    test: tuple[PairRecord, ...]

    def split(self, name: str) -> tuple[PairRecord, ...]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test


def _image_size(path: Path) -> tuple[int, int]:
    # header-only read; pixel data stays on disk
    with Image.open(path) as img:
        w, h = img.size
    return h, w


def _template_path_for(tested: Path) -> Path:
    stem = tested.stem
    if "_test" not in stem:
        raise DatasetIntegrityError(f"{tested}: tested image name lacks '_test' suffix")
    return tested.with_name(stem.replace("_test", "_temp") + tested.suffix)


def _load_split(root: Path, list_path: Path) -> tuple[PairRecord, ...]:
    records = []
    problems = []
    for line in list_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        tested = root / parts[0]
        if "_test" not in tested.stem:
            # some split lists name the pair without the _test suffix
            candidate = tested.with_name(tested.stem + "_test" + tested.suffix)
            if candidate.exists():
                tested = candidate
            else:
                problems.append(f"{parts[0]}: no '_test' image for this entry")
                continue
        annotation = root / parts[1] if len(parts) > 1 else tested.with_suffix(".txt")
        template = _template_path_for(tested)
        missing = [p for p in (tested, template, annotation) if not p.exists()]
        if missing:
            problems.append(f"{tested.stem}: missing {', '.join(str(m) for m in missing)}")
            continue
        hw = _image_size(tested)
        records.append(
            PairRecord(
                source_id=tested.stem.replace("_test", ""),
                template_path=template,
                tested_path=tested,
                annotation_path=annotation,
                annotations=tuple(parse_annotation_file(annotation, hw)),
                image_hw=hw,
            )
        )
    if problems:
        raise DatasetIntegrityError(
            f"{list_path.name}: {len(problems)} broken pair(s): " + "; ".join(problems[:10])
        )
    return tuple(records)


def load_deeppcb(root: str | Path) -> DatasetIndex:
    """Index a DeepPCB-layout dataset directory.

    Expects split list files ``train.txt`` (or ``trainval.txt``) and
    ``test.txt`` under ``root``, each line naming a tested image and its
    annotation file relative to ``root``. Pair dimension equality is
    verified lazily by :func:`load_pair`.

    Raises:
        DatasetIntegrityError: missing split lists, images, templates or
            annotation files, listing the offending ids.
    """
    root = Path(root)
    train_list = next((p for p in (root / "train.txt", root / "trainval.txt") if p.exists()), None)
    test_list = root / "test.txt"
    if train_list is None or not test_list.exists():
        raise DatasetIntegrityError(
            f"{root}: expected train.txt (or trainval.txt) and test.txt split lists"
        )
    return DatasetIndex(
        root=root,
        train=_load_split(root, train_list),
        test=_load_split(root, test_list),
    )


def load_pair(
    record: PairRecord,
    threshold: float | None = None,
    allow_lossy: bool = False,
) -> ImagePair:
    """Read and binarize one pair, verifying dimension equality."""
    template = read_image(record.template_path, allow_lossy=allow_lossy)
    tested = read_image(record.tested_path, allow_lossy=allow_lossy)
    if template.shape != tested.shape:
        raise DatasetIntegrityError(
            f"{record.source_id}: pair dimensions differ: "
            f"{template.shape} vs {tested.shape}"
        )
    return ImagePair(
        template=binarize(template, threshold),
        tested=binarize(tested, threshold),
        source_id=record.source_id,
    )


def write_deeppcb(
    root: str | Path,
    train: Iterable[tuple[ImagePair, Sequence[Annotation]]],
    test: Iterable[tuple[ImagePair, Sequence[Annotation]]],
) -> DatasetIndex:
    """Write pairs in the DeepPCB layout so the loader is the single ingestion path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)

    def write_split(name: str, items: Iterable[tuple[ImagePair, Sequence[Annotation]]]) -> None:
        lines = []
        for pair, annotations in items:
            sid = pair.source_id or f"{name}{len(lines):06d}"
            tested_rel = f"images/{sid}_test.png"
            annotation_rel = f"images/{sid}.txt"
            write_image(root / f"images/{sid}_temp.png", pair.template)
            write_image(root / tested_rel, pair.tested)
            write_annotation_file(root / annotation_rel, annotations, pair.shape)
            lines.append(f"{tested_rel} {annotation_rel}")
        (root / f"{name}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))

    write_split("train", train)
    write_split("test", test)
    return load_deeppcb(root)
