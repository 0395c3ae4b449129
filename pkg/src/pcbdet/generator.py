"""Synthetic template/tested pair generation.

Templates are built like simple single-layer boards: a jittered grid of
pads (squares and discs, some with drilled holes) joined by traces that
run axis-aligned or at 45 degrees. Tested images start as a copy of the
template and receive a handful of local edits, one per defect:

    open            a cut cleared through thin copper
    short           a thin bar bridging two copper regions
    mousebite       a notch cleared from a copper edge
    spur            a bar protruding from a copper edge
    spurious_copper an isolated blob on empty board
    pin_hole        a hole punched in copper interior

Every edit's annotation is the tight bounding box of its changed pixels
grown by 2 px. Edits whose boxes would overlap an earlier defect are
rejected and retried; generation is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Annotation, DatasetIndex, ImagePair, write_deeppcb
from .geometry import Box

_EIGHT_DIRS = ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1))


class GenerationError(RuntimeError):
    """Could not place the requested defects within the retry budget."""


@dataclass(frozen=True)
class GeneratorConfig:
    """Layout and defect parameters, in pixels of the target size."""

    image_size: int = 640
    pad_pitch: int = 80
    pad_jitter: float = 0.22
    pad_probability: float = 0.7
    circle_probability: float = 0.5
    pad_radius_range: tuple[int, int] = (9, 18)
    drill_probability: float = 0.5
    num_traces: int = 30
    trace_width_range: tuple[int, int] = (3, 8)
    min_defects: int = 3
    max_defects: int = 12
    defect_radius_range: tuple[int, int] = (4, 14)
    max_attempts: int = 400

    def __post_init__(self) -> None:
        if self.image_size < 4 * self.pad_pitch:
            raise ValueError(
                f"image_size {self.image_size} too small for pitch {self.pad_pitch}"
            )
        for lo, hi, name in (
            (*self.pad_radius_range, "pad_radius_range"),
            (*self.trace_width_range, "trace_width_range"),
            (*self.defect_radius_range, "defect_radius_range"),
            (self.min_defects, self.max_defects, "defect count range"),
        ):
            if not 0 < lo <= hi:
                raise ValueError(f"bad {name}: ({lo}, {hi})")

    @classmethod
    def for_size(cls, image_size: int) -> "GeneratorConfig":
        """Scale the default 640 px layout down (or up) to another size."""
        f = image_size / 640
        # floors keep small renders resolvable: a defect must span a few
        # feature cells or nothing downstream can localize it
        return cls(
            image_size=image_size,
            pad_pitch=max(8, round(80 * f)),
            pad_radius_range=(max(3, round(9 * f)), max(6, round(18 * f))),
            num_traces=max(12, round(30 * f)),
            trace_width_range=(max(1, round(3 * f)), max(2, round(8 * f))),
            defect_radius_range=(max(3, round(4 * f)), max(5, round(14 * f))),
        )


@dataclass(frozen=True)
class InjectionResult:
    tested: np.ndarray
    annotations: tuple[Annotation, ...]
    changed: np.ndarray


def _disk(shape: tuple[int, int], cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.ogrid[: shape[0], : shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _square(shape: tuple[int, int], cy: int, cx: int, r: int) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[max(cy - r, 0) : cy + r + 1, max(cx - r, 0) : cx + r + 1] = True
    return mask


def _segment_points(y0: int, x0: int, y1: int, x1: int) -> list[tuple[int, int]]:
    """Pixels of an axis-aligned or exact 45 degree segment."""
    dy, dx = y1 - y0, x1 - x0
    steps = max(abs(dy), abs(dx))
    sy = 0 if dy == 0 else (1 if dy > 0 else -1)
    sx = 0 if dx == 0 else (1 if dx > 0 else -1)
    return [(y0 + sy * k, x0 + sx * k) for k in range(steps + 1)]


def _route(rng: np.random.Generator, a: tuple[int, int], b: tuple[int, int]) -> list[tuple[int, int]]:
    """Two-segment route from a to b: L-shaped or 45 degree then straight."""
    (y0, x0), (y1, x1) = a, b
    if rng.random() < 0.5:
        mid = (y0, x1) if rng.random() < 0.5 else (y1, x0)
    else:
        d = min(abs(y1 - y0), abs(x1 - x0))
        sy = 1 if y1 >= y0 else -1
        sx = 1 if x1 >= x0 else -1
        mid = (y0 + sy * d, x0 + sx * d)
    return _segment_points(y0, x0, *mid) + _segment_points(*mid, y1, x1)


def synthesize_template(rng: np.random.Generator, config: GeneratorConfig | None = None) -> np.ndarray:
    """Draw one board layout as a {0, 1} uint8 array."""
    config = config or GeneratorConfig()
    size = config.image_size
    board = np.zeros((size, size), dtype=bool)

    pitch = config.pad_pitch
    jitter = config.pad_jitter * pitch
    centers = []
    drills = []
    for gy in range(pitch // 2, size, pitch):
        for gx in range(pitch // 2, size, pitch):
            if rng.random() >= config.pad_probability:
                continue
            cy = int(np.clip(gy + rng.uniform(-jitter, jitter), 0, size - 1))
            cx = int(np.clip(gx + rng.uniform(-jitter, jitter), 0, size - 1))
            r = int(rng.integers(config.pad_radius_range[0], config.pad_radius_range[1] + 1))
            if rng.random() < config.circle_probability:
                board |= _disk(board.shape, cy, cx, r)
            else:
                board |= _square(board.shape, cy, cx, r)
            centers.append((cy, cx))
            if rng.random() < config.drill_probability:
                drills.append((cy, cx, max(1, round(r * 0.45))))

    if len(centers) >= 2:
        for _ in range(config.num_traces):
            i, j = rng.choice(len(centers), size=2, replace=False)
            width = int(rng.integers(config.trace_width_range[0], config.trace_width_range[1] + 1))
            path = np.zeros_like(board)
            for y, x in _route(rng, centers[i], centers[j]):
                if 0 <= y < size and 0 <= x < size:
                    path[y, x] = True
            board |= ndimage.binary_dilation(path, structure=np.ones((width, width), dtype=bool))

    # drill after traces so routed copper cannot refill the holes
    for cy, cx, r in drills:
        board &= ~_disk(board.shape, cy, cx, r)

    return board.astype(np.uint8)


def _changed_bbox(changed: np.ndarray, margin: int = 2) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(changed)
    h, w = changed.shape
    return (
        max(int(xs.min()) - margin, 0),
        max(int(ys.min()) - margin, 0),
        min(int(xs.max()) + 1 + margin, w),
        min(int(ys.max()) + 1 + margin, h),
    )


def _boxes_overlap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _pick(rng: np.random.Generator, mask: np.ndarray) -> tuple[int, int] | None:
    flat = np.flatnonzero(mask)
    if flat.size == 0:
        return None
    idx = int(flat[rng.integers(flat.size)])
    return idx // mask.shape[1], idx % mask.shape[1]


def _stamp_bar(
    shape: tuple[int, int], points: list[tuple[int, int]], width: int
) -> np.ndarray:
    path = np.zeros(shape, dtype=bool)
    for y, x in points:
        if 0 <= y < shape[0] and 0 <= x < shape[1]:
            path[y, x] = True
    if width > 1:
        path = ndimage.binary_dilation(path, structure=np.ones((width, width), dtype=bool))
    return path


def _edit_open(tested: np.ndarray, rng: np.random.Generator, r: int) -> np.ndarray | None:
    """Clear a square cut centered on shallow copper (severs thin runs)."""
    copper = tested.astype(bool)
    shallow = copper & ~ndimage.binary_erosion(copper, iterations=max(r, 1))
    at = _pick(rng, shallow)
    if at is None:
        return None
    return tested & ~_square(tested.shape, *at, r)


def _edit_short(tested: np.ndarray, rng: np.random.Generator, r: int) -> np.ndarray | None:
    """March from a copper edge across the gap to the next copper."""
    copper = tested.astype(bool)
    edge = copper & ~ndimage.binary_erosion(copper)
    at = _pick(rng, edge)
    if at is None:
        return None
    y, x = at
    for d in rng.permutation(len(_EIGHT_DIRS)):
        dy, dx = _EIGHT_DIRS[d]
        path = []
        for k in range(1, 5 * r + 2):
            py, px = y + dy * k, x + dx * k
            if not (0 <= py < tested.shape[0] and 0 <= px < tested.shape[1]):
                break
            if copper[py, px]:
                if k >= 3:
                    bar = _stamp_bar(tested.shape, path, width=min(2, max(1, r // 3)))
                    return tested | bar.astype(np.uint8)
                break
            path.append((py, px))
    return None


def _edit_mousebite(tested: np.ndarray, rng: np.random.Generator, r: int) -> np.ndarray | None:
    """Clear a disc centered just outside the copper edge."""
    copper = tested.astype(bool)
    rim = ndimage.binary_dilation(copper) & ~copper
    at = _pick(rng, rim)
    if at is None:
        return None
    return tested & ~_disk(tested.shape, *at, r)


def _edit_spur(tested: np.ndarray, rng: np.random.Generator, r: int) -> np.ndarray | None:
    """Grow a bar outward from a copper edge into empty board."""
    copper = tested.astype(bool)
    edge = copper & ~ndimage.binary_erosion(copper)
    at = _pick(rng, edge)
    if at is None:
        return None
    y, x = at
    length = int(rng.integers(r, 2 * r + 1))
    for d in rng.permutation(len(_EIGHT_DIRS)):
        dy, dx = _EIGHT_DIRS[d]
        points = []
        for k in range(1, length + 1):
            py, px = y + dy * k, x + dx * k
            if not (0 <= py < tested.shape[0] and 0 <= px < tested.shape[1]):
                break
            if copper[py, px]:
                break
            points.append((py, px))
        if len(points) == length:
            bar = _stamp_bar(tested.shape, points, width=min(2, max(1, r // 3)))
            return tested | (bar & ~copper).astype(np.uint8)
    return None


def _edit_spurious(tested: np.ndarray, rng: np.random.Generator, r: int) -> np.ndarray | None:
    """Drop an isolated blob where no copper is within reach."""
    copper = tested.astype(bool)
    clear = ~ndimage.binary_dilation(copper, iterations=r + 3)
    clear[: r + 1, :] = clear[-(r + 1) :, :] = False
    clear[:, : r + 1] = clear[:, -(r + 1) :] = False
    at = _pick(rng, clear)
    if at is None:
        return None
    blob = _disk(tested.shape, *at, r) if rng.random() < 0.5 else _square(tested.shape, *at, r)
    return tested | blob.astype(np.uint8)


def _edit_pin_hole(tested: np.ndarray, rng: np.random.Generator, r: int) -> np.ndarray | None:
    """Punch a hole strictly inside copper."""
    hole_r = max(1, r // 2)
    copper = tested.astype(bool)
    interior = ndimage.binary_erosion(copper, iterations=hole_r + 1)
    at = _pick(rng, interior)
    if at is None:
        return None
    return tested & ~_disk(tested.shape, *at, hole_r)


_EDITS = {
    1: _edit_open,
    2: _edit_short,
    3: _edit_mousebite,
    4: _edit_spur,
    5: _edit_spurious,
    6: _edit_pin_hole,
}


def inject_defects(
    template: np.ndarray,
    rng: np.random.Generator,
    config: GeneratorConfig | None = None,
) -> InjectionResult:
    """Apply a random number of non-overlapping defect edits.

    Args:
        template: {0, 1} board image; never modified.
        rng: drives defect count, types, placement and sizes.
        config: sizing parameters; defaults to the 640 px layout.

    Returns:
        InjectionResult with the edited image, one annotation per defect
        and the boolean mask of all changed pixels.

    Raises:
        GenerationError: fewer than ``min_defects`` edits could be placed
            within the attempt budget.
    """
    config = config or GeneratorConfig()
    tested = template.astype(np.uint8).copy()
    h, w = tested.shape
    target = int(rng.integers(config.min_defects, config.max_defects + 1))

    # a shuffled round-robin pool keeps class frequencies near-uniform even
    # when some defect type is hard to place on a particular board
    num_classes = len(_EDITS)
    pool = np.tile(np.arange(1, num_classes + 1), -(-target // num_classes))
    slots = rng.permutation(pool)[:target]

    annotations: list[Annotation] = []
    occupied: list[tuple[int, int, int, int]] = []
    attempts = 0

    def try_edit(class_id: int) -> bool:
        nonlocal tested, attempts
        attempts += 1
        radius = int(rng.integers(config.defect_radius_range[0], config.defect_radius_range[1] + 1))
        edited = _EDITS[class_id](tested, rng, radius)
        if edited is None:
            return False
        changed = edited != tested
        if not changed.any():
            return False
        bbox = _changed_bbox(changed)
        if any(_boxes_overlap(bbox, other) for other in occupied):
            return False
        tested = edited.astype(np.uint8)
        occupied.append(bbox)
        x1, y1, x2, y2 = bbox
        annotations.append(
            Annotation(box=Box.from_corners(x1 / w, y1 / h, x2 / w, y2 / h), class_id=class_id)
        )
        return True

    per_slot = max(8, config.max_attempts // (2 * target))
    for slot_class in slots:
        if attempts >= config.max_attempts:
            break
        placed = any(
            try_edit(int(slot_class))
            for _ in range(per_slot)
            if attempts < config.max_attempts
        )
        # keep the slot count even if this slot's class refuses to fit
        while not placed and attempts < config.max_attempts:
            placed = try_edit(int(rng.integers(1, num_classes + 1)))

    if len(annotations) < config.min_defects:
        raise GenerationError(
            f"placed {len(annotations)} of {target} defects in {attempts} attempts"
        )
    return InjectionResult(
        tested=tested,
        annotations=tuple(annotations),
        changed=(tested != template),
    )


def generate_pair(
    seed_key: tuple[int, ...],
    config: GeneratorConfig | None = None,
    source_id: str = "",
) -> tuple[ImagePair, tuple[Annotation, ...]]:
    """Build one pair from a seed key; identical keys give identical pairs."""
    config = config or GeneratorConfig()
    rng = np.random.default_rng(np.random.SeedSequence(list(seed_key)))
    template = synthesize_template(rng, config)
    result = inject_defects(template, rng, config)
    return (
        ImagePair(template=template, tested=result.tested, source_id=source_id),
        result.annotations,
    )


def generate_pairs(
    root,
    num_train: int,
    num_test: int,
    seed: int = 0,
    config: GeneratorConfig | None = None,
) -> DatasetIndex:
    """Generate a dataset and write it in the standard pair layout.

    Pair i is derived from SeedSequence([seed, i]), so datasets of
    different sizes share their common prefix.
    """
    config = config or GeneratorConfig()

    def pairs(start: int, count: int):
        for i in range(start, start + count):
            yield generate_pair((seed, i), config, source_id=f"{i:05d}")

    return write_deeppcb(root, pairs(0, num_train), pairs(num_train, num_test))
