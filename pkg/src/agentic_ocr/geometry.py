"""Rectangle arithmetic on the 0-1000 page-normalized grid.

Boxes are integer ``[x_min, y_min, x_max, y_max]`` in thousandths of the page
width/height. Overlap ratios are computed from exact integer areas and divided
once, so two independent computations over the same boxes agree bit-for-bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import DegenerateBox, InvalidBox, OutOfFrame

GRID = 1000


def _is_int(value: object) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


@dataclass(frozen=True, order=True)
class NormBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(_is_int(c) for c in coords):
            raise InvalidBox(f"box coordinates must be integers, got {list(coords)}")
        if not (0 <= self.x_min < self.x_max <= GRID and 0 <= self.y_min < self.y_max <= GRID):
            raise InvalidBox(f"box {list(coords)} violates 0 <= min < max <= {GRID}")

    @classmethod
    def from_seq(cls, values: Sequence[int]) -> "NormBox":
        if len(values) != 4:
            raise InvalidBox(f"box needs 4 coordinates, got {len(values)}")
        return cls(*values)

    def to_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def page_fraction(self) -> Fraction:
        """Share of the page covered by this box, as an exact fraction."""
        return Fraction(self.area, GRID * GRID)


@dataclass(frozen=True)
class PixelRect:
    left: int
    top: int
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise DegenerateBox(f"pixel rect {self.width}x{self.height} has no area")
        if self.left < 0 or self.top < 0:
            raise OutOfFrame(f"pixel rect origin ({self.left}, {self.top}) is negative")

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def bottom(self) -> int:
        return self.top + self.height

    def as_pil_box(self) -> tuple[int, int, int, int]:
        return (self.left, self.top, self.right, self.bottom)

    def fits(self, page_width: int, page_height: int) -> bool:
        return self.right <= page_width and self.bottom <= page_height


class Rotation(enum.IntEnum):
    """Counter-clockwise rotation applied to a crop."""

    R0 = 0
    R90 = 90
    R180 = 180
    R270 = 270

    @classmethod
    def parse(cls, value: object) -> "Rotation":
        if not _is_int(value):
            raise ValueError(f"rotation must be an integer number of degrees, got {value!r}")
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"rotation must be one of 0/90/180/270, got {value}") from None

    @property
    def swaps_axes(self) -> bool:
        return self in (Rotation.R90, Rotation.R270)


def intersection_area(a: NormBox, b: NormBox) -> int:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0
    return w * h


def iou_em(a: NormBox, b: NormBox) -> float:
    """Standard intersection over union."""
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def iou_min(a: NormBox, b: NormBox) -> float:
    """Intersection over the smaller of the two areas; 1.0 under containment."""
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    return inter / min(a.area, b.area)


def _round_half_up(value: Fraction) -> int:
    # floor(v + 1/2) on exact rationals
    return (value + Fraction(1, 2)).__floor__()


def to_pixels(box: NormBox, page_width: int, page_height: int) -> PixelRect:
    """Map a normalized box onto a concrete ``page_width x page_height`` image.

    Each edge is rounded half-up independently and clamped to the image.
    """
    if page_width < 1 or page_height < 1:
        raise ValueError(f"page dimensions must be positive, got {page_width}x{page_height}")
    left = _round_half_up(Fraction(box.x_min * page_width, GRID))
    top = _round_half_up(Fraction(box.y_min * page_height, GRID))
    right = _round_half_up(Fraction(box.x_max * page_width, GRID))
    bottom = _round_half_up(Fraction(box.y_max * page_height, GRID))
    left, right = max(0, left), min(page_width, right)
    top, bottom = max(0, top), min(page_height, bottom)
    if right <= left or bottom <= top:
        raise DegenerateBox(
            f"box {box.to_list()} collapses to {right - left}x{bottom - top} px "
            f"on a {page_width}x{page_height} image"
        )
    return PixelRect(left, top, right - left, bottom - top)


def rotated_size(width: int, height: int, rotation: Rotation) -> tuple[int, int]:
    return (height, width) if rotation.swaps_axes else (width, height)


def rotate_point(x: Fraction, y: Fraction, width: int, height: int, rotation: Rotation) -> tuple[Fraction, Fraction]:
    """Forward CCW rotation of a point inside a ``width x height`` frame."""
    if rotation is Rotation.R0:
        return x, y
    if rotation is Rotation.R90:
        return y, width - x
    if rotation is Rotation.R180:
        return width - x, height - y
    return height - y, x


def unrotate_point(x: Fraction, y: Fraction, width: int, height: int, rotation: Rotation) -> tuple[Fraction, Fraction]:
    """Inverse of :func:`rotate_point`; ``width``/``height`` are the un-rotated frame."""
    if rotation is Rotation.R0:
        return x, y
    if rotation is Rotation.R90:
        return width - y, x
    if rotation is Rotation.R180:
        return width - x, height - y
    return y, height - x


def _bounds(points: Iterable[tuple[Fraction, Fraction]]) -> tuple[Fraction, Fraction, Fraction, Fraction]:
    xs, ys = zip(*points)
    return min(xs), min(ys), max(xs), max(ys)


def _normalize_edges(
    x0: Fraction, y0: Fraction, x1: Fraction, y1: Fraction, width: int, height: int, *, what: str
) -> NormBox:
    # one grid unit of slack for rounding at the frame edges
    tol_x = Fraction(width, GRID)
    tol_y = Fraction(height, GRID)
    if x0 < -tol_x or y0 < -tol_y or x1 > width + tol_x or y1 > height + tol_y:
        raise OutOfFrame(f"{what} [{float(x0)}, {float(y0)}, {float(x1)}, {float(y1)}] lies outside {width}x{height}")
    edges = [
        _round_half_up(x0 * GRID / width),
        _round_half_up(y0 * GRID / height),
        _round_half_up(x1 * GRID / width),
        _round_half_up(y1 * GRID / height),
    ]
    edges = [min(GRID, max(0, e)) for e in edges]
    # sub-unit boxes widen to one grid unit rather than vanish
    for lo, hi in ((0, 2), (1, 3)):
        if edges[hi] <= edges[lo]:
            if edges[lo] < GRID:
                edges[hi] = edges[lo] + 1
            else:
                edges[lo] = edges[hi] - 1
    return NormBox(*edges)


def remap_to_page(
    box_in_crop: NormBox,
    crop: PixelRect,
    rotation: Rotation,
    page_width: int,
    page_height: int,
) -> NormBox:
    """Project a box given in the rotated crop's own 0-1000 frame back onto the page."""
    if not crop.fits(page_width, page_height):
        raise OutOfFrame(f"crop {crop} exceeds the {page_width}x{page_height} page")
    rw, rh = rotated_size(crop.width, crop.height, rotation)
    corners = [
        (Fraction(box_in_crop.x_min * rw, GRID), Fraction(box_in_crop.y_min * rh, GRID)),
        (Fraction(box_in_crop.x_max * rw, GRID), Fraction(box_in_crop.y_max * rh, GRID)),
    ]
    local = [unrotate_point(x, y, crop.width, crop.height, rotation) for x, y in corners]
    x0, y0, x1, y1 = _bounds(local)
    return _normalize_edges(
        x0 + crop.left, y0 + crop.top, x1 + crop.left, y1 + crop.top, page_width, page_height, what="remapped box"
    )


def project_to_crop(
    page_box: NormBox,
    crop: PixelRect,
    rotation: Rotation,
    page_width: int,
    page_height: int,
) -> NormBox:
    """Express a page box in the 0-1000 frame of the rotated crop (inverse of :func:`remap_to_page`)."""
    corners = [
        (Fraction(page_box.x_min * page_width, GRID) - crop.left, Fraction(page_box.y_min * page_height, GRID) - crop.top),
        (Fraction(page_box.x_max * page_width, GRID) - crop.left, Fraction(page_box.y_max * page_height, GRID) - crop.top),
    ]
    rotated = [rotate_point(x, y, crop.width, crop.height, rotation) for x, y in corners]
    x0, y0, x1, y1 = _bounds(rotated)
    rw, rh = rotated_size(crop.width, crop.height, rotation)
    return _normalize_edges(x0, y0, x1, y1, rw, rh, what="projected box")
