"""Box, polygon and mask math: IoU, shoelace area, even-odd rasterization,
Dice, fixed-count contour resampling, and the CTR/PCR clinical ratios.

All coordinates are normalized to [0, 1] with the image convention: x grows
rightward, y grows downward, so "topmost" means smallest y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


class DegeneratePolygon(GeometryError):
    pass


class DimensionMismatch(GeometryError):
    pass


class ZeroChestWidth(GeometryError):
    pass


CTR_BANDS = ("Normal", "Mild", "Moderate", "Severe")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, corners (x1, y1) top-left and (x2, y2) bottom-right."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise GeometryError(f"invalid box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def centroid(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Polygon:
    """Implicitly closed polygon given by ordered normalized vertices."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise DegeneratePolygon(f"need >= 3 vertices, got {len(self.vertices)}")
        for x, y in self.vertices:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise GeometryError(f"vertex ({x}, {y}) outside [0,1]")

    @classmethod
    def from_points(cls, pts) -> "Polygon":
        return cls(tuple((float(x), float(y)) for x, y in pts))

    @classmethod
    def from_flat(cls, flat) -> "Polygon":
        if len(flat) % 2 != 0:
            raise GeometryError("flat coordinate list must have even length")
        return cls.from_points(zip(flat[0::2], flat[1::2]))

    def as_flat(self) -> list[float]:
        return [c for xy in self.vertices for c in xy]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    @property
    def centroid(self) -> tuple[float, float]:
        a = self.as_array()
        return (float(a[:, 0].mean()), float(a[:, 1].mean()))

    def bbox(self) -> BBox:
        a = self.as_array()
        return BBox(float(a[:, 0].min()), float(a[:, 1].min()),
                    float(a[:, 0].max()), float(a[:, 1].max()))


@dataclass
class Mask:
    """Boolean pixel grid; bits[row, col] with row 0 at the top."""

    width: int
    height: int
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.bits.shape != (self.height, self.width):
            raise DimensionMismatch(
                f"bits shape {self.bits.shape} != ({self.height}, {self.width})")
        self.bits = self.bits.astype(bool)

    def count(self) -> int:
        return int(self.bits.sum())

    def area(self) -> float:
        """Pixel count normalized by grid size."""
        return self.count() / (self.width * self.height)


@dataclass(frozen=True)
class CTRReport:
    heart_width: float
    chest_width: float
    ratio: float
    band: str


@dataclass(frozen=True)
class PCRReport:
    pneumo_area: float
    affected_lung_area: float  # area of affected lung union pneumothorax
    ratio: float
    affected_side: str


def box_iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def signed_area(p: Polygon) -> float:
    a = p.as_array()
    x, y = a[:, 0], a[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_area(p: Polygon) -> float:
    """Absolute shoelace area; raises DegeneratePolygon below 1e-12."""
    area = abs(signed_area(p))
    if area < 1e-12:
        raise DegeneratePolygon(f"area {area} below threshold")
    return area


def perimeter(p: Polygon) -> float:
    a = p.as_array()
    d = np.roll(a, -1, axis=0) - a
    return float(np.hypot(d[:, 0], d[:, 1]).sum())


def rasterize(p: Polygon, width: int, height: int) -> Mask:
    """Even-odd fill at pixel centers ((i+0.5)/width, (j+0.5)/height).

    Scanline parity: each edge toggles the pixels left of its crossing on
    every row it spans, then a suffix sum recovers per-pixel parity.
    """
    verts = p.as_array()
    nxt = np.roll(verts, -1, axis=0)
    toggles = np.zeros((height, width + 1), dtype=np.int32)
    for (x1, y1), (x2, y2) in zip(verts, nxt):
        if y1 == y2:
            continue
        ylo, yhi = (y1, y2) if y1 < y2 else (y2, y1)
        j_lo = max(0, math.ceil(ylo * height - 0.5))
        j_hi = min(height, math.ceil(yhi * height - 0.5))
        if j_lo >= j_hi:
            continue
        rows = np.arange(j_lo, j_hi)
        cy = (rows + 0.5) / height
        x_int = x1 + (cy - y1) * (x2 - x1) / (y2 - y1)
        cols = np.clip(np.ceil(x_int * width - 0.5).astype(int), 0, width)
        np.add.at(toggles, (rows, cols), 1)
    # parity of toggles at columns strictly right of each pixel
    suffix = np.cumsum(toggles[:, ::-1], axis=1)[:, ::-1]
    bits = (suffix[:, 1:] % 2).astype(bool)
    return Mask(width=width, height=height, bits=bits)


def dice(a: Mask, b: Mask) -> float:
    """2|a∩b| / (|a|+|b|); 1.0 when both masks are empty."""
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch(f"{(a.width, a.height)} vs {(b.width, b.height)}")
    na, nb = a.count(), b.count()
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a.bits, b.bits).sum())
    return 2.0 * inter / (na + nb)


def _canonical_start(verts: np.ndarray) -> np.ndarray:
    """Rotate vertex list so it starts at the topmost (ties: leftmost) vertex."""
    order = np.lexsort((verts[:, 0], verts[:, 1]))
    return np.roll(verts, -int(order[0]), axis=0)


def _ensure_clockwise(verts: np.ndarray) -> np.ndarray:
    # y grows downward, so visual clockwise means positive shoelace sum
    x, y = verts[:, 0], verts[:, 1]
    s = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    if s < 0:
        verts = np.concatenate([verts[:1], verts[1:][::-1]], axis=0)
    return verts


def _walk_equal_chords(verts: np.ndarray, lengths: np.ndarray, total: float,
                       chord: float, k: int):
    """Walk k chords of the given length along the closed polyline.

    Returns (points, path_used) with path_used possibly exceeding `total`
    (walk wraps past the start) or (None, None) when the boundary is
    exhausted before k chords fit.
    """
    n = len(verts)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])  # path position of vertex i
    pts = [verts[0].copy()]
    edge = 0          # index into the unrolled edge list (wraps once at most)
    t_cur = 0.0       # param consumed on the current edge
    used = 0.0
    q = verts[0]
    for _ in range(k):
        found = False
        while edge < 2 * n:
            a = verts[edge % n]
            b = verts[(edge + 1) % n]
            d = b - a
            f = a - q
            aa = float(d @ d)
            if aa > 0.0:
                bb = 2.0 * float(f @ d)
                cc = float(f @ f) - chord * chord
                disc = bb * bb - 4.0 * aa * cc
                if disc >= 0.0:
                    root = math.sqrt(disc)
                    for t in ((-bb - root) / (2 * aa), (-bb + root) / (2 * aa)):
                        if t_cur < t <= 1.0 + 1e-15:
                            t = min(t, 1.0)
                            base = cum[edge] if edge < n else total + cum[edge - n]
                            used = base + t * lengths[edge % n]
                            q = a + t * d
                            pts.append(q.copy())
                            t_cur = t
                            found = True
                            break
            if found:
                break
            edge += 1
            t_cur = 0.0
        if not found:
            return None, None
    return np.array(pts), used


def resample_contour(p: Polygon, k: int = 30) -> Polygon:
    """Resample to exactly k vertices with uniform (equal-chord) spacing.

    Starts from the topmost vertex (ties broken leftmost), walks clockwise,
    and solves for the chord length that closes the loop in exactly k steps.
    An already-resampled polygon is an exact fixed point.
    """
    if k < 3:
        raise DegeneratePolygon(f"k={k} < 3")
    polygon_area(p)  # degeneracy guard
    verts = _ensure_clockwise(_canonical_start(p.as_array()))
    lengths = np.hypot(*((np.roll(verts, -1, axis=0) - verts).T))
    total = float(lengths.sum())
    if total <= 0.0:
        raise DegeneratePolygon("zero perimeter")

    def gap(chord: float) -> float:
        pts, used = _walk_equal_chords(verts, lengths, total, chord, k)
        if pts is None:
            return float("inf")
        return used - total

    # chords cut corners so k chords of length total/k always reach the end
    hi = total / k
    lo = hi * 0.25
    while gap(lo) > 0.0:
        lo *= 0.5
        if lo < 1e-12:
            break
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    pts, _ = _walk_equal_chords(verts, lengths, total, lo, k)
    if pts is None:
        raise DegeneratePolygon("equal-chord walk failed")
    out = np.clip(pts[:k], 0.0, 1.0)
    return Polygon.from_points(out)


def _row_extents(polys: list[Polygon], rows: int):
    """Per-row horizontal [min, max] crossing extents over a scanline raster."""
    lo = np.full(rows, np.inf)
    hi = np.full(rows, -np.inf)
    cy = (np.arange(rows) + 0.5) / rows
    for poly in polys:
        verts = poly.as_array()
        nxt = np.roll(verts, -1, axis=0)
        for (x1, y1), (x2, y2) in zip(verts, nxt):
            if y1 == y2:
                continue
            ylo, yhi = (y1, y2) if y1 < y2 else (y2, y1)
            sel = (cy >= ylo) & (cy < yhi)
            if not sel.any():
                continue
            x_int = x1 + (cy[sel] - y1) * (x2 - x1) / (y2 - y1)
            np.minimum.at(lo, np.nonzero(sel)[0], x_int)
            np.maximum.at(hi, np.nonzero(sel)[0], x_int)
    return lo, hi


def ctr_band(ratio: float) -> str:
    """CTR severity bands, boundaries assigned to the higher band."""
    if ratio <= 0.0:
        raise GeometryError(f"ratio {ratio} must be positive")
    if ratio < 0.51:
        return "Normal"
    if ratio < 0.55:
        return "Mild"
    if ratio < 0.60:
        return "Moderate"
    return "Severe"


def compute_ctr(heart: Polygon, lung_left: Polygon, lung_right: Polygon,
                rows: int = 512) -> CTRReport:
    """Cardiothoracic ratio: widest heart row span over widest chest row span."""
    for poly in (heart, lung_left, lung_right):
        polygon_area(poly)
    h_lo, h_hi = _row_extents([heart], rows)
    c_lo, c_hi = _row_extents([lung_left, lung_right], rows)
    heart_w = float(np.nanmax(np.where(h_hi >= h_lo, h_hi - h_lo, 0.0)))
    chest_w = float(np.nanmax(np.where(c_hi >= c_lo, c_hi - c_lo, 0.0)))
    if chest_w <= 0.0:
        raise ZeroChestWidth("lung union has no horizontal extent")
    ratio = heart_w / chest_w
    return CTRReport(heart_width=heart_w, chest_width=chest_w,
                     ratio=ratio, band=ctr_band(ratio))


def compute_pcr(pneumo: Polygon, lung_left: Polygon, lung_right: Polygon,
                resolution: int = 512) -> PCRReport:
    """Pneumothorax compression ratio against the affected lung.

    The affected side is the lung whose bounding box contains the
    pneumothorax centroid (fallback: nearer lung centroid). The denominator
    is the affected lung union the pneumothorax so the ratio stays in [0,1].
    """
    for poly in (pneumo, lung_left, lung_right):
        polygon_area(poly)
    cx, cy = pneumo.centroid
    side = None
    for name, lung in (("Left", lung_left), ("Right", lung_right)):
        bb = lung.bbox()
        if bb.x1 <= cx <= bb.x2 and bb.y1 <= cy <= bb.y2:
            side = name
            break
    if side is None:
        dl = math.dist((cx, cy), lung_left.centroid)
        dr = math.dist((cx, cy), lung_right.centroid)
        side = "Left" if dl <= dr else "Right"
    lung = lung_left if side == "Left" else lung_right
    m_p = rasterize(pneumo, resolution, resolution)
    m_l = rasterize(lung, resolution, resolution)
    union = int(np.logical_or(m_p.bits, m_l.bits).sum())
    total = resolution * resolution
    pneumo_area = m_p.count() / total
    union_area = union / total
    if union_area <= 0.0:
        raise DegeneratePolygon("affected region rasterized to nothing")
    return PCRReport(pneumo_area=pneumo_area, affected_lung_area=union_area,
                     ratio=pneumo_area / union_area, affected_side=side)


def format_flat(values, precision: int = 6) -> str:
    """Bracketed flat list literal, e.g. "[0.1, 0.2, 0.3, 0.4]"."""
    return "[" + ", ".join(f"{round(float(v), precision):g}" for v in values) + "]"


def parse_flat(text: str) -> list[float]:
    body = text.strip()
    if not (body.startswith("[") and body.endswith("]")):
        raise GeometryError(f"not a bracketed list: {text!r}")
    body = body[1:-1].strip()
    if not body:
        return []
    return [float(tok) for tok in body.split(",")]
