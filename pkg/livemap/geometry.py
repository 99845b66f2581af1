# SPDX-License-Identifier: MIT

'''
Pixel → camera → world projection and ground-plane coverage footprints.

Camera coordinates follow the projection convention used throughout the data
plane: ``x`` is the vertical axis (up positive), ``y`` is lateral (right
positive) and ``z`` is the depth along the optical axis. The vertical pixel
coordinate feeds ``x`` and the horizontal one feeds ``y``.
'''

from __future__ import annotations

import dataclasses
import functools
import math

from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from . import LiveMapError


FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]


class GeometryError(LiveMapError):
    pass


class InvalidDepthError(GeometryError):
    pass


class OutOfFrameError(GeometryError):
    pass


class DegenerateBoxError(GeometryError):
    pass


class NoDepthError(GeometryError):
    pass


class IncompatibleGridsError(GeometryError):
    pass


class CameraPoint(NamedTuple):
    x: float
    y: float
    z: float


class WorldPoint(NamedTuple):
    x: float
    y: float
    z: float


class PixelBox(NamedTuple):
    '''Half-open pixel rectangle ``[u_min, u_max) x [v_min, v_max)``.'''
    u_min: int
    v_min: int
    u_max: int
    v_max: int


class Occluder(NamedTuple):
    '''Vertical cylinder standing on the ground plane.'''
    position: WorldPoint
    height_m: float
    radius_m: float


@dataclasses.dataclass(frozen=True)
class CameraIntrinsics:
    image_width_px: int
    image_height_px: int
    fov_deg: float
    focal_px: float
    max_range_m: float

    def __post_init__(self) -> None:
        if self.image_width_px <= 0 or self.image_height_px <= 0:
            raise GeometryError(f'Invalid image size: {self.image_width_px}x{self.image_height_px}')
        if not 0 < self.fov_deg < 180:
            raise GeometryError(f'Invalid field of view: {self.fov_deg}')
        if self.focal_px <= 0:
            raise GeometryError(f'Invalid focal length: {self.focal_px}')
        if self.max_range_m <= 0:
            raise GeometryError(f'Invalid sensing range: {self.max_range_m}')
        expected = self.focal_for(self.image_width_px, self.fov_deg)
        if abs(self.focal_px - expected) > 1e-6 * expected:
            raise GeometryError(
                f'Focal length {self.focal_px} does not match the field of view '
                f'(expected {expected} for {self.fov_deg} deg over {self.image_width_px} px)'
            )

    @staticmethod
    def focal_for(width_px: int, fov_deg: float) -> float:
        return (width_px / 2) / math.tan(math.radians(fov_deg) / 2)

    @classmethod
    def from_fov(cls, width_px: int, height_px: int, fov_deg: float, max_range_m: float) -> CameraIntrinsics:
        '''Builds intrinsics whose focal length is derived from the horizontal field of view.'''
        return cls(width_px, height_px, fov_deg, cls.focal_for(width_px, fov_deg), max_range_m)


@dataclasses.dataclass(frozen=True, eq=False)
class Pose:
    '''Camera pose as a 4x4 homogeneous camera-to-world matrix.'''
    cam_to_world: FloatArray

    def __post_init__(self) -> None:
        matrix = np.array(self.cam_to_world, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise GeometryError(f'Pose matrix must be 4x4, got {matrix.shape}')
        if not np.all(np.isfinite(matrix)):
            raise GeometryError('Pose matrix is not finite')
        if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0], rtol=0, atol=1e-12):
            raise GeometryError(f'Pose matrix last row must be [0, 0, 0, 1], got {matrix[3]}')
        rotation = matrix[:3, :3]
        if not np.allclose(rotation.T @ rotation, np.eye(3), rtol=0, atol=1e-6):
            raise GeometryError('Pose rotation is not orthonormal')
        matrix.setflags(write=False)
        object.__setattr__(self, 'cam_to_world', matrix)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.cam_to_world, other.cam_to_world))

    @classmethod
    def from_ground(cls, x: float, y: float, yaw: float, height: float) -> Pose:
        '''
        Camera standing at ``(x, y, height)`` looking horizontally along ``yaw``
        (radians, counter-clockwise from the world x axis).

        The camera axes map to world axes as up → z, right → (sin, -cos, 0),
        forward → (cos, sin, 0).
        '''
        c, s = math.cos(yaw), math.sin(yaw)
        matrix = np.array([
            [0.0, s, c, x],
            [0.0, -c, s, y],
            [1.0, 0.0, 0.0, height],
            [0.0, 0.0, 0.0, 1.0],
        ])
        return cls(matrix)

    @property
    def position(self) -> WorldPoint:
        t = self.cam_to_world[:3, 3]
        return WorldPoint(float(t[0]), float(t[1]), float(t[2]))

    @property
    def heading(self) -> float:
        '''Yaw of the optical axis projected on the ground plane.'''
        forward = self.cam_to_world[:3, 2]
        return math.atan2(forward[1], forward[0])

    def world_to_camera(self, point: Sequence[float]) -> CameraPoint:
        rotation = self.cam_to_world[:3, :3]
        local = rotation.T @ (np.asarray(point, dtype=np.float64)[:3] - self.cam_to_world[:3, 3])
        return CameraPoint(float(local[0]), float(local[1]), float(local[2]))


@dataclasses.dataclass(frozen=True, eq=False)
class DepthImage:
    depths: FloatArray

    def __post_init__(self) -> None:
        depths = np.array(self.depths, dtype=np.float64)
        if depths.ndim != 2:
            raise GeometryError(f'Depth image must be 2-D, got {depths.ndim} dimensions')
        if not np.all(np.isfinite(depths)) or np.any(depths < 0):
            raise GeometryError('Depth image entries must be finite and non-negative')
        depths.setflags(write=False)
        object.__setattr__(self, 'depths', depths)

    @property
    def width(self) -> int:
        return int(self.depths.shape[1])

    @property
    def height(self) -> int:
        return int(self.depths.shape[0])


def pixel_to_camera(u0: float, v0: float, d: float, intr: CameraIntrinsics) -> CameraPoint:
    if not d > 0:
        raise InvalidDepthError(f'Depth must be positive, got {d}')
    if not (0 <= u0 <= intr.image_width_px and 0 <= v0 <= intr.image_height_px):
        raise OutOfFrameError(f'Pixel ({u0}, {v0}) outside a {intr.image_width_px}x{intr.image_height_px} frame')
    f = intr.focal_px
    x = -(d * (v0 - 0.5 * intr.image_height_px)) / f
    y = (d * (u0 - 0.5 * intr.image_width_px)) / f
    return CameraPoint(x, y, float(d))


def camera_to_world(p: CameraPoint, pose: Pose) -> WorldPoint:
    w = pose.cam_to_world @ np.array([p.x, p.y, p.z, 1.0])
    return WorldPoint(float(w[0]), float(w[1]), float(w[2]))


def world_to_pixel(point: Sequence[float], pose: Pose, intr: CameraIntrinsics) -> Tuple[float, float, float]:
    '''Inverse projection: returns ``(u0, v0, d)`` for a point in front of the camera.'''
    cam = pose.world_to_camera(point)
    if not cam.z > 0:
        raise InvalidDepthError(f'Point is behind the camera (depth {cam.z})')
    f = intr.focal_px
    u0 = cam.y * f / cam.z + 0.5 * intr.image_width_px
    v0 = -cam.x * f / cam.z + 0.5 * intr.image_height_px
    return u0, v0, cam.z


_SQUARE_OFFSETS = (
    (0, 0), (1, 0), (-1, 0), (0, 1), (0, -1),
    (1, 1), (-1, -1), (1, -1), (-1, 1),
)


def robust_depth(
    depth: DepthImage,
    box: PixelBox,
    *,
    samples: int = 5,
    square: int = 5,
    spacing: int = 5,
) -> float:
    '''
    Object depth from small squares sampled at and around the box centre.

    Every square is averaged over its non-zero returns, the largest and the
    smallest square averages are dropped, and the remaining ones are averaged.
    '''
    if not 1 <= samples <= len(_SQUARE_OFFSETS):
        raise GeometryError(f'Sample count must be within [1, {len(_SQUARE_OFFSETS)}], got {samples}')

    u_min, u_max = max(0, box.u_min), min(depth.width, box.u_max)
    v_min, v_max = max(0, box.v_min), min(depth.height, box.v_max)
    if u_max - u_min < square or v_max - v_min < square:
        raise DegenerateBoxError(f'{box} is smaller than {square}x{square} inside a {depth.width}x{depth.height} image')

    half = square // 2
    cu, cv = (u_min + u_max) // 2, (v_min + v_max) // 2
    averages: List[float] = []
    for du, dv in _SQUARE_OFFSETS[:samples]:
        # keep the whole square inside the clamped box
        su = min(max(cu + du * spacing, u_min + half), u_max - square + half)
        sv = min(max(cv + dv * spacing, v_min + half), v_max - square + half)
        patch = depth.depths[sv - half:sv - half + square, su - half:su - half + square]
        returns = patch[patch > 0]
        if returns.size:
            averages.append(float(returns.mean()))

    if not averages:
        raise NoDepthError(f'No depth returns around the centre of {box}')
    averages.sort()
    if len(averages) >= 3:
        averages = averages[1:-1]
    return float(np.mean(averages))


@dataclasses.dataclass(frozen=True)
class GridSpec:
    origin: Tuple[float, float]
    cell_m: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not self.cell_m > 0:
            raise GeometryError(f'Grid cell size must be positive, got {self.cell_m}')
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f'Invalid grid size: {self.width}x{self.height}')

    @classmethod
    def around(cls, center: Tuple[float, float], half_extent_m: float, cell_m: float) -> GridSpec:
        '''Square grid centred on ``center`` covering ``half_extent_m`` in every direction.'''
        cells = int(math.ceil(2 * half_extent_m / cell_m))
        origin = (center[0] - cells * cell_m / 2, center[1] - cells * cell_m / 2)
        return cls(origin, cell_m, cells, cells)

    def cell_centers(self) -> Tuple[FloatArray, FloatArray]:
        '''``(xs, ys)`` arrays of shape ``(height, width)``.'''
        return _cell_centers(self)

    def cell_of(self, x: float, y: float) -> Optional[Tuple[int, int]]:
        '''``(row, col)`` of the cell containing the point, ``None`` outside the grid.'''
        col = math.floor((x - self.origin[0]) / self.cell_m)
        row = math.floor((y - self.origin[1]) / self.cell_m)
        if 0 <= col < self.width and 0 <= row < self.height:
            return row, col
        return None

    def window(self, x_min: float, y_min: float, x_max: float, y_max: float) -> Tuple[slice, slice]:
        '''Row/column slices of the cells whose extent touches the given rectangle.'''
        c0 = max(0, math.floor((x_min - self.origin[0]) / self.cell_m))
        c1 = min(self.width, math.floor((x_max - self.origin[0]) / self.cell_m) + 1)
        r0 = max(0, math.floor((y_min - self.origin[1]) / self.cell_m))
        r1 = min(self.height, math.floor((y_max - self.origin[1]) / self.cell_m) + 1)
        return slice(r0, max(r0, r1)), slice(c0, max(c0, c1))


@functools.lru_cache(maxsize=16)
def _cell_centers(spec: GridSpec) -> Tuple[FloatArray, FloatArray]:
    xs = spec.origin[0] + (np.arange(spec.width) + 0.5) * spec.cell_m
    ys = spec.origin[1] + (np.arange(spec.height) + 0.5) * spec.cell_m
    gx, gy = np.meshgrid(xs, ys)
    gx.setflags(write=False)
    gy.setflags(write=False)
    return gx, gy


@dataclasses.dataclass(eq=False)
class CoverageGrid:
    '''Rasterised ground-plane footprint, ``occupancy[row, col]`` with rows along y.'''
    spec: GridSpec
    occupancy: BoolArray

    def __post_init__(self) -> None:
        self.occupancy = np.asarray(self.occupancy, dtype=np.bool_)
        if self.occupancy.shape != (self.spec.height, self.spec.width):
            raise GeometryError(
                f'Occupancy shape {self.occupancy.shape} does not match the grid '
                f'({self.spec.height}, {self.spec.width})'
            )

    @classmethod
    def empty(cls, spec: GridSpec) -> CoverageGrid:
        return cls(spec, np.zeros((spec.height, spec.width), dtype=np.bool_))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CoverageGrid):
            return NotImplemented
        return self.spec == other.spec and bool(np.array_equal(self.occupancy, other.occupancy))

    def _check(self, other: CoverageGrid) -> None:
        if self.spec != other.spec:
            raise IncompatibleGridsError(f'{self.spec} != {other.spec}')

    def __or__(self, other: CoverageGrid) -> CoverageGrid:
        self._check(other)
        return CoverageGrid(self.spec, self.occupancy | other.occupancy)

    def __and__(self, other: CoverageGrid) -> CoverageGrid:
        self._check(other)
        return CoverageGrid(self.spec, self.occupancy & other.occupancy)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    @property
    def area(self) -> float:
        return self.count * self.spec.cell_m ** 2

    def covers(self, point: Sequence[float]) -> bool:
        cell = self.spec.cell_of(point[0], point[1])
        return cell is not None and bool(self.occupancy[cell])


def grid_union(a: CoverageGrid, b: CoverageGrid) -> CoverageGrid:
    return a | b


def grid_intersection(a: CoverageGrid, b: CoverageGrid) -> CoverageGrid:
    return a & b


def grid_area(grid: CoverageGrid) -> float:
    return grid.area


def union_all(grids: Iterable[CoverageGrid], spec: GridSpec) -> CoverageGrid:
    out = CoverageGrid.empty(spec)
    for grid in grids:
        out = out | grid
    return out


def _wrap(angle: FloatArray) -> FloatArray:
    return (angle + np.pi) % (2 * np.pi) - np.pi


def visible(
    points: npt.ArrayLike,
    pose: Pose,
    intr: CameraIntrinsics,
    occluders: Sequence[Occluder] = (),
) -> BoolArray:
    '''
    Ground-plane visibility of ``points`` (``(n, 2)`` or ``(n, 3)``, only x/y used).

    A point is visible when it lies in the horizontal sensing sector (apex at the
    camera ground position, half-angle fov/2, radius max_range_m) and is not in
    the shadow of an occluder. An occluder casts a shadow only when its top is
    at or above the camera height (camera-frame ``x >= 0``); the shadow is its
    angular span beyond the occluder's far side.
    '''
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))[:, :2]
    apex = pose.position
    heading = pose.heading
    dx, dy = pts[:, 0] - apex.x, pts[:, 1] - apex.y
    dist = np.hypot(dx, dy)
    bearing = np.arctan2(dy, dx)
    half_fov = math.radians(intr.fov_deg) / 2
    mask: BoolArray = (dist <= intr.max_range_m) & ((np.abs(_wrap(bearing - heading)) <= half_fov) | (dist == 0))

    for occluder in occluders:
        top = pose.world_to_camera((occluder.position.x, occluder.position.y, occluder.height_m))
        if top.x < 0:
            continue
        od = math.hypot(occluder.position.x - apex.x, occluder.position.y - apex.y)
        if od <= occluder.radius_m:
            continue
        span = math.asin(occluder.radius_m / od)
        o_bearing = math.atan2(occluder.position.y - apex.y, occluder.position.x - apex.x)
        shadow = (dist > od + occluder.radius_m) & (np.abs(_wrap(bearing - o_bearing)) <= span)
        mask &= ~shadow
    return mask


def vehicle_coverage(
    pose: Pose,
    intr: CameraIntrinsics,
    occluders: Sequence[Occluder],
    spec: GridSpec,
) -> CoverageGrid:
    '''Rasterises the visibility predicate over the cell centres of ``spec``.'''
    grid = CoverageGrid.empty(spec)
    apex = pose.position
    reach = intr.max_range_m
    rows, cols = spec.window(apex.x - reach, apex.y - reach, apex.x + reach, apex.y + reach)
    xs, ys = spec.cell_centers()
    wx, wy = xs[rows, cols], ys[rows, cols]
    if wx.size == 0:
        return grid
    # occluders out of reach cannot shadow anything inside the sector
    nearby = [
        occluder for occluder in occluders
        if math.hypot(occluder.position.x - apex.x, occluder.position.y - apex.y) <= reach + occluder.radius_m
    ]
    mask = visible(np.stack([wx.ravel(), wy.ravel()], axis=1), pose, intr, nearby)
    grid.occupancy[rows, cols] = mask.reshape(wx.shape)
    return grid
