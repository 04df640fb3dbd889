"""Projection targets: fiducial markers, boards, the hexagonal prism, trajectories.

Marker code family
------------------
Each marker is a 6x6 binary grid: a one-cell black border around a 4x4
payload. The payload carries a 10-bit id plus a 6-bit checksum. Four checksum
bits sit in the payload corners with the fixed pattern (1, 0, 0, 0) and anchor
the orientation: any 90-degree rotation of a valid payload moves the single
bright corner, so at most one rotation of an observed grid can decode. The
remaining two checksum bits are parity over the even and odd id bits.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DistanceOutOfRange,
    SceneFormatError,
    TimeOutOfRange,
    UnknownMarkerId,
)
from .geometry import Pose, axis_angle_from_rotation, rotation_from_axis_angle
from .image import Image

ZONE_BLUE = "blue"
ZONE_GREEN = "green"
ZONE_YELLOW = "yellow"

ZONE_RGB = {
    ZONE_BLUE: (0.15, 0.25, 0.95),
    ZONE_GREEN: (0.10, 0.85, 0.20),
    ZONE_YELLOW: (0.95, 0.90, 0.10),
}

MARKER_CELLS = 6
PAYLOAD_CELLS = 4
MAX_MARKER_ID = 1023

# Payload cell coordinates (row, col) for the id bits, MSB first; the four
# corner cells hold the orientation anchor and the last two slots the parity.
_ID_CELLS = [
    (0, 1), (0, 2),
    (1, 0), (1, 1), (1, 2), (1, 3),
    (2, 0), (2, 1), (2, 2), (2, 3),
]
_PARITY_CELLS = [(3, 1), (3, 2)]
_ANCHOR_CELLS = [(0, 0), (0, 3), (3, 3), (3, 0)]
_ANCHOR_VALUES = [1, 0, 0, 0]

ALBEDO_WHITE = 0.85
ALBEDO_BLACK = 0.05
# Texel pitch of 0.25 mm keeps the antialiased print edge about one device
# pixel wide over the 70..250 mm working range, which the renderer's pixel
# integration relies on.
DEFAULT_TEXTURE_PPM = 4.0


def _id_parity(marker_id: int) -> tuple[int, int]:
    bits = [(marker_id >> (9 - i)) & 1 for i in range(10)]
    return (
        bits[0] ^ bits[2] ^ bits[4] ^ bits[6] ^ bits[8],
        bits[1] ^ bits[3] ^ bits[5] ^ bits[7] ^ bits[9],
    )


def encode_marker_bits(marker_id: int) -> np.ndarray:
    """6x6 grid for a marker id; 1 = white cell, 0 = black cell."""
    if not (0 <= marker_id <= MAX_MARKER_ID):
        raise UnknownMarkerId(f"marker id {marker_id} outside 0..{MAX_MARKER_ID}")
    payload = np.zeros((PAYLOAD_CELLS, PAYLOAD_CELLS), dtype=np.uint8)
    for (r, c), v in zip(_ANCHOR_CELLS, _ANCHOR_VALUES):
        payload[r, c] = v
    for i, (r, c) in enumerate(_ID_CELLS):
        payload[r, c] = (marker_id >> (9 - i)) & 1
    p0, p1 = _id_parity(marker_id)
    payload[_PARITY_CELLS[0]] = p0
    payload[_PARITY_CELLS[1]] = p1
    bits = np.zeros((MARKER_CELLS, MARKER_CELLS), dtype=np.uint8)
    bits[1:5, 1:5] = payload
    return bits


def decode_payload(payload: np.ndarray) -> tuple[int, int] | None:
    """Decode a 4x4 payload, trying all four rotations.

    Returns (id, rotation) where rotation counts the number of 90-degree
    clockwise turns applied to the canonical marker to produce the observed
    payload, or None when no rotation validates.
    """
    payload = np.asarray(payload).astype(np.uint8)
    for rot in range(4):
        # Undo `rot` clockwise turns: np.rot90 rotates counter-clockwise in
        # (row, col) indexing, which is clockwise on screen with y down.
        candidate = np.rot90(payload, -rot)
        if any(candidate[r, c] != v for (r, c), v in zip(_ANCHOR_CELLS, _ANCHOR_VALUES)):
            continue
        marker_id = 0
        for r, c in _ID_CELLS:
            marker_id = (marker_id << 1) | int(candidate[r, c])
        p0, p1 = _id_parity(marker_id)
        if candidate[_PARITY_CELLS[0]] == p0 and candidate[_PARITY_CELLS[1]] == p1:
            return marker_id, rot
    return None


@dataclass(frozen=True)
class FiducialMarker:
    """Coded square marker; side_mm is the printed outer size."""

    id: int
    side_mm: float = 13.0
    bits: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        bits = self.bits if self.bits is not None else encode_marker_bits(self.id)
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape != (MARKER_CELLS, MARKER_CELLS):
            raise ValueError("marker grid must be 6x6")
        if bits[0, :].any() or bits[-1, :].any() or bits[:, 0].any() or bits[:, -1].any():
            raise ValueError("border cells must be black")
        decoded = decode_payload(bits[1:5, 1:5])
        if decoded is None or decoded != (self.id, 0):
            raise ValueError("payload does not validate for this id")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def local_corners(self) -> np.ndarray:
        """Corner coordinates (mm) in the marker frame: TL, TR, BR, BL."""
        h = self.side_mm / 2.0
        return np.array([[-h, -h], [h, -h], [h, h], [-h, h]])


@dataclass(frozen=True)
class MarkerPlacement:
    marker: FiducialMarker
    center_mm: tuple[float, float]
    angle_rad: float = 0.0


@dataclass
class FiducialBoard:
    """Planar target: markers plus printed reference dots on a white board.

    Board frame: x right, y down, z out of the printed face toward the
    viewer is -z (the device sees the board front when its +z axis meets
    the board's -z normal).
    """

    markers: list[MarkerPlacement]
    reference_dots: list[tuple[float, float]]
    extent_mm: tuple[float, float]
    dot_radius_mm: float = 2.0
    texture_ppm: float = DEFAULT_TEXTURE_PPM
    _faces: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        w, h = self.extent_mm
        for p in self.markers:
            half = p.marker.side_mm / 2.0 * math.sqrt(2.0)
            if abs(p.center_mm[0]) + half > w / 2.0 or abs(p.center_mm[1]) + half > h / 2.0:
                raise ValueError(f"marker {p.marker.id} exceeds the board extent")
        for dx, dy in self.reference_dots:
            if abs(dx) + self.dot_radius_mm > w / 2.0 or abs(dy) + self.dot_radius_mm > h / 2.0:
                raise ValueError("reference dot exceeds the board extent")
            for p in self.markers:
                half = p.marker.side_mm / 2.0
                if (
                    abs(dx - p.center_mm[0]) < half + self.dot_radius_mm
                    and abs(dy - p.center_mm[1]) < half + self.dot_radius_mm
                ):
                    raise ValueError("reference dot overlaps a marker")

    def marker_ids(self) -> list[int]:
        return [p.marker.id for p in self.markers]

    def faces(self) -> list["SceneFace"]:
        if self._faces is None:
            albedo = rasterize_board_albedo(self)
            self._faces = [
                SceneFace(
                    origin=np.zeros(3),
                    eu=np.array([1.0, 0.0, 0.0]),
                    ev=np.array([0.0, 1.0, 0.0]),
                    normal=np.array([0.0, 0.0, -1.0]),
                    width_mm=self.extent_mm[0],
                    height_mm=self.extent_mm[1],
                    albedo=albedo,
                    ppm=self.texture_ppm,
                )
            ]
        return self._faces


@dataclass(frozen=True)
class SceneFace:
    """One planar facet: a local frame plus a rasterized albedo texture.

    Face coordinates (u, v) run over [-w/2, w/2] x [-h/2, h/2] mm; texture
    pixel (0, 0) is centered at (-w/2 + 0.5/ppm, -h/2 + 0.5/ppm).
    """

    origin: np.ndarray
    eu: np.ndarray
    ev: np.ndarray
    normal: np.ndarray
    width_mm: float
    height_mm: float
    albedo: Image
    ppm: float

    def point_at(self, u, v) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return (
            self.origin
            + u[..., None] * self.eu
            + v[..., None] * self.ev
        )

    def texture_px(self, u, v):
        """Face mm -> texture pixel coordinates."""
        x = (np.asarray(u, dtype=float) + self.width_mm / 2.0) * self.ppm - 0.5
        y = (np.asarray(v, dtype=float) + self.height_mm / 2.0) * self.ppm - 0.5
        return x, y

    def mm_at(self, x_px, y_px):
        u = (np.asarray(x_px, dtype=float) + 0.5) / self.ppm - self.width_mm / 2.0
        v = (np.asarray(y_px, dtype=float) + 0.5) / self.ppm - self.height_mm / 2.0
        return u, v


@dataclass
class PrismTarget:
    """Regular hexagonal prism, axis along object-frame y, one marker per face.

    Face k's outward normal is the -z axis rotated by k*60 degrees about y,
    so face 0 faces the device when the prism pose is the identity rotation.
    """

    face_width_mm: float = 20.0
    height_mm: float = 20.0
    marker_ids: tuple[int, ...] = (10, 11, 12, 13, 14, 15)
    marker_side_mm: float = 13.0
    texture_ppm: float = DEFAULT_TEXTURE_PPM
    _faces: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.marker_ids) != 6 or len(set(self.marker_ids)) != 6:
            raise ValueError("prism needs six distinct marker ids")
        if self.marker_side_mm > min(self.face_width_mm, self.height_mm):
            raise ValueError("marker does not fit on a face")

    @property
    def apothem_mm(self) -> float:
        return self.face_width_mm * math.sqrt(3.0) / 2.0

    def face_frame(self, k: int):
        """(origin, eu, ev, normal) of face k in the prism frame."""
        theta = math.radians(60.0 * k)
        c, s = math.cos(theta), math.sin(theta)
        normal = np.array([-s, 0.0, -c])
        eu = np.array([c, 0.0, -s])
        ev = np.array([0.0, 1.0, 0.0])
        origin = self.apothem_mm * normal
        return origin, eu, ev, normal

    def marker_ids_list(self) -> list[int]:
        return list(self.marker_ids)

    def face_of_marker(self, marker_id: int) -> int:
        try:
            return self.marker_ids.index(marker_id)
        except ValueError:
            raise UnknownMarkerId(f"marker {marker_id} is not on the prism") from None

    def faces(self) -> list[SceneFace]:
        if self._faces is None:
            faces = []
            for k in range(6):
                origin, eu, ev, normal = self.face_frame(k)
                marker = FiducialMarker(self.marker_ids[k], self.marker_side_mm)
                albedo = rasterize_face_albedo(
                    self.face_width_mm, self.height_mm,
                    [MarkerPlacement(marker, (0.0, 0.0))], [], 0.0, self.texture_ppm,
                )
                faces.append(
                    SceneFace(origin, eu, ev, normal,
                              self.face_width_mm, self.height_mm,
                              albedo, self.texture_ppm)
                )
            self._faces = faces
        return self._faces


def rasterize_face_albedo(
    width_mm: float,
    height_mm: float,
    markers: list[MarkerPlacement],
    dots: list[tuple[float, float]],
    dot_radius_mm: float,
    ppm: float,
) -> Image:
    """Draw markers and dots on a white face, 4x supersampled for soft edges.

    Rasterizes in row strips to bound the supersampled working set.
    """
    ss = 4
    w_px = int(round(width_mm * ppm))
    h_px = int(round(height_mm * ppm))
    xs = (np.arange(w_px * ss) + 0.5) / (ppm * ss) - width_mm / 2.0
    out = np.empty((h_px, w_px))
    strip = 64

    for y0 in range(0, h_px, strip):
        y1 = min(y0 + strip, h_px)
        ys = (np.arange(y0 * ss, y1 * ss) + 0.5) / (ppm * ss) - height_mm / 2.0
        gx, gy = np.meshgrid(xs, ys)
        canvas = np.full(gx.shape, ALBEDO_WHITE)

        for placement in markers:
            marker = placement.marker
            ca, sa = math.cos(placement.angle_rad), math.sin(placement.angle_rad)
            dx = gx - placement.center_mm[0]
            dy = gy - placement.center_mm[1]
            lx = ca * dx + sa * dy
            ly = -sa * dx + ca * dy
            cell = marker.side_mm / MARKER_CELLS
            col = np.floor(lx / cell + MARKER_CELLS / 2.0).astype(int)
            row = np.floor(ly / cell + MARKER_CELLS / 2.0).astype(int)
            inside = (col >= 0) & (col < MARKER_CELLS) & (row >= 0) & (row < MARKER_CELLS)
            values = marker.bits[row.clip(0, 5), col.clip(0, 5)]
            canvas = np.where(
                inside, np.where(values > 0, ALBEDO_WHITE, ALBEDO_BLACK), canvas
            )

        for cx, cy in dots:
            r2 = (gx - cx) ** 2 + (gy - cy) ** 2
            canvas = np.where(r2 <= dot_radius_mm * dot_radius_mm, ALBEDO_BLACK, canvas)

        out[y0:y1] = canvas.reshape(y1 - y0, ss, w_px, ss).mean(axis=(1, 3))
    return Image.from_array(out)


def rasterize_board_albedo(board: FiducialBoard) -> Image:
    return rasterize_face_albedo(
        board.extent_mm[0], board.extent_mm[1],
        board.markers, board.reference_dots,
        board.dot_radius_mm, board.texture_ppm,
    )


def marker_corners_3d(target, marker_id: int) -> np.ndarray:
    """Ordered (TL, TR, BR, BL) marker corners in the target's object frame, mm."""
    if isinstance(target, FiducialBoard):
        for placement in target.markers:
            if placement.marker.id == marker_id:
                ca = math.cos(placement.angle_rad)
                sa = math.sin(placement.angle_rad)
                local = placement.marker.local_corners()
                x = ca * local[:, 0] - sa * local[:, 1] + placement.center_mm[0]
                y = sa * local[:, 0] + ca * local[:, 1] + placement.center_mm[1]
                return np.stack([x, y, np.zeros(4)], axis=1)
        raise UnknownMarkerId(f"marker {marker_id} is not on the board")
    if isinstance(target, PrismTarget):
        k = target.face_of_marker(marker_id)
        origin, eu, ev, _ = target.face_frame(k)
        local = FiducialMarker(marker_id, target.marker_side_mm).local_corners()
        return origin + local[:, :1] * eu + local[:, 1:2] * ev
    raise TypeError(f"unsupported target type {type(target).__name__}")


def visible_faces(target, pose: Pose) -> list[int]:
    """Indices of faces whose outward normal points toward the device (strict)."""
    out = []
    for i, face in enumerate(target.faces()):
        if (pose.rotation @ face.normal)[2] < 0.0:
            out.append(i)
    return out


def zone_color(distance_mm: float) -> str:
    """Distance-dependent body color over the 70..250 mm working range."""
    if not (70.0 <= distance_mm <= 250.0):
        raise DistanceOutOfRange(f"distance {distance_mm:.4g} mm outside [70, 250]")
    if distance_mm < 130.0:
        return ZONE_BLUE
    if distance_mm < 190.0:
        return ZONE_GREEN
    return ZONE_YELLOW


@dataclass(frozen=True)
class Trajectory:
    """Keyframed rigid motion: linear in translation, spherical in rotation."""

    keyframes: tuple

    def __post_init__(self):
        frames = tuple(self.keyframes)
        if len(frames) < 2:
            raise ValueError("trajectory needs at least two keyframes")
        times = [t for t, _ in frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("keyframe times must be strictly increasing")
        object.__setattr__(self, "keyframes", frames)

    @property
    def t_start(self) -> float:
        return self.keyframes[0][0]

    @property
    def t_end(self) -> float:
        return self.keyframes[-1][0]


def sample_trajectory(traj: Trajectory, t: float) -> Pose:
    frames = traj.keyframes
    if t < frames[0][0] or t > frames[-1][0]:
        raise TimeOutOfRange(
            f"t={t:.4g} outside [{frames[0][0]:.4g}, {frames[-1][0]:.4g}]"
        )
    for (t0, p0), (t1, p1) in zip(frames, frames[1:]):
        if t <= t1:
            s = (t - t0) / (t1 - t0)
            translation = (1.0 - s) * p0.translation + s * p1.translation
            relative = p0.rotation.T @ p1.rotation
            step = axis_angle_from_rotation(relative)
            rotation = p0.rotation @ rotation_from_axis_angle(s * step)
            return Pose(rotation, translation)
    return frames[-1][1]


# --- default targets ---------------------------------------------------------

def evaluation_board() -> FiducialBoard:
    """One centered 13 mm marker with four reference dots at (+-15, +-15) mm."""
    return FiducialBoard(
        markers=[MarkerPlacement(FiducialMarker(0), (0.0, 0.0))],
        reference_dots=[(-15.0, -15.0), (15.0, -15.0), (15.0, 15.0), (-15.0, 15.0)],
        extent_mm=(50.0, 50.0),
    )


def calibration_board() -> FiducialBoard:
    """3x3 grid of 13 mm markers at an 18 mm pitch: 36 corners per view."""
    placements = []
    marker_id = 1
    for row in range(3):
        for col in range(3):
            placements.append(
                MarkerPlacement(
                    FiducialMarker(marker_id),
                    (18.0 * (col - 1), 18.0 * (row - 1)),
                )
            )
            marker_id += 1
    return FiducialBoard(markers=placements, reference_dots=[], extent_mm=(60.0, 60.0))


def hex_prism() -> PrismTarget:
    return PrismTarget()


# --- JSON loading ------------------------------------------------------------

def _board_from_dict(doc: dict) -> FiducialBoard:
    try:
        markers = [
            MarkerPlacement(
                FiducialMarker(int(m["id"]), float(m.get("side_mm", 13.0))),
                (float(m["center_mm"][0]), float(m["center_mm"][1])),
                float(m.get("angle_rad", 0.0)),
            )
            for m in doc["markers"]
        ]
        dots = [(float(d[0]), float(d[1])) for d in doc.get("reference_dots", [])]
        extent = (float(doc["extent_mm"][0]), float(doc["extent_mm"][1]))
    except (KeyError, TypeError, IndexError) as exc:
        raise SceneFormatError(f"bad board document: {exc}") from exc
    return FiducialBoard(
        markers=markers,
        reference_dots=dots,
        extent_mm=extent,
        dot_radius_mm=float(doc.get("dot_radius_mm", 2.0)),
    )


def _prism_from_dict(doc: dict) -> PrismTarget:
    try:
        return PrismTarget(
            face_width_mm=float(doc.get("face_width_mm", 20.0)),
            height_mm=float(doc.get("height_mm", 20.0)),
            marker_ids=tuple(int(i) for i in doc.get("marker_ids", (10, 11, 12, 13, 14, 15))),
            marker_side_mm=float(doc.get("marker_side_mm", 13.0)),
        )
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"bad prism document: {exc}") from exc


def load_target(doc: dict):
    kind = doc.get("type")
    if kind == "board":
        return _board_from_dict(doc)
    if kind == "prism":
        return _prism_from_dict(doc)
    raise SceneFormatError(f"unknown target type {kind!r}")


def load_scene(path) -> dict:
    """Load a scene document holding named targets.

    Schema: {"targets": {name: {"type": "board"|"prism", ...}, ...}}
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise SceneFormatError(f"cannot read scene file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"scene file {path} is not valid JSON: {exc}") from exc
    if "targets" not in doc or not isinstance(doc["targets"], dict):
        raise SceneFormatError("scene document must contain a 'targets' object")
    return {name: load_target(sub) for name, sub in doc["targets"].items()}


def default_scene_document() -> dict:
    """Document equivalent of the built-in targets, for writing example files."""
    return {
        "targets": {
            "calibration_board": {
                "type": "board",
                "extent_mm": [60.0, 60.0],
                "markers": [
                    {"id": 1 + r * 3 + c, "center_mm": [18.0 * (c - 1), 18.0 * (r - 1)]}
                    for r in range(3)
                    for c in range(3)
                ],
            },
            "evaluation_board": {
                "type": "board",
                "extent_mm": [50.0, 50.0],
                "markers": [{"id": 0, "center_mm": [0.0, 0.0]}],
                "reference_dots": [[-15.0, -15.0], [15.0, -15.0], [15.0, 15.0], [-15.0, 15.0]],
            },
            "prism": {"type": "prism", "face_width_mm": 20.0, "height_mm": 20.0},
        }
    }


def load_trajectory(path) -> Trajectory:
    """Load {"keyframes": [{"t": s, "translation": [mm x3], "axis_angle": [rad x3]}]}."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise SceneFormatError(f"cannot read trajectory file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"trajectory file {path} is not valid JSON: {exc}") from exc
    try:
        frames = tuple(
            (
                float(k["t"]),
                Pose(
                    rotation_from_axis_angle(k.get("axis_angle", [0.0, 0.0, 0.0])),
                    np.asarray(k["translation"], dtype=float),
                ),
            )
            for k in doc["keyframes"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"bad trajectory document: {exc}") from exc
    try:
        return Trajectory(frames)
    except ValueError as exc:
        raise SceneFormatError(str(exc)) from exc
