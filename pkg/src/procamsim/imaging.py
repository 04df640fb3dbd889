"""Rendering of captured IR frames, projected visible light, and external views.

Capture and projection share one pinhole model (single image plane), so the
device-to-face map used to render a capture is, by construction, the exact
inverse of the face-to-device map used to project. All warps run on the full
pixel grid with bilinear sampling; defocus is a uniform per-frame disk blur
evaluated at the target origin's distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import optics
from .errors import DimensionMismatch, EmptyRegion, IoError, NoVisibleSurface
from .geometry import Intrinsics, Pose, project, project_many, undistort_many
from .image import Image
from .optics import EtlModel, blur_radius, convolve, intrinsics_at_power, make_disk_psf
from .scene import SceneFace, visible_faces

AMBIENT_FLOOR = 0.02
DEFAULT_SENSOR_SIGMA = 0.003
CAPTURE_SUPERSAMPLE = 2


@dataclass(frozen=True)
class ExternalCamera:
    """Evaluation camera observing the scene from the side.

    ``device_pose`` expresses the device frame in the external camera frame.
    """

    intrinsics: Intrinsics
    device_pose: Pose
    width: int = 800
    height: int = 600


def default_external_camera() -> ExternalCamera:
    """800x600 camera 350 mm from the working-volume center, 45 deg off-axis."""
    target = np.array([0.0, 0.0, 160.0])
    theta = math.radians(45.0)
    position = target + 350.0 * np.array([math.sin(theta), 0.0, -math.cos(theta)])
    # Look-at: camera +z toward the target, y kept downward.
    z_axis = target - position
    z_axis = z_axis / np.linalg.norm(z_axis)
    y_axis = np.array([0.0, 1.0, 0.0])
    x_axis = np.cross(y_axis, z_axis)
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    r_cam_to_device = np.stack([x_axis, y_axis, z_axis], axis=1)
    rotation = r_cam_to_device.T
    translation = -rotation @ position
    return ExternalCamera(
        intrinsics=Intrinsics(900.0, 900.0, 400.0, 300.0),
        device_pose=Pose(rotation, translation),
    )


# --- warp machinery ----------------------------------------------------------

def _undistorted_grid(
    intr: Intrinsics, width: int, height: int, supersample: int = 1
) -> np.ndarray:
    """Undistorted normalized coordinates of every (sub)pixel sample.

    With ``supersample`` = n the raster is sampled n times per pixel per
    axis, centered inside each pixel footprint, for later box averaging.
    """
    xs = (np.arange(width * supersample) + 0.5) / supersample - 0.5
    ys = (np.arange(height * supersample) + 0.5) / supersample - 0.5
    u = (xs - intr.cx) / intr.fx
    v = (ys - intr.cy) / intr.fy
    gu, gv = np.meshgrid(u, v)
    pn = np.stack([gu, gv], axis=-1)
    if intr.k1 == 0.0 and intr.k2 == 0.0:
        return pn
    return undistort_many(intr, pn, iterations=12)


def face_ray_homography(pose: Pose, face: SceneFace) -> np.ndarray:
    """3x3 map from face plane (u mm, v mm, 1) to normalized camera rays."""
    r = pose.rotation
    return np.stack(
        [r @ face.eu, r @ face.ev, r @ face.origin + pose.translation], axis=1
    )


def bilinear_sample(plane: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample an (h, w) array at float coordinates with edge clamping."""
    return bilinear_sample_multi(plane[:, :, None], x, y)[..., 0]


def bilinear_sample_multi(tex: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample an (h, w, c) array at float coordinates; indices computed once."""
    h, w = tex.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = tex[y0, x0] * (1.0 - fx) + tex[y0, x1] * fx
    bottom = tex[y1, x0] * (1.0 - fx) + tex[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def _warp_faces_to_raster(
    faces: list[SceneFace],
    face_indices: list[int],
    textures: list[np.ndarray],
    pose: Pose,
    grid: np.ndarray,
    background: float,
    channels: int,
) -> np.ndarray:
    """Inverse-warp face textures onto a raster described by its ray grid.

    ``textures[i]`` is an (th, tw) or (th, tw, channels) array aligned with
    face ``faces[face_indices[i]]``'s texture frame.
    """
    h, w = grid.shape[:2]
    canvas = np.full((h, w, channels), background)
    for idx, tex in zip(face_indices, textures):
        face = faces[idx]
        m = np.linalg.inv(face_ray_homography(pose, face))
        a = m[0, 0] * grid[..., 0] + m[0, 1] * grid[..., 1] + m[0, 2]
        b = m[1, 0] * grid[..., 0] + m[1, 1] * grid[..., 1] + m[1, 2]
        c = m[2, 0] * grid[..., 0] + m[2, 1] * grid[..., 1] + m[2, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            fu = np.where(np.abs(c) > 1e-12, a / c, np.inf)
            fv = np.where(np.abs(c) > 1e-12, b / c, np.inf)
        # Exact inverse pins the scale: the hit point's camera depth is 1/c,
        # so c > 0 selects plane points in front of the camera.
        mask = (
            (c > 1e-12)
            & (np.abs(fu) <= face.width_mm / 2.0)
            & (np.abs(fv) <= face.height_mm / 2.0)
        )
        if not mask.any():
            continue
        tx, ty = face.texture_px(fu[mask], fv[mask])
        if tex.ndim == 2:
            tex = tex[:, :, None]
        samples = bilinear_sample_multi(tex, tx, ty)
        if samples.shape[-1] == 1 and channels == 3:
            samples = np.repeat(samples, 3, axis=-1)
        canvas[mask] = samples
    return canvas


def render_capture(
    target,
    scene_pose: Pose,
    etl: EtlModel,
    base_intr: Intrinsics,
    power: float,
    device_wh: tuple[int, int],
    noise_sigma: float = DEFAULT_SENSOR_SIGMA,
    seed: int = 0,
    defocus_blur_px: float | None = None,
) -> Image:
    """IR capture: ambient floor plus albedo under IR light, defocused, noisy.

    The capture never sees projected visible light. Pixel integration is
    modeled by a fixed sub-pixel Gaussian before the defocus disk;
    ``defocus_blur_px`` overrides the focus-law blur radius when given.
    """
    w, h = device_wh
    intr = intrinsics_at_power(etl, base_intr, power)
    faces = target.faces()
    vis = visible_faces(target, scene_pose)
    if not vis:
        raise NoVisibleSurface("no face oriented toward the device")
    ss = CAPTURE_SUPERSAMPLE
    grid = _undistorted_grid(intr, w, h, supersample=ss)
    canvas = _warp_faces_to_raster(
        faces, vis, [faces[i].albedo.plane() for i in vis],
        scene_pose, grid, 0.0, 1,
    )
    # Pixel integration: box-average the subsamples inside each pixel.
    canvas = canvas.reshape(h, ss, w, ss, 1).mean(axis=(1, 3))
    canvas = canvas + AMBIENT_FLOOR
    img = Image.from_array(canvas)
    if defocus_blur_px is None:
        r = blur_radius(etl, scene_pose.translation[2], power, optics.IR)
    else:
        r = defocus_blur_px
    img = convolve(img, make_disk_psf(r))
    if noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1D]))
        noisy = img.data + rng.normal(0.0, noise_sigma, img.data.shape)
        img = Image.from_array(noisy)
    return img


def render_device_image(
    target,
    pose: Pose,
    intr: Intrinsics,
    textures: dict[int, Image],
    device_wh: tuple[int, int],
) -> Image:
    """Forward-render per-face textures into the device raster (black background).

    This is the projection-content path: ``pose`` and ``intr`` are whatever
    the controller believes, not necessarily the simulator truth.
    """
    w, h = device_wh
    faces = target.faces()
    vis = [i for i in visible_faces(target, pose) if i in textures]
    grid = _undistorted_grid(intr, w, h)
    canvas = _warp_faces_to_raster(
        faces, vis, [textures[i].data for i in vis], pose, grid, 0.0, 3,
    )
    return Image.from_array(canvas)


def _face_mm_per_device_px(face: SceneFace, pose: Pose, intr: Intrinsics) -> float:
    """Local scale at the face center: face mm per device pixel."""
    eps = 0.1
    center = face.point_at(0.0, 0.0)
    shifted = face.point_at(eps, 0.0)
    p0 = project(intr, pose, center)
    p1 = project(intr, pose, shifted)
    px_per_mm = np.linalg.norm(p1 - p0) / eps
    if px_per_mm <= 0:
        return 0.0
    return 1.0 / px_per_mm


def render_projection_on_surface(
    device_img: Image,
    target,
    scene_pose: Pose,
    etl: EtlModel,
    base_intr: Intrinsics,
    power: float,
) -> dict[int, Image]:
    """Irradiance landing on each visible face from the projected device image.

    Uses the same intrinsics as capture (shared image plane); the visible
    channel's defocus is applied in face-texture space, scaled by the face's
    mm-per-device-pixel factor.
    """
    intr = intrinsics_at_power(etl, base_intr, power)
    faces = target.faces()
    vis = visible_faces(target, scene_pose)
    if not vis:
        raise NoVisibleSurface("no face oriented toward the device")
    r_dev = blur_radius(etl, scene_pose.translation[2], power, optics.VISIBLE)
    out: dict[int, Image] = {}
    for idx in vis:
        face = faces[idx]
        th = face.albedo.height
        tw = face.albedo.width
        ty, tx = np.meshgrid(np.arange(th), np.arange(tw), indexing="ij")
        fu, fv = face.mm_at(tx, ty)
        pts = face.point_at(fu.ravel(), fv.ravel())
        px, valid = project_many(intr, scene_pose, pts)
        irr = np.zeros((th * tw, 3))
        inside = (
            valid
            & (px[:, 0] >= 0.0) & (px[:, 0] <= device_img.width - 1.0)
            & (px[:, 1] >= 0.0) & (px[:, 1] <= device_img.height - 1.0)
        )
        if inside.any():
            samples = bilinear_sample_multi(device_img.data, px[inside, 0], px[inside, 1])
            if samples.shape[-1] == 1:
                samples = np.repeat(samples, 3, axis=-1)
            irr[inside] = samples
        img = Image.from_array(irr.reshape(th, tw, 3))
        r_tex = r_dev * _face_mm_per_device_px(face, scene_pose, intr) * face.ppm
        out[idx] = convolve(img, make_disk_psf(r_tex))
    return out


def render_external(
    ext: ExternalCamera,
    target,
    scene_pose: Pose,
    irradiance: dict[int, Image] | None,
    ambient: float,
) -> Image:
    """Composite albedo under ambient light with projected irradiance."""
    pose_ext = ext.device_pose.compose(scene_pose)
    faces = target.faces()
    vis = visible_faces(target, pose_ext)
    grid = _undistorted_grid(ext.intrinsics, ext.width, ext.height)
    textures = []
    for idx in vis:
        albedo = faces[idx].albedo.data * ambient
        composite = np.repeat(albedo, 3, axis=2)
        if irradiance and idx in irradiance:
            composite = composite + irradiance[idx].data
        textures.append(np.clip(composite, 0.0, 1.0))
    canvas = _warp_faces_to_raster(faces, vis, textures, pose_ext, grid, 0.0, 3)
    return Image.from_array(canvas)


# --- metrics ------------------------------------------------------------------

def centroid(img: Image, region: tuple[int, int, int, int], threshold: float) -> np.ndarray:
    """Intensity-weighted centroid of above-threshold pixels in a region.

    ``region`` is (x0, y0, x1, y1), half-open, in pixel coordinates.
    """
    x0, y0, x1, y1 = region
    patch = img.gray()[max(y0, 0):y1, max(x0, 0):x1]
    if patch.size == 0:
        raise EmptyRegion("region is empty")
    weights = patch - threshold
    weights[weights < 0] = 0.0
    total = weights.sum()
    if total <= 0:
        raise EmptyRegion("no pixel above threshold in region")
    ys, xs = np.mgrid[max(y0, 0):y1, max(x0, 0):x1]
    return np.array([(weights * xs).sum() / total, (weights * ys).sum() / total])


def psnr(a: Image, b: Image) -> float:
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels):
        raise DimensionMismatch(
            f"{a.width}x{a.height}x{a.channels} vs {b.width}x{b.height}x{b.channels}"
        )
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def checker_pattern(
    width: int, height: int, cell: int = 24, low: float = 0.35, high: float = 0.65
) -> Image:
    """Standard checkerboard test pattern.

    Defaults keep the levels mid-gray: precompensated content overshoots its
    source contrast, and a full-contrast pattern would clip against the
    projector's [0, 1] range, destroying the correction being measured.
    """
    ys, xs = np.mgrid[0:height, 0:width]
    cells = (((xs // cell) + (ys // cell)) % 2).astype(float)
    return Image.from_array(low + (high - low) * cells)


# --- PPM / PGM I/O -----------------------------------------------------------

def write_image(img: Image, path) -> None:
    """Write binary PGM (1 channel) or PPM (3 channels), 8-bit."""
    data = np.round(img.data * 255.0).astype(np.uint8)
    magic = b"P5" if img.channels == 1 else b"P6"
    try:
        with open(path, "wb") as fh:
            fh.write(magic + b"\n%d %d\n255\n" % (img.width, img.height))
            fh.write(data.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write image {path}: {exc}") from exc


def read_image(path) -> Image:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read image {path}: {exc}") from exc
    fields = []
    pos = 0
    while len(fields) < 4:
        # Header tokens are whitespace-separated; '#' starts a comment.
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic, width, height, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise IoError(f"unsupported image format in {path}")
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    data = np.frombuffer(raw[pos:pos + expected], dtype=np.uint8)
    if data.size != expected:
        raise IoError(f"truncated image data in {path}")
    return Image.from_array(data.reshape(height, width, channels) / 255.0)
