#!/usr/bin/env python3
"""
Differentiable Mesh Renderer
Perspective rasterization of textured triangle meshes into RGBA images, with an
approximate backward pass from pixel gradients to vertex gradients: each pixel
on a face may move one pixel left/right (up/down), taking its neighbour's color,
and the move direction that lowers the loss more decides the gradient.
"""

import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from mesh_core import Mesh, Viewpoint
from utils import ValidationError

logger = logging.getLogger(__name__)

EPS_NEAR = 1e-3
DEFAULT_FOV = 40.0
DEFAULT_DISTANCE = 4.0
DEFAULT_SIZE = 64
DEFAULT_SUPERSAMPLE = 4
DEFAULT_FACE_COLOR = (0.5, 0.5, 0.5)

# Barycentric slack for samples exactly on a shared edge.
_INSIDE_TOL = 1e-9
_MIN_SCREEN_AREA = 1e-12


@dataclass(frozen=True)
class Camera:
    """Look-at camera on a sphere of radius `viewpoint.distance` around `target`; up is +y."""
    viewpoint: Viewpoint
    fov: float = DEFAULT_FOV
    image_size: int = DEFAULT_SIZE
    target: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.fov < 180.0:
            raise ValidationError(f"Camera field of view must be in (0, 180), got {self.fov}")
        if int(self.image_size) != self.image_size or self.image_size < 8:
            raise ValidationError(f"Camera image size must be an integer >= 8, got {self.image_size}")

    @property
    def focal(self) -> float:
        return 0.5 * self.image_size / np.tan(np.radians(self.fov) / 2.0)

    def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(eye, right, up, forward) in world coordinates."""
        az = np.radians(self.viewpoint.azimuth)
        el = np.radians(self.viewpoint.elevation)
        direction = np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        eye = np.asarray(self.target, dtype=np.float64) + self.viewpoint.distance * direction
        forward = -direction
        # Closed form of normalize(forward x +y); stays defined at the poles.
        right = np.array([np.cos(az), 0.0, -np.sin(az)])
        up = np.cross(right, forward)
        return eye, right, up, forward


@dataclass(frozen=True)
class Projection:
    xy: np.ndarray
    depth: np.ndarray
    jacobian: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True, eq=False)
class RenderOutput:
    """Rendered view plus the buffers the backward pass needs."""
    color: np.ndarray
    alpha: np.ndarray
    face_id: np.ndarray
    bary: np.ndarray
    depth: np.ndarray
    background: np.ndarray
    faces: np.ndarray
    n_vertices: int
    camera: Camera
    culled: np.ndarray

    @property
    def size(self) -> int:
        return self.alpha.shape[0]

    def rgba(self) -> np.ndarray:
        return np.concatenate([self.color, self.alpha[..., None]], axis=-1)


def project_vertices(vertices: np.ndarray, camera: Camera) -> Projection:
    """
    Perspective projection to pixel coordinates ((0, 0) = top-left corner).

    Returns pixel xy (V, 2), view-axis depth (V,), the analytic Jacobian of
    xy with respect to world position (V, 2, 3), and which vertices lie in
    front of the near plane.
    """
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(vertices)):
        raise ValidationError("Cannot project non-finite vertices")
    eye, right, up, forward = camera.basis()
    rel = vertices - eye
    xc, yc, zc = rel @ right, rel @ up, rel @ forward
    valid = zc > EPS_NEAR
    safe_z = np.where(valid, zc, 1.0)

    f = camera.focal
    half = 0.5 * camera.image_size
    xy = np.stack([half + f * xc / safe_z, half - f * yc / safe_z], axis=1)

    inv_z2 = 1.0 / safe_z ** 2
    jac_x = f * (right[None, :] * safe_z[:, None] - xc[:, None] * forward[None, :]) * inv_z2[:, None]
    jac_y = -f * (up[None, :] * safe_z[:, None] - yc[:, None] * forward[None, :]) * inv_z2[:, None]
    jacobian = np.stack([jac_x, jac_y], axis=1)
    jacobian[~valid] = 0.0
    return Projection(xy=xy, depth=zc, jacobian=jacobian, valid=valid)


def _sample_faces(tri_xy: np.ndarray, grid: int, scale: int):
    """
    Every (face, sample) pair whose sample center lies inside the face.

    Samples sit at (k + 0.5) / scale in pixel units, k in [0, grid).

    Returns:
        (face positions, sample x, sample y, barycentrics (n, 3))
    """
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))
    if len(tri_xy) == 0:
        return empty
    pts = tri_xy * scale - 0.5
    a, b, c = pts[:, 0], pts[:, 1], pts[:, 2]
    denom = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])

    lo = np.maximum(np.ceil(pts.min(axis=1)), 0).astype(np.int64)
    hi = np.minimum(np.floor(pts.max(axis=1)), grid - 1).astype(np.int64)
    nx = hi[:, 0] - lo[:, 0] + 1
    ny = hi[:, 1] - lo[:, 1] + 1
    counts = np.where((nx > 0) & (ny > 0) & (np.abs(denom) > _MIN_SCREEN_AREA), nx * ny, 0)
    total = int(counts.sum())
    if total == 0:
        return empty

    fidx = np.repeat(np.arange(len(pts)), counts)
    start = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(start, counts)
    row_len = nx[fidx]
    sx = lo[fidx, 0] + local % row_len
    sy = lo[fidx, 1] + local // row_len

    ax, ay = a[fidx, 0], a[fidx, 1]
    px, py = sx - ax, sy - ay
    ex1, ey1 = b[fidx, 0] - ax, b[fidx, 1] - ay
    ex2, ey2 = c[fidx, 0] - ax, c[fidx, 1] - ay
    d = denom[fidx]
    w_b = (px * ey2 - py * ex2) / d
    w_c = (ex1 * py - ey1 * px) / d
    w_a = 1.0 - w_b - w_c
    inside = (w_a >= -_INSIDE_TOL) & (w_b >= -_INSIDE_TOL) & (w_c >= -_INSIDE_TOL)
    bary = np.stack([w_a, w_b, w_c], axis=1)
    return fidx[inside], sx[inside], sy[inside], bary[inside]


def _texel_lookup(mesh: Mesh, face_id: np.ndarray, bary: np.ndarray):
    """Bilinear texel indices and weights for the pixels that hit a face."""
    size = mesh.texture_size
    faces = face_id
    uv = np.einsum('nk,nkc->nc', bary, mesh.face_uv[faces])
    coords = np.clip(uv * size - 0.5, 0.0, size - 1.0)
    base = np.clip(np.floor(coords), 0, size - 2).astype(np.int64)
    frac = coords - base
    side = mesh.face_side[faces]
    return side, base, frac


def _bilinear_terms(base: np.ndarray, frac: np.ndarray):
    fu, fv = frac[:, 0], frac[:, 1]
    i0, j0 = base[:, 0], base[:, 1]
    return (
        (i0, j0, (1 - fu) * (1 - fv)),
        (i0 + 1, j0, fu * (1 - fv)),
        (i0, j0 + 1, (1 - fu) * fv),
        (i0 + 1, j0 + 1, fu * fv),
    )


def rasterize(mesh: Mesh, camera: Camera, background: Sequence[float] = (0.0, 0.0, 0.0),
              supersample: int = DEFAULT_SUPERSAMPLE,
              face_color: Sequence[float] = DEFAULT_FACE_COLOR) -> RenderOutput:
    """
    Z-buffered rasterization at pixel centers plus supersampled coverage alpha.

    face_id / bary / depth / color come from the front-most face at each pixel
    center (ties go to the lower face index). Alpha is the fraction of the
    supersample x supersample sub-pixel grid covered by any face.
    """
    size = int(camera.image_size)
    background = np.asarray(background, dtype=np.float64).reshape(3)
    if mesh.textures is not None and mesh.texture_size < 2:
        raise ValidationError("Texture grids must be at least 2 x 2")

    color = np.broadcast_to(background, (size, size, 3)).copy()
    alpha = np.zeros((size, size))
    face_id = np.full((size, size), -1, dtype=np.int64)
    bary = np.zeros((size, size, 3))
    depth = np.full((size, size), np.inf)

    proj = project_vertices(mesh.vertices, camera)
    faces = mesh.faces
    keep = np.all(proj.valid[faces], axis=1) if len(faces) else np.zeros(0, bool)
    culled = np.flatnonzero(~keep)
    if len(culled):
        logger.debug(f"Culled {len(culled)} faces behind the near plane")
    kept = np.flatnonzero(keep)
    tri_xy = proj.xy[faces[kept]]
    tri_z = proj.depth[faces[kept]]

    fpos, sx, sy, w = _sample_faces(tri_xy, size, 1)
    if len(fpos):
        z = np.einsum('nk,nk->n', w, tri_z[fpos])
        fid = kept[fpos]
        pix = sy * size + sx
        order = np.lexsort((fid, z, pix))
        pix_sorted = pix[order]
        first = order[np.concatenate([[True], pix_sorted[1:] != pix_sorted[:-1]])]
        ys, xs = sy[first], sx[first]
        face_id[ys, xs] = fid[first]
        bary[ys, xs] = w[first]
        depth[ys, xs] = z[first]

        hit_faces = fid[first]
        if mesh.textures is not None:
            textures = np.asarray(mesh.textures, dtype=np.float64)
            side, base, frac = _texel_lookup(mesh, hit_faces, w[first])
            sampled = np.zeros((len(first), 3))
            for ti, tj, weight in _bilinear_terms(base, frac):
                sampled += weight[:, None] * textures[side, ti, tj]
            color[ys, xs] = sampled
        elif mesh.face_colors is not None:
            color[ys, xs] = np.asarray(mesh.face_colors, dtype=np.float64)[hit_faces]
        else:
            color[ys, xs] = np.asarray(face_color, dtype=np.float64)

    s = int(supersample)
    _, ssx, ssy, _ = _sample_faces(tri_xy, size * s, s)
    if len(ssx):
        covered = np.zeros((size * s, size * s), dtype=bool)
        covered[ssy, ssx] = True
        alpha = covered.reshape(size, s, size, s).mean(axis=(1, 3))

    return RenderOutput(color=color, alpha=alpha, face_id=face_id, bary=bary, depth=depth,
                        background=background, faces=faces, n_vertices=len(mesh.vertices),
                        camera=camera, culled=culled)


def _neighbours(values: np.ndarray, fill: np.ndarray, axis: int):
    """(previous, next) neighbour arrays along `axis` with `fill` past the border."""
    prev = np.empty_like(values)
    nxt = np.empty_like(values)
    if axis == 1:
        prev[:, 1:], prev[:, :1] = values[:, :-1], fill
        nxt[:, :-1], nxt[:, -1:] = values[:, 1:], fill
    else:
        prev[1:], prev[:1] = values[:-1], fill
        nxt[:-1], nxt[-1:] = values[1:], fill
    return prev, nxt


def select_direction(g_right: np.ndarray, g_left: np.ndarray) -> np.ndarray:
    """
    Pick the per-pixel position gradient from the two one-sided candidates.

    Zero when both moves raise the loss; otherwise the side whose move lowers
    it more, with ties going right.
    """
    d_right = -g_right
    d_left = g_left
    return np.where(np.maximum(d_right, d_left) < 0.0, 0.0,
                    np.where(d_right < d_left, g_left, g_right))


def pixel_position_gradients(out: RenderOutput, grad_color: np.ndarray,
                             grad_alpha: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel dL/dx and dL/dy (zero off the mesh)."""
    size = out.size
    grad_color = np.asarray(grad_color, dtype=np.float64)
    grad_alpha = np.asarray(grad_alpha, dtype=np.float64)
    if grad_color.shape != (size, size, 3) or grad_alpha.shape != (size, size):
        raise ValidationError(f"Gradient buffers {grad_color.shape}/{grad_alpha.shape} do not match "
                              f"a {size}x{size} render")
    p = out.rgba()
    g = np.concatenate([grad_color, grad_alpha[..., None]], axis=-1)
    p_fill = np.append(out.background, 0.0)
    g_fill = np.zeros(4)
    on_face = out.face_id >= 0

    gradients = []
    for axis in (1, 0):
        p_prev, p_next = _neighbours(p, p_fill, axis)
        g_prev, g_next = _neighbours(g, g_fill, axis)
        g_right = np.sum(g * (p_prev - p) + g_next * (p - p_next), axis=-1)
        g_left = np.sum(g * (p - p_next) + g_prev * (p_prev - p), axis=-1)
        gradients.append(np.where(on_face, select_direction(g_right, g_left), 0.0))
    return gradients[0], gradients[1]


def backward_pixels_to_projected(out: RenderOutput, grad_color: np.ndarray,
                                 grad_alpha: np.ndarray) -> np.ndarray:
    """
    Vertex gradients in pixel space (V, 2) from image-space gradients.

    Each on-face pixel's position gradient is spread over its face's three
    projected vertices with the pixel's barycentric weights.
    """
    gx, gy = pixel_position_gradients(out, grad_color, grad_alpha)
    grad_2d = np.zeros((out.n_vertices, 2))
    ys, xs = np.nonzero(out.face_id >= 0)
    if len(ys) == 0:
        return grad_2d
    corner_ids = out.faces[out.face_id[ys, xs]]
    w = out.bary[ys, xs]
    contrib = w[:, :, None] * np.stack([gx[ys, xs], gy[ys, xs]], axis=1)[:, None, :]
    np.add.at(grad_2d, corner_ids.reshape(-1), contrib.reshape(-1, 2))
    return grad_2d


def backward_projected_to_vertices(grad_2d: np.ndarray, camera: Camera, vertices: np.ndarray) -> np.ndarray:
    """World-space vertex gradients: J^T grad_2d per vertex."""
    proj = project_vertices(vertices, camera)
    grad_3d = np.einsum('vk,vkj->vj', np.asarray(grad_2d, dtype=np.float64), proj.jacobian)
    grad_3d[~proj.valid] = 0.0
    return grad_3d


def backward_texture(out: RenderOutput, grad_color: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Adjoint of bilinear texture sampling; texels never sampled get zero."""
    if mesh.textures is None:
        raise ValidationError(f"Mesh '{mesh.name}' has no textures")
    grad_tex = np.zeros(np.shape(mesh.textures))
    ys, xs = np.nonzero(out.face_id >= 0)
    if len(ys) == 0:
        return grad_tex
    side, base, frac = _texel_lookup(mesh, out.face_id[ys, xs], out.bary[ys, xs])
    g = np.asarray(grad_color, dtype=np.float64)[ys, xs]
    for ti, tj, weight in _bilinear_terms(base, frac):
        np.add.at(grad_tex, (side, ti, tj), weight[:, None] * g)
    return grad_tex


class MeshRenderer:
    """Renderer settings bundled with the forward/backward pair the trainer calls."""

    def __init__(self, image_size: int = DEFAULT_SIZE, fov: float = DEFAULT_FOV,
                 background: Sequence[float] = (0.0, 0.0, 0.0), supersample: int = DEFAULT_SUPERSAMPLE):
        self.image_size = int(image_size)
        self.fov = float(fov)
        self.background = tuple(float(c) for c in background)
        self.supersample = int(supersample)
        self.logger = logging.getLogger(__name__)

    def camera(self, viewpoint: Viewpoint) -> Camera:
        return Camera(viewpoint, fov=self.fov, image_size=self.image_size)

    def render(self, mesh: Mesh, viewpoint: Viewpoint) -> RenderOutput:
        return rasterize(mesh, self.camera(viewpoint), self.background, self.supersample)

    def backward(self, mesh: Mesh, out: RenderOutput, grad_color: np.ndarray,
                 grad_alpha: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """(vertex gradients (V, 3), texture gradients or None)."""
        grad_2d = backward_pixels_to_projected(out, grad_color, grad_alpha)
        grad_vertices = backward_projected_to_vertices(grad_2d, out.camera, mesh.vertices)
        grad_textures = backward_texture(out, grad_color, mesh) if mesh.textures is not None else None
        return grad_vertices, grad_textures


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def save_color_png(out: RenderOutput, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(_to_uint8(out.color)).save(path)


def save_alpha_png(out: RenderOutput, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(_to_uint8(out.alpha)).save(path)


def save_rgba_png(out: RenderOutput, path: str):
    """Color in RGB, silhouette in the alpha channel (the dataset view format)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(_to_uint8(out.rgba())).save(path)
