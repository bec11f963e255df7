#!/usr/bin/env python3
"""
Mesh Core
Triangle meshes, the deformable cube template, symmetry enforcement and the
geometric primitives (normals, enclosed volume) used by losses and metrics.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from utils import MeshError, ValidationError

logger = logging.getLogger(__name__)

EPS_AREA = 1e-12
DEFAULT_GRID = 16
AXES = {'x': 0, 'y': 1, 'z': 2}

# Cube sides as (outward normal, u direction, v direction) with u x v = normal.
CUBE_SIDES = (
    ((1, 0, 0), (0, 1, 0), (0, 0, 1)),
    ((-1, 0, 0), (0, 0, 1), (0, 1, 0)),
    ((0, 1, 0), (0, 0, 1), (1, 0, 0)),
    ((0, -1, 0), (1, 0, 0), (0, 0, 1)),
    ((0, 0, 1), (1, 0, 0), (0, 1, 0)),
    ((0, 0, -1), (0, 1, 0), (1, 0, 0)),
)


@dataclass(frozen=True)
class Viewpoint:
    """Camera pose on a sphere around the origin (degrees, world units)."""
    azimuth: float
    elevation: float
    distance: float

    def __post_init__(self):
        if not np.isfinite(self.distance) or self.distance <= 0:
            raise ValidationError(f"Viewpoint distance must be > 0, got {self.distance}")
        if not np.isfinite(self.elevation) or not -90.0 <= self.elevation <= 90.0:
            raise ValidationError(f"Viewpoint elevation must be in [-90, 90], got {self.elevation}")
        if not np.isfinite(self.azimuth):
            raise ValidationError(f"Viewpoint azimuth must be finite, got {self.azimuth}")
        object.__setattr__(self, 'azimuth', float(self.azimuth) % 360.0)
        object.__setattr__(self, 'elevation', float(self.elevation))
        object.__setattr__(self, 'distance', float(self.distance))

    def as_vector(self) -> np.ndarray:
        """(elevation, azimuth, distance), the order the discriminator consumes."""
        return np.array([self.elevation, self.azimuth, self.distance])

    def flipped(self) -> 'Viewpoint':
        """Viewpoint of the horizontally mirrored image."""
        return Viewpoint((360.0 - self.azimuth) % 360.0, self.elevation, self.distance)

    def to_dict(self) -> Dict:
        return {'azimuth': self.azimuth, 'elevation': self.elevation, 'distance': self.distance}

    @classmethod
    def from_dict(cls, data: Dict) -> 'Viewpoint':
        try:
            return cls(float(data['azimuth']), float(data['elevation']), float(data['distance']))
        except (KeyError, TypeError) as e:
            raise ValidationError(f"Malformed viewpoint {data!r}: {e}")


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Triangle mesh, counter-clockwise winding seen from outside.

    `textures` holds 6 per-cube-side RGB grids (6, T, T, 3); `face_side` and
    `face_uv` say which grid each triangle samples and where its corners sit.
    Untextured meshes render with `face_colors` (F, 3) or a uniform color.
    """
    vertices: np.ndarray
    faces: np.ndarray
    textures: Optional[np.ndarray] = None
    face_side: Optional[np.ndarray] = None
    face_uv: Optional[np.ndarray] = None
    face_colors: Optional[np.ndarray] = None
    name: str = 'mesh'

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'faces', faces)
        self.validate()

    def validate(self):
        n_vertices = len(self.vertices)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= n_vertices:
                raise MeshError(f"Mesh '{self.name}': face index out of range for {n_vertices} vertices",
                                mesh_name=self.name)
            f = self.faces
            repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if repeated.any():
                bad = int(np.flatnonzero(repeated)[0])
                raise MeshError(f"Mesh '{self.name}': face {bad} references a vertex twice",
                                face_index=bad, mesh_name=self.name)
        if self.textures is not None:
            tex = np.asarray(self.textures)
            if tex.ndim != 4 or tex.shape[0] != 6 or tex.shape[1] != tex.shape[2] or tex.shape[3] != 3:
                raise MeshError(f"Mesh '{self.name}': textures must be 6 x T x T x 3, got {tex.shape}",
                                mesh_name=self.name)
            if tex.size and (tex.min() < 0.0 or tex.max() > 1.0):
                raise MeshError(f"Mesh '{self.name}': texture values outside [0, 1]", mesh_name=self.name)
            if self.face_side is None or self.face_uv is None:
                raise MeshError(f"Mesh '{self.name}': textured mesh needs face_side and face_uv",
                                mesh_name=self.name)
        if self.face_colors is not None and np.shape(self.face_colors) != (len(self.faces), 3):
            raise MeshError(f"Mesh '{self.name}': face_colors must be F x 3", mesh_name=self.name)

    @property
    def texture_size(self) -> Optional[int]:
        return None if self.textures is None else int(np.shape(self.textures)[1])

    def with_vertices(self, vertices: np.ndarray) -> 'Mesh':
        return Mesh(vertices, self.faces, self.textures, self.face_side, self.face_uv,
                    self.face_colors, self.name)

    def with_textures(self, textures: Optional[np.ndarray]) -> 'Mesh':
        return Mesh(self.vertices, self.faces, textures, self.face_side, self.face_uv,
                    self.face_colors, self.name)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        return self.vertices[self.faces]


@dataclass(frozen=True, eq=False)
class CubeTemplate:
    """
    The deformable cube: 6 sides of grid x grid vertices, edge vertices shared.

    `grid_index[s, i, j]` is the global vertex index of grid position (i, j) on side s.
    """
    mesh: Mesh
    grid_index: np.ndarray
    grid: int = DEFAULT_GRID
    _mirror: Dict[str, np.ndarray] = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.mesh.vertices)

    def mirror_index(self, axis: str = 'x') -> np.ndarray:
        """Index of each vertex's mirror partner across the plane `axis` = 0."""
        if axis not in AXES:
            raise ValidationError(f"Unknown symmetry axis '{axis}' (expected x, y or z)")
        if axis not in self._mirror:
            self._mirror[axis] = _mirror_pairs(self.mesh.vertices, AXES[axis])
        return self._mirror[axis]

    def instantiate(self, vertices: np.ndarray, textures: Optional[np.ndarray] = None,
                    name: str = 'reconstruction') -> Mesh:
        """Mesh with this template's topology and the given vertex positions."""
        return Mesh(vertices, self.mesh.faces, textures, self.mesh.face_side, self.mesh.face_uv,
                    None, name)


def _coordinate_keys(points: np.ndarray) -> List[Tuple[int, int, int]]:
    return [tuple(k) for k in np.round(points * 1e6).astype(np.int64)]


def _mirror_pairs(vertices: np.ndarray, axis: int) -> np.ndarray:
    reflected = vertices.copy()
    reflected[:, axis] = -reflected[:, axis]
    lookup = {key: i for i, key in enumerate(_coordinate_keys(vertices))}
    mirror = np.empty(len(vertices), dtype=np.int64)
    for i, key in enumerate(_coordinate_keys(reflected)):
        if key not in lookup:
            raise MeshError(f"Vertex {i} has no mirror partner across axis {axis}")
        mirror[i] = lookup[key]
    return mirror


@lru_cache(maxsize=4)
def make_cube_template(grid: int = DEFAULT_GRID) -> CubeTemplate:
    """
    Build the canonical cube template (unit cube centered at the origin).

    Vertices are merged by position, so each cube edge's grid vertices get one
    global index. Each quad cell (i, j)-(i+1, j+1) is split along that diagonal.
    """
    if grid < 2:
        raise ValidationError(f"Template grid must be >= 2, got {grid}")
    steps = np.linspace(-0.5, 0.5, grid)
    uv_steps = np.linspace(0.0, 1.0, grid)

    key_to_index: Dict[Tuple[int, int, int], int] = {}
    positions: List[np.ndarray] = []
    grid_index = np.empty((6, grid, grid), dtype=np.int64)

    for side, (normal, u_dir, v_dir) in enumerate(CUBE_SIDES):
        normal, u_dir, v_dir = (np.array(a, dtype=np.float64) for a in (normal, u_dir, v_dir))
        for i in range(grid):
            for j in range(grid):
                point = 0.5 * normal + steps[i] * u_dir + steps[j] * v_dir
                key = tuple(np.round(point * 1e6).astype(np.int64))
                if key not in key_to_index:
                    key_to_index[key] = len(positions)
                    positions.append(point)
                grid_index[side, i, j] = key_to_index[key]

    faces, face_side, face_uv = [], [], []
    for side in range(6):
        for i in range(grid - 1):
            for j in range(grid - 1):
                c00, c10 = grid_index[side, i, j], grid_index[side, i + 1, j]
                c11, c01 = grid_index[side, i + 1, j + 1], grid_index[side, i, j + 1]
                uv00, uv10 = (uv_steps[i], uv_steps[j]), (uv_steps[i + 1], uv_steps[j])
                uv11, uv01 = (uv_steps[i + 1], uv_steps[j + 1]), (uv_steps[i], uv_steps[j + 1])
                faces.append((c00, c10, c11))
                face_uv.append((uv00, uv10, uv11))
                faces.append((c00, c11, c01))
                face_uv.append((uv00, uv11, uv01))
                face_side.extend((side, side))

    mesh = Mesh(np.array(positions), np.array(faces, dtype=np.int64),
                face_side=np.array(face_side, dtype=np.int64),
                face_uv=np.array(face_uv, dtype=np.float64), name='cube_template')
    grid_index.setflags(write=False)
    return CubeTemplate(mesh=mesh, grid_index=grid_index, grid=grid)


def _side_masks(template: CubeTemplate, axis: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    coord = template.mesh.vertices[:, AXES[axis]]
    return coord > 1e-9, coord < -1e-9, np.abs(coord) <= 1e-9


def symmetrize(mesh: Mesh, axis: str = 'x', template: Optional[CubeTemplate] = None) -> Mesh:
    """
    Make a template-topology mesh mirror symmetric across the plane `axis` = 0.

    Vertices on the positive side of the template are the source: each
    negative-side partner becomes their reflection, and on-plane vertices get
    a zero coordinate along `axis`.
    """
    template = template or make_cube_template()
    if len(mesh.vertices) != template.n_vertices:
        raise MeshError(f"Mesh '{mesh.name}' has {len(mesh.vertices)} vertices; no mirror pairing "
                        f"with the {template.n_vertices}-vertex template", mesh_name=mesh.name)
    return mesh.with_vertices(symmetrize_vertices(mesh.vertices, axis, template))


def symmetrize_vertices(vertices: np.ndarray, axis: str = 'x',
                        template: Optional[CubeTemplate] = None) -> np.ndarray:
    """Array form of `symmetrize`; works on (V, 3) or batched (N, V, 3) vertices."""
    template = template or make_cube_template()
    mirror = template.mirror_index(axis)
    _, negative, on_plane = _side_masks(template, axis)
    a = AXES[axis]
    out = np.array(vertices, copy=True)
    reflected = out[..., mirror[negative], :].copy()
    reflected[..., a] = -reflected[..., a]
    out[..., negative, :] = reflected
    out[..., on_plane, a] = 0.0
    return out


def symmetrize_backward(grad: np.ndarray, axis: str = 'x',
                        template: Optional[CubeTemplate] = None) -> np.ndarray:
    """Adjoint of `symmetrize_vertices`: fold mirrored-side gradients onto their sources."""
    template = template or make_cube_template()
    mirror = template.mirror_index(axis)
    _, negative, on_plane = _side_masks(template, axis)
    a = AXES[axis]
    out = np.array(grad, copy=True)
    folded = out[..., negative, :].copy()
    folded[..., a] = -folded[..., a]
    out[..., negative, :] = 0.0
    sources = mirror[negative]
    if out.ndim == 2:
        np.add.at(out, sources, folded)
    else:
        for n in range(out.shape[0]):
            np.add.at(out[n], sources, folded[n])
    out[..., on_plane, a] = 0.0
    return out


def face_normal(p1, p2, p3, face_index: Optional[int] = None) -> np.ndarray:
    """Unit normal of triangle (p1, p2, p3); outward for counter-clockwise winding."""
    p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3))
    cross = np.cross(p2 - p1, p3 - p1)
    norm = np.linalg.norm(cross)
    if 0.5 * norm <= EPS_AREA:
        label = f" {face_index}" if face_index is not None else ""
        raise MeshError(f"Degenerate triangle{label} (area {0.5 * norm:.3e})", face_index=face_index)
    return cross / norm


def face_normals(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized normals for every face.

    Returns:
        (normals (F, 3), degenerate mask (F,)); degenerate rows are zero
    """
    tri = mesh.triangles()
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    degenerate = 0.5 * norm <= EPS_AREA
    normals = np.zeros_like(cross)
    normals[~degenerate] = cross[~degenerate] / norm[~degenerate, None]
    return normals, degenerate


def face_areas(mesh: Mesh) -> np.ndarray:
    tri = mesh.triangles()
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def signed_volume(mesh: Mesh) -> float:
    """Sum over faces of det(p1, p2, p3) / 6; the enclosed volume for closed outward meshes."""
    if len(mesh.faces) == 0:
        return 0.0
    tri = mesh.triangles()
    dets = np.einsum('ij,ij->i', tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))
    return float(dets.sum() / 6.0)


def signed_volume_batch(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Signed volume per mesh for batched vertices (N, V, 3) sharing one topology."""
    tri = vertices[:, faces]
    dets = np.einsum('nfi,nfi->nf', tri[:, :, 0], np.cross(tri[:, :, 1], tri[:, :, 2]))
    return dets.sum(axis=1) / 6.0


def reversed_winding(mesh: Mesh) -> Mesh:
    faces = mesh.faces[:, ::-1]
    face_uv = None if mesh.face_uv is None else mesh.face_uv[:, ::-1]
    return Mesh(mesh.vertices, faces, mesh.textures, mesh.face_side, face_uv, mesh.face_colors, mesh.name)


def save_obj(mesh: Mesh, path: str):
    """Write vertices and faces as Wavefront OBJ (1-based indices)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    lines = [f"# {mesh.name}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces"]
    lines.extend(f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices)
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces)
    with open(path, 'w', encoding='utf-8') as f:
        f.write("\n".join(lines) + "\n")


def load_obj(path: str, name: Optional[str] = None) -> Mesh:
    """Read `v` and `f` records of an OBJ file; polygons are fan-triangulated."""
    vertices, faces = [], []
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line_number, line in enumerate(f, 1):
                parts = line.split()
                if not parts or parts[0].startswith('#'):
                    continue
                try:
                    if parts[0] == 'v':
                        vertices.append([float(v) for v in parts[1:4]])
                    elif parts[0] == 'f':
                        idx = [int(token.split('/')[0]) for token in parts[1:]]
                        idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                        for k in range(1, len(idx) - 1):
                            faces.append((idx[0], idx[k], idx[k + 1]))
                except ValueError as e:
                    raise ValidationError(f"{path}:{line_number}: malformed OBJ record: {e}")
    except OSError as e:
        raise ValidationError(f"Cannot read mesh {path}: {e}")
    mesh_name = name or os.path.splitext(os.path.basename(path))[0]
    return Mesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3), name=mesh_name)


def save_textures(mesh: Mesh, directory: str):
    """Write the 6 side textures as tex_{0..5}.png plus a texture.json sidecar."""
    if mesh.textures is None:
        raise ValidationError(f"Mesh '{mesh.name}' has no textures to export")
    os.makedirs(directory, exist_ok=True)
    textures = np.asarray(mesh.textures)
    for side in range(6):
        pixels = np.clip(np.round(textures[side] * 255.0), 0, 255).astype(np.uint8)
        # Texel (i, j) is stored at image row j, column i.
        Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 0, 2))).save(
            os.path.join(directory, f"tex_{side}.png"))
    sidecar = {
        'texture_size': int(textures.shape[1]),
        'side_order': [{'normal': list(normal), 'u': list(u), 'v': list(v)} for normal, u, v in CUBE_SIDES],
        'files': [f"tex_{side}.png" for side in range(6)],
    }
    with open(os.path.join(directory, 'texture.json'), 'w', encoding='utf-8') as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def load_textures(directory: str) -> np.ndarray:
    """Inverse of `save_textures` (8-bit quantized)."""
    try:
        with open(os.path.join(directory, 'texture.json'), 'r', encoding='utf-8') as f:
            sidecar = json.load(f)
        grids = []
        for filename in sidecar['files']:
            pixels = np.asarray(Image.open(os.path.join(directory, filename)).convert('RGB'), dtype=np.float64)
            grids.append(pixels.transpose(1, 0, 2) / 255.0)
    except (OSError, KeyError, ValueError) as e:
        raise ValidationError(f"Cannot read textures from {directory}: {e}")
    return np.stack(grids)
