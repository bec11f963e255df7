#!/usr/bin/env python3
"""
Renderer tests: projection, rasterization buffers, the approximate backward
rule on hand-built pixel rows, and a small descent check.
"""

import os
import sys
import tempfile

import numpy as np
from PIL import Image

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from gradcheck import brute_force_pixels_to_projected, random_scene
from mesh_core import Mesh, Viewpoint, make_cube_template
from renderer import (Camera, MeshRenderer, RenderOutput, backward_pixels_to_projected, pixel_position_gradients,
                      project_vertices, rasterize, save_rgba_png, select_direction)
from utils import ValidationError


def _front_camera(size=16):
    return Camera(Viewpoint(0.0, 0.0, 4.0), fov=40.0, image_size=size)


def test_projection_of_origin_is_image_center():
    camera = _front_camera(32)
    proj = project_vertices(np.zeros((1, 3)), camera)
    assert np.allclose(proj.xy[0], [16.0, 16.0])
    assert abs(proj.depth[0] - 4.0) < 1e-12
    right = project_vertices(np.array([[0.5, 0.0, 0.0]]), camera).xy[0]
    up = project_vertices(np.array([[0.0, 0.5, 0.0]]), camera).xy[0]
    assert right[0] > 16.0 and up[1] < 16.0


def test_camera_rejects_bad_settings():
    for kwargs in ({'fov': 0.0}, {'fov': 180.0}, {'image_size': 4}):
        try:
            Camera(Viewpoint(0.0, 0.0, 4.0), **kwargs)
            assert False, f"{kwargs} accepted"
        except ValidationError:
            pass


def test_cube_render_buffers():
    template = make_cube_template(4)
    out = rasterize(template.mesh, _front_camera(32), background=(0.2, 0.3, 0.4))
    center = out.face_id[16, 16]
    assert center >= 0
    assert np.allclose(out.bary[16, 16].sum(), 1.0)
    assert out.alpha[16, 16] == 1.0
    assert out.face_id[0, 0] == -1 and out.alpha[0, 0] == 0.0
    assert np.allclose(out.color[0, 0], [0.2, 0.3, 0.4])
    # The front side (+z) faces the camera.
    normal_z = template.mesh.vertices[template.mesh.faces[center]][:, 2]
    assert np.allclose(normal_z, 0.5)


def test_alpha_is_fractional_on_edges():
    mesh = Mesh(np.array([[-0.61, -0.61, 0.0], [0.61, -0.61, 0.0], [0.0, 0.7, 0.0]]), [[0, 1, 2]])
    out = rasterize(mesh, _front_camera(16), supersample=4)
    fractional = (out.alpha > 0.0) & (out.alpha < 1.0)
    assert fractional.any()
    assert np.all(np.isin(out.alpha * 16, np.arange(17)))


def test_empty_mesh_renders_background():
    out = rasterize(Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)), _front_camera(8), background=(1, 0, 0))
    assert np.all(out.face_id == -1)
    assert np.allclose(out.color, [1, 0, 0]) and np.all(out.alpha == 0)


def test_select_direction_cases():
    # Both moves raise the loss.
    assert select_direction(np.array([1.0]), np.array([-1.0]))[0] == 0.0
    # Right move lowers more.
    assert select_direction(np.array([-3.0]), np.array([1.0]))[0] == -3.0
    # Left move lowers more.
    assert select_direction(np.array([-1.0]), np.array([2.0]))[0] == 2.0
    # Tie goes right.
    assert select_direction(np.array([-2.0]), np.array([2.0]))[0] == -2.0


def _row_output(alpha_row, face_row, background=(0.0, 0.0, 0.0)):
    """A one-row-high strip embedded in an 8x8 canvas, every face a single vertex triple."""
    size = 8
    alpha = np.zeros((size, size))
    face_id = np.full((size, size), -1, dtype=np.int64)
    alpha[4, :len(alpha_row)] = alpha_row
    face_id[4, :len(face_row)] = face_row
    color = np.broadcast_to(np.asarray(background, dtype=float), (size, size, 3)).copy()
    bary = np.zeros((size, size, 3))
    bary[face_id >= 0] = (1.0, 0.0, 0.0)
    return RenderOutput(color=color, alpha=alpha, face_id=face_id, bary=bary, depth=np.zeros((size, size)),
                        background=np.asarray(background, dtype=float), faces=np.array([[0, 1, 2]]),
                        n_vertices=3, camera=_front_camera(8), culled=np.zeros(0, dtype=np.int64))


def test_edge_pixel_moves_toward_target():
    # Pixels 0..2 covered by the face; the target wants pixel 3 covered too.
    out = _row_output([1.0, 1.0, 1.0], [0, 0, 0])
    grad_alpha = np.zeros((8, 8))
    grad_alpha[4, 3] = -1.0
    gx, gy = pixel_position_gradients(out, np.zeros((8, 8, 3)), grad_alpha)
    # Moving the edge pixel right fills pixel 3: negative x gradient (descent moves +x).
    assert gx[4, 2] < 0.0
    assert gx[4, 0] == 0.0 and gx[4, 1] == 0.0
    assert np.all(gy[4, :3] == 0.0)
    assert np.all(gx[out.face_id < 0] == 0.0)


def test_no_gradient_when_both_moves_hurt():
    out = _row_output([1.0, 1.0, 1.0], [0, 0, 0])
    grad_alpha = np.zeros((8, 8))
    grad_alpha[4, :3] = -1.0
    grad_alpha[4, 3] = 1.0
    gx, _ = pixel_position_gradients(out, np.zeros((8, 8, 3)), grad_alpha)
    assert gx[4, 2] == 0.0


def test_backward_matches_brute_force_on_random_scenes():
    for trial in range(20):
        rng = np.random.default_rng([5, trial])
        mesh, camera = random_scene(rng)
        out = rasterize(mesh, camera, background=rng.uniform(size=3))
        gc = rng.normal(size=(camera.image_size, camera.image_size, 3))
        ga = rng.normal(size=(camera.image_size, camera.image_size))
        fast = backward_pixels_to_projected(out, gc, ga)
        slow = brute_force_pixels_to_projected(out, gc, ga)
        assert np.max(np.abs(fast - slow)) < 1e-9


def test_backward_rejects_mismatched_buffers():
    out = rasterize(make_cube_template(2).mesh, _front_camera(8))
    try:
        backward_pixels_to_projected(out, np.zeros((4, 4, 3)), np.zeros((4, 4)))
        assert False, "mismatched gradient buffers accepted"
    except ValidationError:
        pass


def test_gradient_step_grows_silhouette_toward_target():
    renderer = MeshRenderer(image_size=32, fov=40.0)
    template = make_cube_template(4)
    viewpoint = Viewpoint(20.0, 15.0, 4.0)
    target = renderer.render(template.mesh.with_vertices(template.mesh.vertices * 1.4), viewpoint).alpha
    vertices = template.mesh.vertices * 1.0

    def loss(v):
        return float(np.sum((renderer.render(template.mesh.with_vertices(v), viewpoint).alpha - target) ** 2))

    before = loss(vertices)
    for _ in range(10):
        mesh = template.mesh.with_vertices(vertices)
        out = renderer.render(mesh, viewpoint)
        grad_v, _ = renderer.backward(mesh, out, np.zeros((32, 32, 3)), 2.0 * (out.alpha - target))
        vertices = vertices - 0.0005 * grad_v
    assert loss(vertices) < before


def test_rgba_png_export():
    out = rasterize(make_cube_template(2).mesh, _front_camera(16))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'view.png')
        save_rgba_png(out, path)
        with Image.open(path) as img:
            assert img.mode == 'RGBA' and img.size == (16, 16)
            pixels = np.asarray(img)
        assert pixels[8, 8, 3] == 255 and pixels[0, 0, 3] == 0


if __name__ == "__main__":
    from check_runner import run_tests
    sys.exit(1 if run_tests(globals(), "Renderer") else 0)
