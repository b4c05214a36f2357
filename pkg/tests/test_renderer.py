import numpy as np
import pytest
from scipy.stats import chisquare

from helpers import diffmath as dm
from helpers.diffmath import Graph
from helpers.errors import ContractViolation, DatasetError
from helpers.renderer import (RadianceMLP, composite, generate_rays, importance_samples, radiance_field, read_depth,
                              render, stratified_samples, write_depth)
from helpers.scenegen import render_scene
from helpers.trainer import Adam
from helpers.triplane import Triplane
from triplane_data_classes import Camera, PrimitiveType, Primitive, SceneSpec, TextureFamily

CAMERA = Camera()


def test_weights_and_residual_sum_to_one():
    rng = np.random.default_rng(0)
    with dm.float64_mode():
        t = np.sort(rng.uniform(CAMERA.near, CAMERA.far, size=(10000, 16)), axis=-1)
        sigma = rng.exponential(2.0, size=(10000, 16))
        result = composite(t, sigma, rng.uniform(size=(10000, 16, 3)), CAMERA.far)
        total = result.weights.numpy().sum(axis=-1) + result.residual.numpy()
    np.testing.assert_allclose(total, 1.0, atol=1e-6)


def test_homogeneous_slab_transmittance():
    t = stratified_samples(1, 256, CAMERA.near, CAMERA.far)
    density, start, end = 1.5, 2.2, 2.7
    sigma = np.where((t >= start) & (t < end), density, 0.0)
    with dm.float64_mode():
        residual = composite(t, sigma, np.zeros((1, 256, 3)), CAMERA.far).residual.numpy()[0]
    assert residual == pytest.approx(np.exp(-density * (end - start)), rel=0.02)


def test_empty_space_renders_black_at_far():
    t = stratified_samples(4, 8, CAMERA.near, CAMERA.far)
    result = composite(t, np.zeros((4, 8)), np.ones((4, 8, 3)), CAMERA.far)
    np.testing.assert_allclose(result.color.numpy(), 0.0)
    np.testing.assert_allclose(result.depth.numpy(), CAMERA.far, rtol=1e-6)


def test_opaque_first_sample_sets_depth():
    t = np.array([[2.0, 2.5, 3.0]])
    result = composite(t, np.array([[1e3, 0.0, 0.0]]), np.array([[[1.0, 0.0, 0.0]] * 3]), CAMERA.far)
    assert result.depth.item() == pytest.approx(2.0, abs=1e-4)
    np.testing.assert_allclose(result.color.numpy()[0], [1.0, 0.0, 0.0], atol=1e-4)


def test_unsorted_depths_are_rejected():
    with pytest.raises(ContractViolation):
        composite(np.array([[2.0, 1.9]]), np.ones((1, 2)), np.ones((1, 2, 3)), CAMERA.far)


def test_stratified_samples_stay_in_their_bins():
    t = stratified_samples(50, 8, CAMERA.near, CAMERA.far, np.random.default_rng(1))
    width = (CAMERA.far - CAMERA.near) / 8
    bins = np.floor((t - CAMERA.near) / width)
    np.testing.assert_array_equal(bins, np.broadcast_to(np.arange(8), t.shape))
    midpoints = stratified_samples(1, 4, 0.0, 1.0)
    np.testing.assert_allclose(midpoints, [[0.125, 0.375, 0.625, 0.875]])


def test_stratified_samples_average_to_the_bin_centers():
    t = stratified_samples(12500, 8, CAMERA.near, CAMERA.far, np.random.default_rng(12))
    width = (CAMERA.far - CAMERA.near) / 8
    centers = CAMERA.near + width * (np.arange(8) + 0.5)
    np.testing.assert_allclose(t.mean(axis=0), centers, atol=0.005)
    assert t.mean() == pytest.approx(0.5 * (CAMERA.near + CAMERA.far), rel=0.01)


def test_importance_samples_concentrate_on_heavy_bins():
    t = stratified_samples(3, 8, CAMERA.near, CAMERA.far)
    weights = np.zeros((3, 8))
    weights[:, 5] = 1.0
    merged = importance_samples(t, weights, 8, CAMERA.near, CAMERA.far, np.random.default_rng(2))
    assert merged.shape == (3, 16)
    assert np.all(np.diff(merged, axis=-1) >= 0)
    width = (CAMERA.far - CAMERA.near) / 8
    refined = np.setdiff1d(merged, t)
    assert np.all((refined >= CAMERA.near + 5 * width) & (refined <= CAMERA.near + 6 * width))


def test_importance_samples_fall_back_to_uniform():
    t = stratified_samples(1, 4, 0.0, 1.0)
    merged = importance_samples(t, np.zeros((1, 4)), 2, 0.0, 1.0)
    np.testing.assert_allclose(merged, [[0.125, 0.25, 0.375, 0.625, 0.75, 0.875]])


def test_importance_samples_follow_the_weights():
    bins = 4
    t = stratified_samples(1, bins, 0.0, 1.0)
    weights = np.array([[0.1, 0.2, 0.3, 0.4]])
    draws = np.concatenate([importance_samples(t, weights, 500, 0.0, 1.0, np.random.default_rng(seed))[0]
                            for seed in range(20)])
    refined = draws[~np.isin(draws, t[0])]
    counts = np.histogram(refined, bins=bins, range=(0.0, 1.0))[0]
    assert chisquare(counts, weights[0] * counts.sum()).pvalue > 1e-3


def test_rays_cover_every_pixel():
    rays = generate_rays(CAMERA, 8)
    assert len(rays) == 64
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=-1), 1.0)
    assert np.all(rays.depth_scale >= 1.0)
    # points at z-depth t lie on the plane z = t - distance
    points = rays.points(np.full((64, 1), 2.7))
    np.testing.assert_allclose(points[..., 2], 0.0, atol=1e-12)


def test_center_ray_follows_the_optical_axis():
    rays = generate_rays(CAMERA, 9)
    np.testing.assert_allclose(rays.directions[4 * 9 + 4], [0.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(rays.directions[0, :2], -rays.directions[-1, :2])
    np.testing.assert_allclose(rays.directions[0, 2], rays.directions[-1, 2])


def test_top_to_bottom_angle_spans_the_field_of_view():
    resolution = 9
    rays = generate_rays(CAMERA, resolution)
    top, bottom = rays.directions[4], rays.directions[(resolution - 1) * resolution + 4]
    assert top[1] > 0.0 > bottom[1]
    angle = np.degrees(np.arccos(np.clip(top @ bottom, -1.0, 1.0)))
    half = np.radians(CAMERA.fov_y_degrees / 2.0)
    # pixel centers span (resolution - 1) / resolution of the image height
    expected = np.degrees(2.0 * np.arctan(np.tan(half) * (resolution - 1) / resolution))
    assert angle == pytest.approx(expected, abs=1e-6)
    assert abs(angle - CAMERA.fov_y_degrees) < 5.0


def test_zeroed_field_has_constant_density():
    mlp = RadianceMLP(4, 8, np.random.default_rng(3))
    mlp.zero_()
    triplane = Triplane(dm.Tensor(np.zeros((3, 4, 4, 4))))
    field = radiance_field(triplane, np.random.default_rng(4).uniform(-1, 1, size=(30, 3)), mlp)
    np.testing.assert_allclose(field.sigma.numpy(), np.log(2.0), rtol=1e-6)
    np.testing.assert_allclose(field.rgb.numpy(), 0.5, rtol=1e-6)


def test_radiance_mlp_ranges():
    mlp = RadianceMLP(4, 8, np.random.default_rng(3))
    triplane = Triplane(dm.Tensor(np.random.default_rng(4).normal(size=(3, 4, 4, 4))))
    field = radiance_field(triplane, np.random.default_rng(5).uniform(-1, 1, size=(20, 3)), mlp)
    assert field.sigma.shape == (20,) and field.rgb.shape == (20, 3)
    assert np.all(field.sigma.numpy() >= 0)
    assert np.all((field.rgb.numpy() >= 0) & (field.rgb.numpy() <= 1))


def test_render_shapes_and_depth_range():
    mlp = RadianceMLP(4, 8, np.random.default_rng(6))
    triplane = Triplane(dm.Tensor(np.random.default_rng(7).normal(size=(3, 8, 8, 4))))
    result = render(triplane, CAMERA, 6, mlp, n_coarse=4, n_fine=4, rng=np.random.default_rng(8))
    assert result.image.shape == (6, 6, 3)
    assert result.depth.shape == (6, 6)
    assert result.sigma.shape == (36, 8)
    depth = result.depth.numpy()
    assert np.all((depth >= CAMERA.near - 1e-4) & (depth <= CAMERA.far + 1e-4))


def test_render_is_deterministic_per_seed():
    mlp = RadianceMLP(4, 8, np.random.default_rng(6))
    triplane = Triplane(dm.Tensor(np.random.default_rng(7).normal(size=(3, 8, 8, 4))))
    first = render(triplane, CAMERA, 4, mlp, rng=np.random.default_rng(9)).image.numpy()
    second = render(triplane, CAMERA, 4, mlp, rng=np.random.default_rng(9)).image.numpy()
    np.testing.assert_array_equal(first, second)


def test_render_needs_one_scene():
    mlp = RadianceMLP(4, 8, np.random.default_rng(6))
    with pytest.raises(ContractViolation):
        render(Triplane(dm.Tensor(np.zeros((2, 3, 4, 4, 4)))), CAMERA, 4, mlp)


def test_depth_file_round_trip(tmp_path):
    depth = np.random.default_rng(10).uniform(1.7, 3.7, size=(5, 7)).astype(np.float32)
    path = str(tmp_path / "depth.tpdm")
    write_depth(path, depth)
    assert (tmp_path / "depth.tpdm").stat().st_size == 16 + 4 * 35
    np.testing.assert_array_equal(read_depth(path), depth)


def test_depth_file_errors(tmp_path):
    bad_magic = tmp_path / "bad.tpdm"
    bad_magic.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(DatasetError):
        read_depth(str(bad_magic))
    path = str(tmp_path / "short.tpdm")
    write_depth(path, np.ones((4, 4)))
    with open(path, "rb") as depth_file:
        content = depth_file.read()
    truncated = tmp_path / "truncated.tpdm"
    truncated.write_bytes(content[:-4])
    with pytest.raises(DatasetError):
        read_depth(str(truncated))


@pytest.mark.slow
def test_overfit_recovers_plane_depth():
    resolution = 8
    wall = Primitive(kind=PrimitiveType.Plane, center=[0.0, 0.0, 0.0], size=[1.0, 1.0, 1.0],
                     texture=TextureFamily.Solid, color_a=[0.8, 0.4, 0.2], color_b=[0.8, 0.4, 0.2],
                     normal=[0.0, 0.0, 1.0])
    image, depth = render_scene(SceneSpec(primitives=[wall], shape_class=0, texture_class=0, seed=0), CAMERA,
                                resolution)
    rng = np.random.default_rng(11)
    planes = dm.Parameter(rng.normal(scale=0.1, size=(3, 16, 16, 8)))
    mlp = RadianceMLP(8, 32, rng)
    optimizer = Adam([("planes", planes)] + mlp.named_parameters("mlp."), 1e-2)
    for step in range(500):
        planes.zero_grad()
        mlp.zero_grad()
        result = render(Triplane(planes), CAMERA, resolution, mlp, rng=np.random.default_rng([step, 1]))
        loss = dm.mse(result.depth, depth) + 0.1 * dm.mse(result.image, image)
        dm.backward(Graph.trace(loss), loss)
        optimizer.step()
    with dm.no_grad():
        rendered = render(Triplane(planes), CAMERA, resolution, mlp).depth.numpy()
    assert np.max(np.abs(rendered - depth)) <= (CAMERA.far - CAMERA.near) / 16
