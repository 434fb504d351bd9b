"""Gaze probes: vMF kernels, KDE, placement, sampling, synthesis, files."""
import math

import numpy as np
import pytest

from nerg import DataFormatError
from nerg.core import Vec3, WorldTransform
from nerg.field import Aabb
from nerg.probes import (
    GazeProbe,
    GazeRay,
    GazeSample,
    ProbeSet,
    VmfKernel,
    build_probes,
    fibonacci_sphere,
    load_gaze_rays,
    load_probe_set,
    make_training_arrays,
    make_training_samples,
    probe_density,
    probe_density_many,
    sample_sphere_uniform,
    save_gaze_rays,
    save_probe_set,
    split_probe_set,
    synth_gaze,
    vmf_pdf,
)

from conftest import kde_reference, vmf_density_reference

Z = np.array([0.0, 0.0, 1.0])
X = np.array([1.0, 0.0, 0.0])


class TestVmfPdf:
    def test_small_kappa_approaches_uniform(self):
        # kappa -> 0+ limit is the uniform density 1/(4*pi)
        val = vmf_pdf(VmfKernel(1e-6), Z, X)
        assert val == pytest.approx(1.0 / (4.0 * math.pi), rel=1e-4)

    @pytest.mark.parametrize("kappa", [0.5, 5.0, 50.0, 500.0])
    def test_peak_value_closed_form(self, kappa):
        got = vmf_pdf(VmfKernel(kappa), Z, Z)
        expected = kappa / (2.0 * math.pi * (1.0 - math.exp(-2.0 * kappa)))
        assert got == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("kappa", [0.5, 5.0, 50.0])
    def test_normalizes_on_sphere(self, kappa):
        # quadrature over a low-discrepancy grid: mean * 4*pi ~ integral
        dirs = fibonacci_sphere(100_000)
        probe = GazeProbe(Vec3(0, 0, 0), Z[None, :], VmfKernel(kappa))
        vals = probe_density_many(probe, dirs)
        integral = vals.mean() * 4.0 * math.pi
        assert integral == pytest.approx(1.0, abs=1e-2)

    def test_huge_kappa_is_finite(self):
        # direct C(k)e^k would overflow; the stable form must not
        val = vmf_pdf(VmfKernel(5000.0), Z, Z)
        assert np.isfinite(val)
        assert val == pytest.approx(5000.0 / (2.0 * math.pi), rel=1e-6)

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(4)
        for kappa in (0.7, 12.0, 80.0):
            for _ in range(20):
                mu = sample_sphere_uniform(1, rng)[0]
                om = sample_sphere_uniform(1, rng)[0]
                got = vmf_pdf(VmfKernel(kappa), mu, om)
                assert got == pytest.approx(vmf_density_reference(kappa, mu, om), rel=1e-10)

    def test_rotation_invariance(self):
        # density depends on mu.omega only
        rng = np.random.default_rng(8)
        kernel = VmfKernel(25.0)
        for _ in range(50):
            mu = sample_sphere_uniform(1, rng)[0]
            om = sample_sphere_uniform(1, rng)[0]
            # random rotation via QR of a Gaussian matrix
            q, r = np.linalg.qr(rng.standard_normal((3, 3)))
            q *= np.sign(np.diag(r))
            before = vmf_pdf(kernel, mu, om)
            after = vmf_pdf(kernel, q @ mu, q @ om)
            assert abs(before - after) < 1e-12

    def test_non_unit_inputs_rejected(self):
        with pytest.raises(ValueError):
            vmf_pdf(VmfKernel(5.0), np.array([0.0, 0.0, 2.0]), Z)
        with pytest.raises(ValueError):
            vmf_pdf(VmfKernel(5.0), Z, np.array([0.0, 0.0, 0.5]))

    def test_kappa_must_be_positive_finite(self):
        with pytest.raises(ValueError):
            VmfKernel(0.0)
        with pytest.raises(ValueError):
            VmfKernel(math.inf)


class TestProbeDensity:
    def test_single_ray_equals_kernel(self):
        probe = GazeProbe(Vec3(0, 0, 0), Z[None, :], VmfKernel(30.0))
        for om in (Z, X, -Z):
            assert probe_density(probe, om) == pytest.approx(
                vmf_pdf(VmfKernel(30.0), Z, om), rel=1e-12)

    def test_two_antipodal_rays(self):
        kappa = 20.0
        probe = GazeProbe(Vec3(0, 0, 0), np.stack([Z, -Z]), VmfKernel(kappa))
        got = probe_density(probe, Z)
        k = VmfKernel(kappa)
        expected = 0.5 * (vmf_pdf(k, Z, Z) + vmf_pdf(k, -Z, Z))
        assert got == pytest.approx(expected, rel=1e-12)
        # symmetric mixture: both modes take the same value
        assert probe_density(probe, -Z) == pytest.approx(got, rel=1e-12)

    def test_monte_carlo_integral_is_one(self):
        rng = np.random.default_rng(12)
        rays = sample_sphere_uniform(40, rng)
        probe = GazeProbe(Vec3(0.2, -0.1, 1.5), rays, VmfKernel(50.0))
        dirs = sample_sphere_uniform(50_000, 99)
        integral = probe_density_many(probe, dirs).mean() * 4.0 * math.pi
        assert integral == pytest.approx(1.0, abs=2e-2)

    def test_ray_order_invariance(self):
        rng = np.random.default_rng(3)
        rays = sample_sphere_uniform(16, rng)
        k = VmfKernel(9.0)
        a = GazeProbe(Vec3(0, 0, 0), rays, k)
        b = GazeProbe(Vec3(0, 0, 0), rays[::-1].copy(), k)
        om = sample_sphere_uniform(1, rng)[0]
        assert probe_density(a, om) == pytest.approx(probe_density(b, om), rel=1e-12)

    def test_empty_probe_rejected(self):
        with pytest.raises(ValueError):
            GazeProbe(Vec3(0, 0, 0), np.empty((0, 3)), VmfKernel(5.0))


class TestBuildProbes:
    def volume(self):
        return Aabb(np.array([-0.5, -0.5, -0.5]), np.array([0.5, 0.5, 0.5]))

    def test_single_ray_lands_in_nearby_probes(self):
        rays = [GazeRay(Vec3(0.0, 0.0, 0.0), Z)]
        ps = build_probes(rays, "grid", R=0.1, cap=8, kappa=50.0,
                          volume=self.volume(), spacing=0.1)
        assert len(ps) >= 1
        for p in ps.probes:
            assert np.linalg.norm(p.center.as_array()) <= 0.1 + 1e-12
            assert p.ray_count == 1
            np.testing.assert_allclose(p.rays[0], Z)

    def test_defaults(self):
        rays = [GazeRay(Vec3(0.0, 0.0, 0.0), Z)]
        ps = build_probes(rays)
        assert ps.placement.radius == pytest.approx(0.1)
        assert ps.placement.cap == 1024

    def test_cap_and_subsample_determinism(self):
        rng = np.random.default_rng(17)
        dirs = sample_sphere_uniform(2000, rng)
        rays = [GazeRay(Vec3(0.0, 0.0, 0.0), d) for d in dirs]
        a = build_probes(rays, "grid", R=0.1, cap=1024, seed=5, kappa=50.0,
                         volume=self.volume(), spacing=0.25)
        b = build_probes(rays, "grid", R=0.1, cap=1024, seed=5, kappa=50.0,
                         volume=self.volume(), spacing=0.25)
        assert len(a) >= 1
        for pa, pb in zip(a.probes, b.probes):
            assert pa.ray_count == 1024
            np.testing.assert_array_equal(pa.rays, pb.rays)

    def test_empty_ray_list_gives_empty_set(self):
        ps = build_probes([], "grid", R=0.1, cap=4, volume=self.volume())
        assert len(ps) == 0

    def test_zero_ray_probes_dropped(self):
        # one ray in a big sparse grid: most centers catch nothing
        rays = [GazeRay(Vec3(0.4, 0.4, 0.4), Z)]
        ps = build_probes(rays, "grid", R=0.05, cap=4, kappa=50.0,
                          volume=self.volume(), spacing=0.05)
        assert 0 < len(ps) < 30

    def test_random_placement(self):
        rng = np.random.default_rng(2)
        rays = [GazeRay(Vec3.from_array(rng.uniform(-0.4, 0.4, 3)),
                        sample_sphere_uniform(1, rng)[0]) for _ in range(200)]
        ps = build_probes(rays, "random", R=0.3, cap=64, seed=1, kappa=50.0,
                          volume=self.volume(), count=20)
        assert 0 < len(ps) <= 20
        for p in ps.probes:
            assert 1 <= p.ray_count <= 64

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            build_probes([], R=0.0)
        with pytest.raises(ValueError):
            build_probes([], cap=0)
        with pytest.raises(ValueError):
            build_probes([], placement="hexagonal")


class TestSplit:
    def make_set(self, n=20):
        rng = np.random.default_rng(0)
        k = VmfKernel(10.0)
        probes = tuple(
            GazeProbe(Vec3.from_array(rng.uniform(-1, 1, 3)),
                      sample_sphere_uniform(4, rng), k)
            for _ in range(n))
        return ProbeSet(probes, build_probes([]).placement)

    def test_disjoint_and_sized(self):
        ps = self.make_set(20)
        train, test = split_probe_set(ps, 12, 5, seed=3)
        assert len(train) == 12 and len(test) == 5
        train_centers = {tuple(p.center.as_array()) for p in train.probes}
        test_centers = {tuple(p.center.as_array()) for p in test.probes}
        assert not train_centers & test_centers

    def test_overdraw_rejected(self):
        with pytest.raises(ValueError):
            split_probe_set(self.make_set(10), 8, 3)


class TestSphereSampling:
    def test_single_sample_is_unit(self):
        v = sample_sphere_uniform(1, 0)
        assert v.shape == (1, 3)
        assert np.linalg.norm(v[0]) == pytest.approx(1.0, abs=1e-12)

    def test_mean_vector_small(self):
        v = sample_sphere_uniform(10_000, 42)
        assert np.linalg.norm(v.mean(axis=0)) < 0.05

    def test_octant_counts_balanced(self):
        n = 80_000
        v = sample_sphere_uniform(n, 7)
        octant = (v[:, 0] > 0).astype(int) * 4 + (v[:, 1] > 0) * 2 + (v[:, 2] > 0)
        counts = np.bincount(octant, minlength=8)
        expected = n / 8
        sigma = math.sqrt(n * (1 / 8) * (7 / 8))
        assert np.all(np.abs(counts - expected) < 5 * sigma)

    def test_seeded_determinism(self):
        np.testing.assert_array_equal(sample_sphere_uniform(100, 9),
                                      sample_sphere_uniform(100, 9))

    def test_fibonacci_unit_and_spread(self):
        v = fibonacci_sphere(1000)
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)
        assert np.linalg.norm(v.mean(axis=0)) < 1e-2


class TestTrainingSamples:
    def make_set(self):
        rng = np.random.default_rng(1)
        k = VmfKernel(50.0)
        probes = tuple(
            GazeProbe(Vec3.from_array(rng.uniform(-1, 1, 3)),
                      sample_sphere_uniform(8, rng), k)
            for _ in range(5))
        return ProbeSet(probes, build_probes([]).placement)

    def test_counts_and_composition(self):
        ps = self.make_set()
        samples = make_training_samples(ps, n_per_probe=16, seed=0)
        assert len(samples) == 5 * 16
        centers = {tuple(p.center.as_array()) for p in ps.probes}
        for s in samples[:32]:
            assert tuple(s.position.as_array()) in centers
            assert s.g >= 0 and np.isfinite(s.g)

    def test_single_ray_probe_peak(self):
        kappa = 50.0
        probe = GazeProbe(Vec3(0, 0, 0), Z[None, :], VmfKernel(kappa))
        ps = ProbeSet((probe,), build_probes([]).placement)
        peak = kappa / (2.0 * math.pi * (1.0 - math.exp(-2.0 * kappa)))
        assert probe_density(probe, Z) == pytest.approx(peak, rel=1e-12)

    def test_g_matches_reference_kde(self):
        ps = self.make_set()
        pos, dirs, g = make_training_arrays(ps, n_per_probe=8, seed=3)
        idx = 0
        for probe in ps.probes:
            for j in range(8):
                ref = kde_reference(probe.rays, probe.kernel.kappa, dirs[idx])
                assert abs(g[idx] - ref) < 1e-9
                idx += 1

    def test_seeded_determinism(self):
        ps = self.make_set()
        a = make_training_arrays(ps, 8, seed=5)
        b = make_training_arrays(ps, 8, seed=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_empty_set_rejected(self):
        ps = ProbeSet((), build_probes([]).placement)
        with pytest.raises(ValueError):
            make_training_arrays(ps, 4)

    def test_gaze_sample_validates_g(self):
        with pytest.raises(ValueError):
            GazeSample(Vec3(0, 0, 0), Z, -0.5)
        with pytest.raises(ValueError):
            GazeSample(Vec3(0, 0, 0), Z, math.nan)


class TestSynthGaze:
    def volume(self):
        return Aabb(np.array([-0.5, -0.5, 1.0]), np.array([0.5, 0.5, 1.5]))

    def test_infinite_kappa_points_at_attractor(self):
        target = np.array([2.0, 0.0, 1.2])
        rays = synth_gaze(None, [(target, 1.0)], 50, self.volume(),
                          noise_kappa=math.inf, seed=0)
        assert len(rays) == 50
        for r in rays:
            want = target - r.position.as_array()
            want /= np.linalg.norm(want)
            np.testing.assert_allclose(r.direction, want, atol=1e-12)

    def test_equal_weights_split_evenly(self):
        a = np.array([3.0, 0.0, 1.0])
        b = np.array([-3.0, 0.0, 1.0])
        n = 4000
        rays = synth_gaze(None, [(a, 1.0), (b, 1.0)], n, self.volume(),
                          noise_kappa=math.inf, seed=1)
        toward_a = sum(1 for r in rays if r.direction[0] > 0)
        sigma = math.sqrt(n * 0.25)
        assert abs(toward_a - n / 2) < 5 * sigma

    def test_seeded_determinism(self):
        args = (None, [(np.array([1.0, 1.0, 1.0]), 1.0)], 20, self.volume())
        a = synth_gaze(*args, noise_kappa=150.0, seed=9)
        b = synth_gaze(*args, noise_kappa=150.0, seed=9)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.position.as_array(), rb.position.as_array())
            np.testing.assert_array_equal(ra.direction, rb.direction)

    def test_containment_enforced_with_scene(self, shelf_scene):
        outside = Aabb(np.array([10.0, 10.0, 10.0]), np.array([11.0, 11.0, 11.0]))
        with pytest.raises(ValueError):
            synth_gaze(shelf_scene, [(np.array([0.0, 0.0, 1.0]), 1.0)], 5, outside)
        with pytest.raises(ValueError):
            synth_gaze(shelf_scene, [(np.array([50.0, 0.0, 1.0]), 1.0)], 5, self.volume())

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            synth_gaze(None, [(np.array([1.0, 0.0, 0.0]), 0.0)], 5, self.volume())
        with pytest.raises(ValueError):
            synth_gaze(None, [(np.array([1.0, 0.0, 0.0]), -1.0)], 5, self.volume())


class TestGazeRayFiles:
    def test_round_trip(self, tmp_path):
        vol = Aabb(np.array([-1.0, -1.0, 0.5]), np.array([1.0, 1.0, 2.0]))
        rays = synth_gaze(None, [(np.array([0.0, 3.0, 1.0]), 1.0)], 1000, vol,
                          noise_kappa=80.0, seed=3)
        path = tmp_path / "gaze.csv"
        save_gaze_rays(rays, path)
        back = load_gaze_rays(path)
        assert len(back) == len(rays)
        for ra, rb in zip(rays, back):
            # %.9g formatting preserves float32-level precision
            np.testing.assert_allclose(rb.position.as_array(), ra.position.as_array(),
                                       atol=1e-6)
            np.testing.assert_allclose(rb.direction, ra.direction, atol=1e-6)

    def test_empty_file_with_header(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("x,y,z,dx,dy,dz\n")
        assert load_gaze_rays(path) == []

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "headerless.csv"
        path.write_text("0,0,1.6,0,0,1\n")
        with pytest.raises(DataFormatError):
            load_gaze_rays(path)

    def test_single_row(self, tmp_path):
        path = tmp_path / "one.csv"
        path.write_text("x,y,z,dx,dy,dz\n0,0,1.6,0,0,1\n")
        rays = load_gaze_rays(path)
        assert len(rays) == 1
        np.testing.assert_allclose(rays[0].position.as_array(), [0, 0, 1.6])
        np.testing.assert_allclose(rays[0].direction, [0, 0, 1])

    def test_malformed_row_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y,z,dx,dy,dz\n0,0,1.6,0,0,1\n0,0,oops,0,0,1\n")
        with pytest.raises(DataFormatError, match=":3"):
            load_gaze_rays(path)

    def test_wrong_field_count_reports_line_number(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text("x,y,z,dx,dy,dz\n1,2,3,0,0\n")
        with pytest.raises(DataFormatError, match=":2"):
            load_gaze_rays(path)

    def test_non_unit_rows_skipped_with_warning(self, tmp_path, caplog):
        path = tmp_path / "nonunit.csv"
        path.write_text("x,y,z,dx,dy,dz\n0,0,1,0,0,1\n0,0,1,0,0,9\n")
        with caplog.at_level("WARNING"):
            rays = load_gaze_rays(path)
        assert len(rays) == 1
        assert any("skipped 1" in r.message for r in caplog.records)

    def test_world_transform_applied(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("x,y,z,dx,dy,dz\n1,0,0,1,0,0\n")
        # translation by (0,0,5): positions move, directions unchanged
        m = np.eye(4)
        m[2, 3] = 5.0
        rays = load_gaze_rays(path, WorldTransform(m))
        np.testing.assert_allclose(rays[0].position.as_array(), [1, 0, 5])
        np.testing.assert_allclose(rays[0].direction, [1, 0, 0])


class TestProbeSetFiles:
    def make_set(self):
        rng = np.random.default_rng(6)
        vol = Aabb(np.array([-0.5, -0.5, -0.5]), np.array([0.5, 0.5, 0.5]))
        rays = [GazeRay(Vec3.from_array(rng.uniform(-0.4, 0.4, 3)),
                        sample_sphere_uniform(1, rng)[0]) for _ in range(300)]
        return build_probes(rays, "grid", R=0.2, cap=32, seed=4, kappa=50.0,
                            volume=vol, spacing=0.2)

    def test_round_trip(self, tmp_path):
        ps = self.make_set()
        assert len(ps) > 2
        path = tmp_path / "probes.nprb"
        save_probe_set(ps, path)
        back = load_probe_set(path)
        assert len(back) == len(ps)
        assert back.placement.to_json() == ps.placement.to_json()
        for pa, pb in zip(ps.probes, back.probes):
            assert pb.kernel.kappa == pa.kernel.kappa
            np.testing.assert_allclose(pb.center.as_array(), pa.center.as_array(),
                                       atol=1e-6)
            assert pb.rays.shape == pa.rays.shape
            np.testing.assert_allclose(pb.rays, pa.rays, atol=1e-6)
            # directions stay exactly unit after the f32 round trip
            np.testing.assert_allclose(np.linalg.norm(pb.rays, axis=1), 1.0, atol=1e-12)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.nprb"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 32)
        with pytest.raises(DataFormatError):
            load_probe_set(path)

    def test_truncated_block(self, tmp_path):
        ps = self.make_set()
        path = tmp_path / "trunc.nprb"
        save_probe_set(ps, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(DataFormatError):
            load_probe_set(path)
