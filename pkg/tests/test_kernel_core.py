import numpy as np
import pytest
from scipy.special import ndtr

from app.errors import ConfigurationError, DomainError, FormatError
from app.kernel_core import (
    arccos_kernel_closed,
    build_lookup,
    cached_lookup,
    cosine_map,
    cosine_map_slope,
    fixed_point,
    integral_I,
    interpolation_error,
    kernel_single,
    load_lookup,
    read_lookup_header,
    save_lookup,
    sigma_star,
    tau_from_f,
    table_path,
)
from app.models import KernelConfig


def gaussian_second_moment_sigma(tau):
    # E[(u - tau)_+^2] = (1 + tau^2) Q(tau) - tau phi(tau) for u ~ N(0, 1)
    phi = np.exp(-0.5 * tau * tau) / np.sqrt(2 * np.pi)
    return 1.0 / np.sqrt((1 + tau * tau) * ndtr(-tau) - tau * phi)


class TestThreshold:
    def test_half_density_has_zero_threshold(self):
        assert tau_from_f(0.5) == 0.0

    @pytest.mark.parametrize("f", [0.01, 0.05, 0.1, 0.139, 0.3, 0.45])
    def test_tail_mass_matches_f(self, f):
        assert ndtr(-tau_from_f(f)) == pytest.approx(f, rel=1e-13)

    @pytest.mark.parametrize("f", [0.0, -0.1, 0.51, 1.0])
    def test_out_of_range(self, f):
        with pytest.raises(DomainError):
            tau_from_f(f)


class TestKernelConfig:
    def test_threshold_and_scale_derived(self):
        config = KernelConfig(f=0.5)
        assert config.tau == 0.0
        assert config.sigma == pytest.approx(np.sqrt(2.0), abs=1e-12)

    @pytest.mark.parametrize("fields", [
        {"f": 0.7},
        {"f": 0.0},
        {"f": 0.3, "depth": 0},
        {"f": 0.3, "ridge": -1.0},
        {"f": 0.3, "sigma": 0.0},
    ])
    def test_invalid_values(self, fields):
        with pytest.raises(ConfigurationError):
            KernelConfig(**fields)


class TestIntegral:
    def test_closed_form_reduction(self):
        theta = np.linspace(0.0, np.pi, 10001)
        expected = (np.pi - theta) * np.cos(theta) + np.sin(theta)
        assert np.max(np.abs(2 * integral_I(theta, 0.0) - expected)) <= 1e-9

    def test_quadrature_path_near_zero_threshold(self):
        theta = np.linspace(0.0, np.pi, 1001)
        expected = (np.pi - theta) * np.cos(theta) + np.sin(theta)
        assert np.max(np.abs(2 * integral_I(theta, 1e-10) - expected)) <= 1e-9

    def test_scalar_in_scalar_out(self):
        assert isinstance(integral_I(0.3, 0.5), float)

    def test_vanishes_at_pi(self):
        assert integral_I(np.pi, 1.0) == 0.0

    def test_angle_domain(self):
        with pytest.raises(DomainError):
            integral_I(3.5, 0.5)


class TestSigmaStar:
    def test_dense_value(self):
        assert sigma_star(0.0) == pytest.approx(np.sqrt(2.0), abs=1e-12)

    @pytest.mark.parametrize("tau", [0.5, 1.0, 2.0])
    def test_gaussian_moment_oracle(self, tau):
        assert sigma_star(tau) == pytest.approx(gaussian_second_moment_sigma(tau), rel=1e-10)

    def test_gaussian_moment_oracle_deep_tail(self):
        assert sigma_star(3.0) == pytest.approx(gaussian_second_moment_sigma(3.0), rel=1e-8)

    @pytest.mark.parametrize("tau", [0.5, 1.0, 2.0])
    def test_unit_cosine_is_fixed(self, tau):
        assert cosine_map(1.0, tau, sigma_star(tau)) == pytest.approx(1.0, abs=1e-10)


class TestCosineMap:
    @pytest.mark.parametrize("f", [0.05, 0.2, 0.5])
    def test_monotone(self, f):
        tau = tau_from_f(f)
        values = cosine_map(np.linspace(-1, 1, 401), tau, sigma_star(tau))
        assert np.all(np.diff(values) >= -1e-12)

    def test_antiparallel_maps_to_zero(self):
        tau = tau_from_f(0.3)
        assert cosine_map(-1.0, tau, sigma_star(tau)) == 0.0

    def test_clamp_band(self):
        tau = tau_from_f(0.3)
        assert cosine_map(1.0 + 1e-13, tau, 1.0) == cosine_map(1.0, tau, 1.0)
        with pytest.raises(DomainError):
            cosine_map(1.0 + 1e-9, tau, 1.0)

    @pytest.mark.parametrize("c", [-0.5, 0.0, 0.3, 0.9])
    @pytest.mark.parametrize("f", [0.1, 0.3, 0.5])
    def test_slope_matches_finite_difference(self, f, c):
        tau = tau_from_f(f)
        sigma = sigma_star(tau)
        h = 1e-5
        fd = (cosine_map(c + h, tau, sigma) - cosine_map(c - h, tau, sigma)) / (2 * h)
        assert cosine_map_slope(c, tau, sigma) == pytest.approx(fd, abs=1e-6)

    def test_slope_vanishes_antiparallel(self):
        assert cosine_map_slope(-1.0, tau_from_f(0.2), 2.0) == 0.0

    def test_fixed_point_of_sparse_map(self):
        tau = tau_from_f(0.1)
        sigma = sigma_star(tau)
        c_star = fixed_point(tau, sigma)
        assert 0.0 < c_star < 1.0
        assert cosine_map(c_star, tau, sigma) == pytest.approx(c_star, abs=1e-12)


class TestKernelSingle:
    def test_dense_kernel_is_arccos(self, rng):
        config = KernelConfig(f=0.5)
        for _ in range(10):
            x_p, x_q = rng.standard_normal((2, 4))
            x_p /= np.linalg.norm(x_p)
            x_q /= np.linalg.norm(x_q)
            theta = np.arccos(np.clip(x_p @ x_q, -1, 1))
            assert kernel_single(x_p, x_q, config) == pytest.approx(arccos_kernel_closed(theta), abs=1e-12)

    def test_scales_with_norms(self, rng):
        config = KernelConfig(f=0.2)
        x_p, x_q = rng.standard_normal((2, 3))
        base = kernel_single(x_p, x_q, config)
        assert kernel_single(2 * x_p, 3 * x_q, config) == pytest.approx(6 * base, rel=1e-12)

    def test_offset_added(self, rng):
        x_p, x_q = rng.standard_normal((2, 3))
        plain = kernel_single(x_p, x_q, KernelConfig(f=0.2))
        shifted = kernel_single(x_p, x_q, KernelConfig(f=0.2, offset=0.5))
        assert shifted == pytest.approx(plain + 0.5, abs=1e-14)

    def test_unit_self_kernel_with_sigma_star(self):
        x = np.array([0.6, 0.8])
        assert kernel_single(x, x, KernelConfig(f=0.1)) == pytest.approx(1.0, abs=1e-10)

    def test_zero_input_rejected(self):
        with pytest.raises(DomainError):
            kernel_single(np.zeros(3), np.ones(3), KernelConfig(f=0.3))


class TestLookupTable:
    def test_interpolation_within_bound(self, coarse_table, rng):
        assert interpolation_error(coarse_table) <= 1e-6
        cosines = rng.uniform(-1, 1, 500)
        assert interpolation_error(coarse_table, cosines) <= 1e-6

    def test_nodes_are_exact(self, coarse_table):
        assert np.allclose(coarse_table.evaluate(coarse_table.c_grid), coarse_table.c_out, atol=1e-14)

    def test_dense_table_matches_arccos_closed_form(self):
        table = cached_lookup(0.5)
        theta = np.linspace(0.0, np.pi, 10_001)
        got = table.evaluate(np.clip(np.cos(theta), -1.0, 1.0))
        assert np.max(np.abs(got - arccos_kernel_closed(theta, table.sigma))) <= 1e-6

    def test_header_fields(self, coarse_table, tmp_path):
        header = read_lookup_header(save_lookup(coarse_table, tmp_path / "h.sngp"))
        assert header == {
            "magic": "SNGP",
            "version": 1,
            "f": coarse_table.f,
            "sigma": coarse_table.sigma,
            "nodes": len(coarse_table),
        }

    def test_grid_too_small(self):
        with pytest.raises(ConfigurationError):
            build_lookup(0.3, 64)

    def test_save_load_roundtrip(self, coarse_table, tmp_path):
        path = save_lookup(coarse_table, table_path(tmp_path, coarse_table.f, len(coarse_table)))
        loaded = load_lookup(path)
        assert loaded.f == coarse_table.f
        assert loaded.sigma == coarse_table.sigma
        assert np.array_equal(loaded.c_grid, coarse_table.c_grid)
        assert np.array_equal(loaded.c_out, coarse_table.c_out)

    def test_rebuild_is_byte_identical(self, tmp_path):
        first = save_lookup(build_lookup(0.2, 129), tmp_path / "a.sngp")
        second = save_lookup(build_lookup(0.2, 129), tmp_path / "b.sngp")
        assert first.read_bytes() == second.read_bytes()

    def test_truncated_file(self, coarse_table, tmp_path):
        path = save_lookup(coarse_table, tmp_path / "t.sngp")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="length check"):
            load_lookup(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.sngp"
        path.write_bytes(b"SNGP")
        with pytest.raises(FormatError, match="truncated header"):
            load_lookup(path)

    def test_bad_magic(self, coarse_table, tmp_path):
        path = save_lookup(coarse_table, tmp_path / "m.sngp")
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FormatError, match="bad magic"):
            load_lookup(path)

    def test_non_monotone_body(self, coarse_table, tmp_path):
        path = save_lookup(coarse_table, tmp_path / "n.sngp")
        raw = bytearray(path.read_bytes())
        n = len(coarse_table)
        body = np.frombuffer(bytes(raw[-8 * n:]), dtype="<f8").copy()
        mid = n // 2
        body[[mid, mid + 1]] = body[[mid + 1, mid]]
        raw[-8 * n:] = body.astype("<f8").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="monotonicity"):
            load_lookup(path)
