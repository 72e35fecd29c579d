import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lusingrad.errors import LusinError
from lusingrad.forms import (
    ChartAtlas,
    SampledForm,
    exterior_derivative,
    exterior_derivative_fd,
    localize,
    multi_indices,
    nearly_exact,
    reassemble,
    sample_form,
    torus_atlas,
)
from lusingrad.pl_potential import skeleton_crossings


def _exact_sine(p):
    a, b = 2 * np.pi * p[..., 0], 2 * np.pi * p[..., 1]
    return 0.05 * np.stack([np.cos(a) * np.cos(b), -np.sin(a) * np.sin(b)], -1)


@pytest.mark.parametrize("m,k,expected", [(2, 1, ((1,), (2,))), (3, 2, ((1, 2), (1, 3), (2, 3))), (2, 0, ((),))])
def test_multi_indices(m, k, expected):
    assert multi_indices(m, k) == expected


def test_multi_indices_rejects_degree():
    with pytest.raises(LusinError):
        multi_indices(2, 3)


def test_torus_resolution_must_align():
    with pytest.raises(LusinError):
        torus_atlas(60)


# --- partition of unity -----------------------------------------------------------


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=200, deadline=None)
def test_partition_sums_to_one(x, y):
    atlas = torus_atlas(16)
    p = np.array([x, y])
    total = sum(atlas.chi(i, p) for i in range(len(atlas.charts)))
    assert total == pytest.approx(1.0, abs=1e-14)


def test_partition_is_supported_inside_charts(rng):
    atlas = torus_atlas(16)
    p = rng.uniform(0, 1, (20000, 2))
    for i, c in enumerate(atlas.charts):
        y, inside = c.local(p)
        chi = atlas.chi(i, p)
        assert np.all(chi[~inside] == 0.0)
        # a margin of one transition width stays clear of the chart edge
        edge = np.min(np.minimum(y, c.width - y), axis=-1)
        assert np.all(chi[inside & (edge < 0.02)] == 0.0)


def test_atlas_overlaps():
    atlas = torus_atlas(16)
    assert len(atlas.overlaps()) == 6


def test_missing_chart_is_detected():
    atlas = torus_atlas(16)
    broken = ChartAtlas(2, 16, atlas.charts[:3])
    omega = sample_form(_exact_sine, atlas)
    with pytest.raises(LusinError, match="atlas does not cover manifold"):
        localize(omega, broken)


@pytest.mark.parametrize("n", [16, 64])
def test_localize_reassemble_identity(n, rng):
    atlas = torus_atlas(n)
    omega = SampledForm(2, 1, rng.normal(size=(n, n, 2)))
    back = reassemble(localize(omega, atlas), atlas)
    np.testing.assert_allclose(back.values, omega.values, atol=1e-14)


def test_local_forms_vanish_on_chart_edges():
    atlas = torus_atlas(32)
    for cf in localize(sample_form(lambda p: np.ones(p.shape), atlas), atlas):
        v = cf.form.values
        for ax in range(2):
            assert not np.take(v, 0, axis=ax).any()
            assert not np.take(v, -1, axis=ax).any()


# --- nearly exact potentials ----------------------------------------------------------


def test_zero_form():
    atlas = torus_atlas(64)
    cert = nearly_exact(sample_form(lambda p: np.zeros(p.shape), atlas), atlas, 0.1)
    assert not cert.A_cells.any()
    assert cert.residual_sup == 0.0
    # only the certified tube bounds remain
    assert cert.measure_A_bound == cert.tube_bound <= cert.eps
    assert not cert.gamma.value(atlas.torus_points()).any()


def test_only_one_forms():
    atlas = torus_atlas(16)
    with pytest.raises(LusinError):
        nearly_exact(SampledForm(2, 2, np.zeros((16, 16, 1))), atlas, 0.1)


@pytest.fixture(scope="module")
def sine_certificate():
    atlas = torus_atlas(64)
    omega = sample_form(_exact_sine, atlas)
    return omega, nearly_exact(omega, atlas, 0.1)


def test_exact_sine_form(sine_certificate):
    omega, cert = sine_certificate
    assert cert.measure_A_bound <= cert.eps
    assert cert.residual_sup <= cert.tolerance


def test_fd_cross_check(sine_certificate):
    _, cert = sine_certificate
    an = exterior_derivative(cert.gamma).values
    fd = exterior_derivative_fd(cert.gamma, 1e-7).values
    np.testing.assert_allclose(fd, an, atol=1e-6)


def test_dx1_certificate(dx1_certificate):
    omega, cert = dx1_certificate
    assert cert.measure_A_bound <= cert.eps
    assert cert.residual_sup <= cert.tolerance
    assert cert.tolerance == pytest.approx(sum(c.residual_bound for _, c in cert.runs))


def test_dx1_every_horizontal_loop_meets_A(dx1_certificate):
    _, cert = dx1_certificate
    n = cert.atlas.n
    assert all(cert.loop_meets_A(np.array([0.0, (j + 0.5) / n]), 0) for j in range(n))
    assert all(cert.loop_meets_A(np.array([0.0, j / n]), 0) for j in range(n))


def test_in_A_contains_tube_crossings(dx1_certificate):
    _, cert = dx1_certificate
    i, phi = cert.gamma.terms[0]
    c = cert.atlas.charts[i]
    start = c.lo + np.array([0.0, 0.5 * c.width + 0.3 / cert.atlas.n])
    pts = skeleton_crossings(phi, start, 0, c.width)
    assert cert.in_A(np.mod(pts, 1.0)).any()
    # cell centres far from every nonzero simplex are outside A
    assert not cert.in_A(np.array([[0.0, 0.0]]))[0] or cert.A_cells[0, 0]


def test_grid_too_coarse_is_reported_per_chart():
    atlas = torus_atlas(32)
    with pytest.raises(LusinError, match=r"^chart 0 index \(1,\): step 0: "):
        nearly_exact(sample_form(_exact_sine, atlas), atlas, 0.1)
