import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate
from scipy.stats import norm

from helpers import tiny_dataset
from stnngp.model import (
    CENSORED,
    MISSING,
    OBSERVED,
    DataError,
    Dataset,
    Grid,
    StationRecord,
    TransformSpec,
    decode,
    decode_latent,
    design_mean,
    encode,
    encode_latent,
    loglik_point,
    loglik_terms,
    mean_value,
    validate_tiers,
)

SPEC = TransformSpec(rain_scale=5.0, tmin_center=8.0, tmin_scale=4.0, range_center=0.0, range_scale=3.0)


def test_rain_zero_is_censored():
    y, f = encode_latent(StationRecord(1, 2000, 1, rain=0.0, tmin=1.0, tmax=4.0), SPEC)
    assert f[0] == CENSORED and f[1] == OBSERVED and f[2] == OBSERVED


def test_equal_temperatures_censor_range():
    _, f = encode_latent(StationRecord(1, 2000, 1, rain=3.0, tmin=5.0, tmax=5.0), SPEC)
    assert f[2] == CENSORED


def test_rain_scaling():
    y, f = encode_latent(StationRecord(1, 2000, 1, rain=10.0, tmin=8.0, tmax=11.0), SPEC)
    assert y[0] == 2.0 and f[0] == OBSERVED
    assert y[1] == 0.0
    assert y[2] == 1.0


def test_missing_inputs_flag_missing():
    _, f = encode_latent(StationRecord(1, 2000, 1, tmin=3.0), SPEC)
    assert_array_equal(f, [MISSING, OBSERVED, MISSING])


def test_bad_records_rejected():
    with pytest.raises(DataError):
        StationRecord(1, 2000, 1, tmin=5.0, tmax=4.0)
    with pytest.raises(DataError):
        StationRecord(1, 2000, 13)
    with pytest.raises(DataError):
        encode([1.0], [5.0], [4.0], SPEC)
    with pytest.raises(DataError):
        encode([-1.0], [5.0], [6.0], SPEC)


def test_transform_spec_validation():
    with pytest.raises(ValueError):
        TransformSpec(0.0, 0.0, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        TransformSpec(1.0, 0.0, 1.0, 2.0, 1.0)
    spec = TransformSpec.from_observations([0.0, 10.0, 20.0], [1.0, 3.0, np.nan], [2.0, 6.0, 8.0])
    assert spec.range_center == 0.0 and spec.rain_scale > 0


def test_decode_examples():
    assert decode_latent([-0.7, 0.0, 1.0], SPEC)[0] == 0.0
    rain, tmin, tmax = decode_latent([1.0, 0.5, 0.0], SPEC)
    assert tmax == tmin == 10.0


@settings(max_examples=300, deadline=None)
@given(st.floats(0.01, 500), st.floats(-30, 30), st.floats(0.01, 25))
def test_round_trip_uncensored(rain, tmin, rng):
    y, f = encode(rain, tmin, tmin + rng, SPEC)
    assert np.all(f == OBSERVED)
    r, a, b = decode(y, SPEC)
    assert_allclose([r[0], a[0], b[0]], [rain, tmin, tmin + rng], rtol=1e-10, atol=1e-10)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_decode_always_physical(y):
    rain, tmin, tmax = decode(np.array([y]), SPEC)
    assert rain[0] >= 0 and tmax[0] >= tmin[0]


def test_mean_value_examples():
    assert mean_value(1, np.zeros((2, 2)), 1.3) == 0.0
    # second response, first region: intercept 0.207, slope -0.747 per km (published x1000 per metre)
    beta = np.array([[0.207, -0.000747 * 1000]])
    assert_allclose(mean_value(1, beta, 1000 / 1000), -0.540, atol=1e-12)
    with pytest.raises(DataError):
        mean_value(3, beta, 0.0)


def test_design_mean_depends_on_region_and_elevation_only():
    rng = np.random.default_rng(0)
    beta = rng.standard_normal((3, 3, 2))
    region = np.array([0, 2, 2, 1])
    elev = np.array([0.1, 0.5, 0.5, 0.9])
    mu = design_mean(beta, region, elev)
    assert_array_equal(mu[1], mu[2])
    for n in range(4):
        for i in range(3):
            assert_allclose(mu[n, i], mean_value(region[n] + 1, beta[:, i], elev[n]), rtol=1e-15)
    # relabelling regions with beta permuted accordingly leaves the mean unchanged
    perm = np.array([2, 0, 1])
    assert_allclose(design_mean(beta[np.argsort(perm)], perm[region], elev), mu, rtol=1e-15)


def test_loglik_trivial_cases():
    flags = np.array([[OBSERVED, CENSORED, MISSING]], dtype=np.int8)
    out = loglik_terms(np.array([[0.0, -3.0, 9.0]]), np.zeros((1, 3)), np.array([1.0, 2.7, 1.0]), flags)
    assert_allclose(out[0, 0], math.log(1 / math.sqrt(2 * math.pi)), rtol=1e-15)
    assert_allclose(out[0, 1], math.log(0.5), rtol=1e-15)
    assert out[0, 2] == 0.0


def test_loglik_censored_matches_quadrature():
    rng = np.random.default_rng(1)
    for _ in range(10):
        mean, om, lam = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
        s2 = rng.uniform(0.1, 2.0, 3)
        y = np.array([0.0, 0.3, 0.0])
        flags = np.array([CENSORED, OBSERVED, CENSORED], dtype=np.int8)
        mu = mean + om + lam
        oracle = 0.0
        for i in (0, 2):
            mass, _ = integrate.quad(lambda x: norm.pdf(x, mu[i], math.sqrt(s2[i])), -np.inf, 0.0,
                                     epsabs=1e-14, epsrel=1e-12)
            oracle += math.log(mass)
        oracle += norm.logpdf(0.3, mu[1], math.sqrt(s2[1]))
        assert_allclose(loglik_point(y, mean, om, lam, s2, flags), oracle, rtol=1e-8)


def test_validate_tiers():
    good = np.array([[1, 1, 1, 1, 1], [1, 2, 2, 3, 3], [1, 2, 3, 2, 2]])
    validate_tiers(good)
    with pytest.raises(DataError, match="contiguous"):
        validate_tiers(np.array([[1, 1, 1, 1, 1], [1, 1, 3, 3, 3]]))
    with pytest.raises(DataError, match="parents"):
        validate_tiers(np.array([[1, 1, 1, 1, 1], [1, 2, 1, 1, 1]]))
    with pytest.raises(DataError):
        validate_tiers(np.array([[2, 1, 1, 1, 1]]))


def test_dataset_csv_round_trip(tmp_path):
    d = tiny_dataset(3, 14)
    d.rain[2] = np.nan
    d.tmin[5] = np.nan
    path = tmp_path / "d.csv"
    d.write_csv(path)
    back = Dataset.read_csv(path)
    assert back.digest() == d.digest()
    assert_array_equal(back.rain, d.rain)
    assert back.n_regions(3) == 2
    assert_array_equal(back.region(3), d.region(3))


def test_dataset_rejects_malformed_rows():
    d = tiny_dataset(2, 3)
    text = d.to_csv_text().splitlines()
    cols = text[3].split(",")
    cols[-1] = str(float(cols[-2]) - 1.0)
    text[3] = ",".join(cols)
    with pytest.raises(DataError, match="line 4"):
        Dataset.from_csv_text("\n".join(text))
    with pytest.raises(DataError, match="missing columns"):
        Dataset.from_csv_text("site_id,year\n1,2000\n")
    with pytest.raises(DataError, match="duplicate"):
        d.take([0, 0])


def test_dataset_site_attributes_must_be_constant():
    d = tiny_dataset(2, 3)
    east = d.easting.copy()
    east[1] += 1.0
    with pytest.raises(DataError, match="easting"):
        Dataset(d.site_id, east, d.northing, d.elevation_m, d.tiers, d.year, d.month, d.rain, d.tmin, d.tmax)


def test_grid_round_trip(tmp_path):
    g = Grid(np.array([1, 2]), np.array([0.5, 3.0]), np.array([1.0, 2.0]), np.array([100.0, 250.0]),
             np.array([[1, 1, 1, 1], [2, 2, 2, 2]]))
    g.write_csv(tmp_path / "g.csv")
    back = Grid.read_csv(tmp_path / "g.csv")
    assert_array_equal(back.tiers, g.tiers)
    assert_array_equal(back.easting, g.easting)
    (tmp_path / "empty.csv").write_text("site_id,easting_km,northing_km,elevation_m,z2,z3,z4,z5\n")
    with pytest.raises(DataError):
        Grid.read_csv(tmp_path / "empty.csv")
