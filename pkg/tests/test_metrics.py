import math
import pathlib

import numpy as np
import pytest
from scipy import fft

from cryosamu.lib import MetricsError
from cryosamu.mapio import DensityMap
from cryosamu.metrics import (
    ResidueScore,
    RsccReport,
    cc_box,
    cc_peaks,
    cc_report,
    cc_volume,
    fsc,
    pearson,
    rscc,
)
from cryosamu.simulate import derive_params, simulate_map
from cryosamu.structure import read_pdb, structure_from_records

DATA = pathlib.Path(__file__).parent / "data"


def _naive_pearson(a, b):
    a, b = list(map(float, np.ravel(a))), list(map(float, np.ravel(b)))
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    sab = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    saa = sum((x - ma) ** 2 for x in a)
    sbb = sum((y - mb) ** 2 for y in b)
    return sab / math.sqrt(saa * sbb)


def _pair(rng, shape=(6, 6, 6)):
    return DensityMap(rng.normal(size=shape)), DensityMap(rng.normal(size=shape))


def test_cc_box_trivial_cases():
    a, _ = _pair(np.random.default_rng(0))
    assert cc_box(a, a) == pytest.approx(1.0, abs=1e-9)
    assert cc_box(a, a.with_data(-a.data)) == pytest.approx(-1.0, abs=1e-9)


def test_cc_box_matches_two_pass_oracle():
    a, b = _pair(np.random.default_rng(1))
    assert cc_box(a, b) == pytest.approx(_naive_pearson(a.data, b.data), abs=1e-9)


def test_correlations_ignore_positive_affine_maps():
    a, b = _pair(np.random.default_rng(2))
    scaled = b.with_data(3.5 * b.data + 2.0)
    assert cc_box(a, scaled) == pytest.approx(cc_box(a, b), abs=1e-9)
    assert cc_peaks(a, scaled, 0.2)[0] == pytest.approx(cc_peaks(a, b, 0.2)[0], abs=1e-9)


def test_cc_peaks_full_fraction_is_cc_box():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, b = _pair(rng, tuple(int(n) for n in rng.integers(2, 6, size=3)))
        value, n = cc_peaks(a, b, 1.0)
        assert value == pytest.approx(cc_box(a, b), abs=1e-9)
        assert n == a.data.size


def test_cc_peaks_matches_union_oracle():
    a, b = _pair(np.random.default_rng(4))
    flat_a, flat_b = a.data.ravel(), b.data.ravel()
    k = math.ceil(0.1 * flat_a.size)
    top_a = sorted(range(flat_a.size), key=lambda i: (-flat_a[i], i))[:k]
    top_b = sorted(range(flat_b.size), key=lambda i: (-flat_b[i], i))[:k]
    union = sorted(set(top_a) | set(top_b))

    value, n = cc_peaks(a, b, 0.1)
    assert n == len(union)
    assert value == pytest.approx(_naive_pearson(flat_a[union], flat_b[union]), abs=1e-9)


def test_cc_volume_hand_built_case():
    structure = structure_from_records([("A", "GLY", 1, "CA", "C", 3.5, 3.5, 3.5)])
    grid = DensityMap(np.zeros((8, 8, 8)))
    model = simulate_map(structure, derive_params(2.0), grid=grid).map
    exp = grid.with_data(np.random.default_rng(5).normal(size=(8, 8, 8)))

    points = []
    for z in range(8):
        for y in range(8):
            for x in range(8):
                if math.dist((x, y, z), (3.5, 3.5, 3.5)) <= 2.0:
                    points.append(z * 64 + y * 8 + x)
    assert len(points) == 32
    chosen = sorted(points, key=lambda i: (-model.data.ravel()[i], i))[:16]

    value, n = cc_volume(exp, model, structure, radius=2.0, v_atom=16.0)
    assert n == 16
    assert value == pytest.approx(
        _naive_pearson(exp.data.ravel()[chosen], model.data.ravel()[chosen]), abs=1e-9)


def test_cc_volume_of_model_with_itself():
    structure = read_pdb(DATA / "toy.pdb")
    params = derive_params(2.0)
    model = simulate_map(structure, params).map
    value, n = cc_volume(model, model, structure, params.cutoff_radius)
    assert value == pytest.approx(1.0, abs=1e-9)
    assert n == round(structure.n_atoms * 16.0)


def test_cc_volume_needs_points():
    structure = structure_from_records([("A", "GLY", 1, "CA", "C", 1.0, 1.0, 1.0)])
    grid = DensityMap(np.ones((4, 4, 4)), voxel_size=(4.0, 4.0, 4.0))
    with pytest.raises(MetricsError, match="select 0 points"):
        cc_volume(grid, grid, structure, radius=2.0)


def test_cc_report_collects_all_metrics():
    structure = read_pdb(DATA / "toy.pdb")
    params = derive_params(2.0)
    model = simulate_map(structure, params).map
    noisy = model.with_data(model.data + np.random.default_rng(6).normal(scale=0.01,
                                                                        size=model.shape))
    report = cc_report(noisy, model, structure, params)
    assert set(report.n_points) == {"cc_box", "cc_volume", "cc_peaks"}
    assert 0.9 < report.cc_box < 1.0
    assert "cc_volume" in report.to_text()


def test_mismatched_grids():
    with pytest.raises(MetricsError, match="different grids"):
        cc_box(DensityMap(np.ones((2, 2, 2))), DensityMap(np.ones((2, 2, 3))))


def test_zero_variance():
    with pytest.raises(MetricsError, match="Zero variance"):
        pearson(np.ones(5), np.arange(5))


def test_fsc_self_is_one_and_flags_nyquist():
    density = DensityMap(np.random.default_rng(7).normal(size=(16, 16, 16)),
                         voxel_size=(1.5, 1.5, 1.5))
    curve = fsc(density, density)
    assert np.allclose(curve.fsc, 1.0, atol=1e-9)
    assert curve.at_nyquist and not curve.crossed
    assert curve.fsc05 == pytest.approx(3.0)
    assert len(curve.shell_centers) == 9
    assert np.all(np.diff(curve.shell_centers) > 0)


def test_fsc_is_symmetric():
    a, b = _pair(np.random.default_rng(8), (12, 12, 12))
    assert np.allclose(fsc(a, b).fsc, fsc(b, a).fsc, atol=1e-12)


def test_fsc_pads_non_cubic_maps():
    a, b = _pair(np.random.default_rng(9), (10, 12, 7))
    assert len(fsc(a, b).fsc) == 12 // 2 + 1


def test_fsc_of_independent_noise_is_small():
    a, b = _pair(np.random.default_rng(10), (64, 64, 64))
    curve = fsc(a, b)
    assert np.all(np.abs(curve.fsc[8:]) < 0.2)
    assert curve.crossed


def test_fsc_band_limited_pair():
    n, cutoff = 32, 8
    rng = np.random.default_rng(11)
    a = rng.normal(size=(n, n, n))
    f = fft.fftfreq(n) * n
    fz, fy, fx = np.meshgrid(f, f, f, indexing="ij")
    low = np.rint(np.sqrt(fx ** 2 + fy ** 2 + fz ** 2)) < cutoff
    mixed = np.where(low, fft.fftn(a), fft.fftn(rng.normal(size=(n, n, n))))
    b = np.real(fft.ifftn(mixed))

    curve = fsc(DensityMap(a), DensityMap(b))
    assert np.allclose(curve.fsc[1:cutoff], 1.0, atol=1e-6)
    assert curve.crossed
    assert abs(1.0 / curve.fsc05 - cutoff / n) <= 1.0 / n


def test_rscc_of_self_simulation_is_one():
    structure = read_pdb(DATA / "toy.pdb")
    params = derive_params(2.0)
    exp = simulate_map(structure, params).map
    report = rscc(exp, structure, params)

    assert len(report.residues) == 3
    assert all(s.rscc == pytest.approx(1.0, abs=1e-6) for s in report.residues)
    assert list(report.chain_means()) == ["A", "B"]


def test_rscc_with_small_noise():
    structure = read_pdb(DATA / "toy.pdb")
    params = derive_params(2.0)
    exp = simulate_map(structure, params).map
    noise = np.random.default_rng(12).normal(scale=0.01 * exp.data.max(), size=exp.shape)
    report = rscc(exp.with_data(exp.data + noise), structure, params)
    assert all(0.9 < s.rscc < 1.0 for s in report.residues)


def test_rscc_residue_reference_for_separated_residues():
    structure = structure_from_records([
        ("A", "GLY", 1, "CA", "C", 8.0, 8.0, 8.0),
        ("A", "GLY", 1, "O", "O", 9.2, 8.0, 8.0),
        ("A", "GLY", 2, "CA", "C", 28.0, 8.0, 8.0),
        ("A", "GLY", 2, "O", "O", 29.2, 8.0, 8.0),
    ])
    params = derive_params(2.0)
    exp = simulate_map(structure, params).map
    report = rscc(exp, structure, params, reference="residue")
    assert all(s.rscc == pytest.approx(1.0, abs=1e-9) for s in report.residues)


def test_rscc_small_support_is_absent():
    structure = read_pdb(DATA / "toy.pdb")
    params = derive_params(2.0)
    exp = simulate_map(structure, params).map
    report = rscc(exp, structure, params, min_support=10 ** 6)
    assert len(report.absent) == 3
    assert report.chain_means() == {"A": None, "B": None}


def test_improved_fraction_ties_do_not_count():
    def _report(values):
        return RsccReport([ResidueScore("A", i, "", "GLY", v, 20) for i, v in enumerate(values)])

    baseline = _report([0.5, 0.6, 0.7, None])
    assert baseline.improved_fraction(baseline) == 0.0
    assert _report([0.6, 0.6, 0.65, 0.9]).improved_fraction(baseline) == pytest.approx(1 / 3)
    with pytest.raises(MetricsError):
        _report([None]).improved_fraction(baseline)


def test_fsc_skips_shells_without_power():
    # varies along x at one frequency only, so every shell past 1 is empty
    data = np.broadcast_to(np.array([1.0, 2.0, 1.0, 0.0]), (4, 4, 4)).copy()
    density = DensityMap(data)
    curve = fsc(density, density)

    assert curve.at_nyquist and not curve.crossed
    assert curve.fsc05 == pytest.approx(2.0)
    assert curve.fsc[1] == pytest.approx(1.0)
    assert np.isnan(curve.fsc[2]) or curve.fsc[2] == pytest.approx(1.0)
    shells = curve.to_dict()["shells"]
    assert all(s["fsc"] is None or np.isfinite(s["fsc"]) for s in shells)


def test_fsc_of_empty_maps_is_undefined():
    empty = DensityMap(np.zeros((6, 6, 6)))
    curve = fsc(empty, empty)
    assert np.all(np.isnan(curve.fsc))
    assert not curve.crossed
    assert all(s["fsc"] is None for s in curve.to_dict()["shells"])


def test_fsc_against_an_empty_map_crosses_at_once():
    a = DensityMap(np.random.default_rng(12).normal(size=(8, 8, 8)))
    curve = fsc(a, a.with_data(np.zeros((8, 8, 8))))
    assert np.all(curve.fsc == 0.0)
    assert curve.crossed
    assert curve.fsc05 == pytest.approx(8.0)
