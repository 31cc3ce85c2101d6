import math
import pathlib

import numpy as np
import pytest

from cryosamu.lib import SimulationError
from cryosamu.mapio import DensityMap
from cryosamu.simulate import derive_params, residue_density, simulate_map
from cryosamu.structure import read_pdb, structure_from_records

DATA = pathlib.Path(__file__).parent / "data"


def _carbon(x=10.0, y=10.0, z=10.0):
    return structure_from_records([("A", "GLY", 1, "CA", "C", x, y, z)])


def _index(density: DensityMap, position):
    xyz = np.rint((np.asarray(position) - density.origin) / density.voxel_size).astype(int)
    return xyz[2], xyz[1], xyz[0]


def test_derived_constants():
    params = derive_params(2.0)
    assert params.k == pytest.approx(math.log(2.0), abs=1e-12)
    assert params.theta == pytest.approx(0.10368, abs=1e-5)
    assert params.cutoff_radius == pytest.approx(4.0 / math.sqrt(math.log(2.0)))


def test_single_carbon_center_and_integral():
    params = derive_params(2.0, 1.0)
    sim = simulate_map(_carbon(), params).map

    center = sim.data[_index(sim, (10.0, 10.0, 10.0))]
    assert center == pytest.approx(6 * params.theta, abs=1e-6)
    assert center == pytest.approx(0.62208, abs=1e-4)
    assert sim.data.max() == center
    assert sim.data.sum() * sim.voxel_volume == pytest.approx(6.0, rel=0.02)


def test_grid_covers_cutoff():
    params = derive_params(3.0)
    sim = simulate_map(_carbon(), params)
    lo, hi = sim.map.extent()
    assert np.all(lo <= 10.0 - params.cutoff_radius)
    assert np.all(hi >= 10.0 + params.cutoff_radius)
    assert sim.map.origin == tuple(np.floor(np.asarray(sim.map.origin)))


def test_simulation_is_linear():
    params = derive_params(2.5)
    a = _carbon(10, 10, 10)
    b = structure_from_records([("B", "SER", 2, "OG", "O", 13.2, 9.1, 11.7)])
    both = structure_from_records([
        ("A", "GLY", 1, "CA", "C", 10.0, 10.0, 10.0),
        ("B", "SER", 2, "OG", "O", 13.2, 9.1, 11.7),
    ])
    grid = DensityMap(np.zeros((30, 30, 30)))
    total = simulate_map(both, params, grid=grid).map.data
    parts = simulate_map(a, params, grid=grid).map.data + simulate_map(b, params, grid=grid).map.data
    assert np.allclose(total, parts, atol=1e-12)


def test_translation_by_whole_voxels():
    params = derive_params(2.0)
    grid = DensityMap(np.zeros((32, 32, 32)))
    structure = read_pdb(DATA / "toy.pdb")
    moved = structure.translated((2.0, 3.0, 1.0))

    before = simulate_map(structure, params, grid=grid).map.data
    after = simulate_map(moved, params, grid=grid).map.data
    assert np.allclose(after[1:, 3:, 2:], before[:-1, :-3, :-2], atol=1e-9)


def test_residue_densities_sum_to_model():
    params = derive_params(2.0)
    structure = read_pdb(DATA / "toy.pdb")
    sim = simulate_map(structure, params).map

    total = np.zeros(sim.shape)
    for chain, residue in structure.residues():
        total += residue_density(structure, chain, residue.seq_id, params, sim).data
    assert np.allclose(total, sim.data, atol=1e-9)


@pytest.mark.parametrize("resolution", [0.0, -1.0, 150.0])
def test_invalid_resolution(resolution):
    with pytest.raises(SimulationError):
        derive_params(resolution)


def test_grid_must_cover_atoms():
    with pytest.raises(SimulationError, match="does not cover"):
        simulate_map(_carbon(50, 50, 50), derive_params(2.0),
                     grid=DensityMap(np.zeros((10, 10, 10))))


def test_unknown_residue():
    structure = _carbon()
    sim = simulate_map(structure, derive_params(2.0)).map
    with pytest.raises(SimulationError, match="unknown residue A:9"):
        residue_density(structure, "A", 9, derive_params(2.0), sim)


def test_density_decays_with_distance():
    params = derive_params(2.0, 1.0)
    sim = simulate_map(_carbon(), params).map
    z, y, x = _index(sim, (10.0, 10.0, 10.0))

    profile = sim.data[z, y, x:]
    assert np.all(np.diff(profile) <= 0)
    r = np.arange(len(profile), dtype=float)
    inside = r <= params.cutoff_radius
    expected = 6 * params.theta * np.exp(-params.k * r[inside] ** 2)
    assert np.allclose(profile[inside], expected, atol=1e-12)
    assert np.all(profile[~inside] == 0.0)


def test_coincident_atoms_double_the_density():
    params = derive_params(2.0)
    grid = DensityMap(np.zeros((20, 20, 20)))
    single = simulate_map(_carbon(), params, grid=grid).map.data
    double = simulate_map(structure_from_records([
        ("A", "GLY", 1, "CA", "C", 10.0, 10.0, 10.0),
        ("A", "GLY", 2, "CA", "C", 10.0, 10.0, 10.0),
    ]), params, grid=grid).map.data
    assert np.array_equal(double, 2 * single)


def test_glycine_integral_is_its_electron_count():
    glycine = structure_from_records([
        ("A", "GLY", 1, "N", "N", 10.0, 10.0, 10.0),
        ("A", "GLY", 1, "CA", "C", 11.45, 10.0, 10.0),
        ("A", "GLY", 1, "C", "C", 12.0, 11.4, 10.0),
        ("A", "GLY", 1, "O", "O", 11.3, 12.4, 10.0),
    ])
    sim = simulate_map(glycine, derive_params(2.0, 1.0)).map
    assert sim.data.sum() * sim.voxel_volume == pytest.approx(6 + 6 + 7 + 8, rel=0.02)


def test_residue_off_the_grid_is_empty(caplog):
    structure = _carbon(50.0, 50.0, 50.0)
    grid = DensityMap(np.zeros((10, 10, 10)))
    with caplog.at_level("WARNING", logger="cryosamu.simulate"):
        density = residue_density(structure, "A", 1, derive_params(2.0), grid)
    assert density.shape == (10, 10, 10)
    assert not density.data.any()
    assert "outside the grid" in caplog.text
