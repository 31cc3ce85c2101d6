import numpy as np
import pytest

from cryosamu.lib import TilingError
from cryosamu.mapio import DensityMap
from cryosamu.tiling import (
    CubeBatch,
    TilePlan,
    load_cubes,
    make_plan,
    partition,
    plan_for,
    save_cubes,
    stitch,
)


@pytest.mark.parametrize("dims, expected", [
    ((50, 50, 50), 1),
    ((100, 100, 100), 8),
    ((1, 60, 120), 1 * 2 * 3),
    ((51, 1, 1), 2),
])
def test_cube_counts(dims, expected):
    assert len(make_plan(dims)) == expected


def test_cube_origins_step_by_core():
    plan = make_plan((120, 10, 10))
    assert sorted({o[0] for o in plan.cube_origins}) == [57, 107, 157]
    assert plan.rim == 7
    assert plan.padded_dims == (248, 138, 138)


def test_core_regions_partition_the_volume():
    plan = make_plan((73, 20, 101), cube_size=16, core_size=10, pad=16)
    owned = np.zeros(plan.original_dims, dtype=int)
    for i in range(len(plan)):
        owned[plan.core_region(i)] += 1
    assert np.all(owned >= 1)


def test_round_trip_random_volumes():
    rng = np.random.default_rng(0)
    for _ in range(200):
        dims = tuple(int(n) for n in rng.integers(1, 161, size=3))
        data = rng.normal(size=dims).astype(np.float32)
        density = DensityMap(data, voxel_size=(1.2, 1.2, 1.2), origin=(4.0, 5.0, 6.0))
        plan = plan_for(density)
        out = stitch(partition(density, plan))

        assert np.array_equal(out.data, data)
        assert out.voxel_size == density.voxel_size
        assert out.origin == density.origin


def test_round_trip_with_small_cubes_and_clamped_tail():
    data = np.random.default_rng(1).normal(size=(23, 17, 11))
    plan = make_plan(data.shape, cube_size=16, core_size=10, pad=3)
    assert np.array_equal(stitch(partition(data, plan)).data, data)


def test_missing_cube():
    data = np.ones((60, 10, 10))
    batch = partition(data, make_plan(data.shape))
    partial = CubeBatch(cubes=batch.cubes[:1], plan=batch.plan, indices=[0])
    assert not partial.complete
    with pytest.raises(TilingError, match="Missing 1 cubes"):
        stitch(partial)


def test_wrong_cube_shape():
    plan = make_plan((10, 10, 10))
    with pytest.raises(TilingError, match="cube size"):
        stitch(CubeBatch(cubes=np.zeros((1, 8, 8, 8)), plan=plan))


@pytest.mark.parametrize("cube, core, pad", [
    (64, 51, 64),   # odd rim
    (64, 70, 64),   # core larger than cube
    (64, 50, 3),    # pad smaller than rim
    (40, 30, 5),    # padded volume smaller than one cube
])
def test_invalid_geometry(cube, core, pad):
    with pytest.raises(TilingError):
        make_plan((10, 10, 10), cube, core, pad)


def test_partition_checks_dims():
    with pytest.raises(TilingError, match="Plan was built"):
        partition(np.zeros((5, 5, 5)), make_plan((6, 5, 5)))


def test_plan_json_round_trip():
    plan = make_plan((30, 70, 20), voxel_size=(1.0, 1.5, 2.0), origin=(1.0, 2.0, 3.0))
    back = TilePlan.from_json(plan.to_json())
    assert back == plan


def test_malformed_plan():
    with pytest.raises(TilingError, match="Malformed"):
        TilePlan.from_json('{"cube_size": 64}')


def test_cubes_on_disk(tmp_path):
    data = np.random.default_rng(2).random((40, 60, 30)).astype(np.float32)
    batch = partition(data, make_plan(data.shape))
    save_cubes(batch, tmp_path)

    plan = TilePlan.from_json((tmp_path / "plan.json").read_text())
    restored = stitch(load_cubes(tmp_path, plan), plan)
    assert np.array_equal(restored.data, data)
