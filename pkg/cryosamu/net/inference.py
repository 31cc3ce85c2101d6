from dataclasses import dataclass
from typing import TYPE_CHECKING
import logging

import numpy as np
import torch

from ..lib import NetworkError
from ..mapio import DensityMap
from ..tiling import CubeBatch, TilePlan, partition, plan_for, stitch
from ..volume import normalize, resample
from .unet import CryoSamuUNet, EVAL, unet_forward

if TYPE_CHECKING:
    from ..config import PipelineConfig

logger = logging.getLogger(__name__)


@dataclass
class EnhancedMap:
    map: DensityMap
    plan: TilePlan
    scale: float


def predict_cubes(batch: CubeBatch, model: CryoSamuUNet, batch_size: int = 2) -> CubeBatch:
    """Run every cube through the network in eval mode, in plan order."""
    if batch_size < 1:
        raise NetworkError(f"batch_size must be at least 1, got {batch_size}")
    out = np.empty(batch.cubes.shape, dtype=np.float32)
    for start in range(0, len(batch.cubes), batch_size):
        stop = min(start + batch_size, len(batch.cubes))
        x = torch.from_numpy(batch.cubes[start:stop].astype(np.float32))[:, None]
        out[start:stop] = unet_forward(x, None, model, mode=EVAL)[:, 0].numpy()
        logger.debug(f"Predicted cubes {start}..{stop - 1} of {len(batch.cubes)}")
    return CubeBatch(cubes=out, plan=batch.plan, indices=list(batch.indices))


def enhance_map(density: DensityMap, model: CryoSamuUNet, cfg: "PipelineConfig",
                rescale: bool = False) -> EnhancedMap:
    """
    Resample to the working voxel size, normalize, predict cube by cube and
    stitch, then resample the prediction back onto the input grid. With
    `rescale` the output is multiplied by the normalization percentile.
    """
    multiple = model.cfg.size_multiple
    if cfg.cube_size % multiple:
        raise NetworkError(
            f"cube_size {cfg.cube_size} not divisible by the network's {multiple}")

    work = resample(density, cfg.target_voxel)
    work, scale = normalize(work, cfg.percentile, cfg.percentile_include_zeros)
    plan = plan_for(work, cfg.cube_size, cfg.core_size, cfg.pad)
    logger.info(f"Enhancing a {density.dims} map as {len(plan)} cubes of "
                f"{cfg.cube_size}^3 (scale {scale:.4g})")

    predicted = stitch(predict_cubes(partition(work, plan), model, cfg.batch_size), plan)
    out = resample(predicted, density.voxel_size, shape=density.shape)
    data = out.data.astype(np.float32)
    if rescale:
        data = data * np.float32(scale)
    return EnhancedMap(map=density.with_data(data), plan=plan, scale=scale)
