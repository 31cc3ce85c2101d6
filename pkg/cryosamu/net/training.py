"""
Loss, optimisation step and the desk-scale training loops.
"""

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, List, Optional, Sequence, Tuple, Union
import copy
import logging
import math
import pathlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor
from torch.optim.lr_scheduler import CosineAnnealingLR

from ..lib import NetworkError, TrainingError
from ..mapio import DensityMap
from ..pooling import random_embedding
from ..simulate import derive_params, simulate_map
from ..structure import ProteinStructure, structure_from_records
from ..tiling import partition, plan_for
from ..volume import AugmentConfig, augment, normalize, resample
from .unet import CryoSamuUNet, EVAL, ModelConfig, TRAIN, init_model, unet_forward

if TYPE_CHECKING:
    from ..config import PipelineConfig

logger = logging.getLogger(__name__)


@dataclass
class LossValue:
    value: Tensor
    per_voxel: Optional[Tensor] = None

    def __float__(self):
        return float(self.value.detach())


def smooth_l1(X: Tensor, Y: Tensor, keep_per_voxel: bool = False) -> LossValue:
    """0.5 (X - Y)^2 where |X - Y| < 1, |X - Y| - 0.5 elsewhere; mean-reduced."""
    if X.shape != Y.shape:
        raise NetworkError(f"Loss inputs differ in shape: {tuple(X.shape)} vs {tuple(Y.shape)}")
    per_voxel = F.smooth_l1_loss(X, Y, reduction="none", beta=1.0)
    return LossValue(
        value=per_voxel.mean(),
        per_voxel=per_voxel.detach() if keep_per_voxel else None,
    )


@dataclass
class TrainState:
    model: CryoSamuUNet
    optimizer: torch.optim.Optimizer
    scheduler: CosineAnnealingLR
    step: int = 0


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    lr: float


def make_train_state(model: CryoSamuUNet, lr: float = 1e-4, weight_decay: float = 0.01,
                     total_steps: int = 1) -> TrainState:
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    scheduler = CosineAnnealingLR(optimizer, T_max=max(int(total_steps), 1))
    return TrainState(model=model, optimizer=optimizer, scheduler=scheduler)


def clip_gradients(parameters: Iterable[Tensor], max_norm: float) -> float:
    """Global-norm clipping; returns the norm before clipping."""
    return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))


def train_step(state: TrainState, batch: Tuple[Tensor, Tensor, Optional[Tensor]],
               clip: float = 0.5, bypass: bool = False) -> StepResult:
    x, y, emb = batch
    lr = state.optimizer.param_groups[0]["lr"]
    state.optimizer.zero_grad(set_to_none=True)

    out = unet_forward(x, emb, state.model, mode=TRAIN, bypass=bypass)
    loss = smooth_l1(out, y)
    if not torch.isfinite(loss.value):
        raise TrainingError(
            f"Non-finite loss at step {state.step} (lr {lr}); input range "
            f"[{float(x.min())}, {float(x.max())}], output range "
            f"[{float(out.min())}, {float(out.max())}]")

    loss.value.backward()
    grad_norm = clip_gradients(state.model.parameters(), clip)
    state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    return StepResult(loss=float(loss), grad_norm=grad_norm, lr=lr)


# ############################### Toy problem ############################### #

# (chain, residue, seq, atom, element, x, y, z): a Gly-Ala-Gly fragment
TOY_PEPTIDE = [
    ("A", "GLY", 1, "N", "N", 4.0, 6.0, 8.0),
    ("A", "GLY", 1, "CA", "C", 5.2, 6.8, 8.0),
    ("A", "GLY", 1, "C", "C", 6.4, 6.0, 8.2),
    ("A", "GLY", 1, "O", "O", 6.4, 4.8, 8.4),
    ("A", "ALA", 2, "N", "N", 7.6, 6.7, 8.0),
    ("A", "ALA", 2, "CA", "C", 8.8, 6.0, 7.8),
    ("A", "ALA", 2, "C", "C", 10.0, 6.8, 8.0),
    ("A", "ALA", 2, "O", "O", 10.0, 8.0, 8.3),
    ("A", "ALA", 2, "CB", "C", 8.8, 5.0, 6.6),
    ("A", "GLY", 3, "N", "N", 11.2, 6.1, 7.9),
    ("A", "GLY", 3, "CA", "C", 12.4, 6.8, 8.0),
    ("A", "GLY", 3, "C", "C", 13.6, 6.0, 8.1),
    ("A", "GLY", 3, "O", "O", 13.6, 4.8, 8.3),
]


def toy_structure() -> ProteinStructure:
    return structure_from_records(TOY_PEPTIDE, source_id="toy")


def toy_pair(cfg: ModelConfig, seed: int = 0) -> Tuple[Tensor, Tensor, Tensor]:
    """
    One synthetic (input, target, embedding) example: the target is the
    normalized simulation of the toy peptide on a cube_size^3 1 A grid, the
    input a blurred and noised copy.
    """
    size = cfg.cube_size
    grid = DensityMap(np.zeros((size,) * 3), voxel_size=(1.0, 1.0, 1.0))
    target, _ = normalize(simulate_map(toy_structure(), derive_params(2.0), grid=grid).map)
    noisy = augment(target.data, seed, AugmentConfig(noise_std=(0.05, 0.05),
                                                     blur_sigma=(1.5, 1.5)))
    x = torch.from_numpy(noisy.astype(np.float32))[None, None]
    y = torch.from_numpy(target.data.astype(np.float32))[None, None]
    emb = torch.from_numpy(random_embedding(cfg.embed_len, cfg.embed_dim, seed))[None]
    return x, y, emb


def train_toy(seed: int = 0, steps: int = 200, lr: float = 2e-3,
              cfg: Optional[ModelConfig] = None) -> Tuple[CryoSamuUNet, List[float]]:
    """Overfit one toy pair; returns the model and the per-step losses."""
    cfg = cfg or ModelConfig.toy(dropout_p=0.0, embed_dim=64, embed_len=32)
    torch.manual_seed(seed)
    model = init_model(cfg, seed)
    state = make_train_state(model, lr=lr, total_steps=steps)
    batch = toy_pair(cfg, seed)

    losses = []
    for step in range(steps):
        result = train_step(state, batch)
        losses.append(result.loss)
        if step % 20 == 0 or step == steps - 1:
            logger.info(f"step {step:4d}  loss {result.loss:.6f}  "
                        f"grad-norm {result.grad_norm:.4f}  lr {result.lr:.2e}")
    return model, losses


# ############################ Paired cube data ############################# #

@dataclass
class PairSet:
    inputs: np.ndarray
    targets: np.ndarray
    embeddings: Optional[np.ndarray] = None
    embedding_index: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.inputs)

    def subset(self, index: np.ndarray) -> "PairSet":
        return PairSet(
            inputs=self.inputs[index],
            targets=self.targets[index],
            embeddings=self.embeddings,
            embedding_index=None if self.embedding_index is None else self.embedding_index[index],
        )


def prepare_pairs(exp_map: DensityMap, structure: ProteinStructure, cfg: "PipelineConfig",
                  embedding: Optional[np.ndarray] = None) -> PairSet:
    """
    Resample and normalize the experimental map, simulate its target on the
    same grid, and cut both with one plan. Cubes with an empty target are
    dropped.
    """
    exp = resample(exp_map, cfg.target_voxel)
    exp, _ = normalize(exp, cfg.percentile, cfg.percentile_include_zeros)
    params = derive_params(cfg.resolution, cfg.target_voxel)
    target, _ = normalize(simulate_map(structure, params, grid=exp).map,
                          cfg.percentile, cfg.percentile_include_zeros)

    plan = plan_for(exp, cfg.cube_size, cfg.core_size, cfg.pad)
    exp_cubes = partition(exp, plan).cubes
    tgt_cubes = partition(target, plan).cubes
    keep = tgt_cubes.reshape(len(tgt_cubes), -1).max(axis=1) > 0
    logger.info(f"{structure.source_id}: kept {int(keep.sum())} of {len(keep)} cube pairs")

    pairs = PairSet(inputs=exp_cubes[keep].astype(np.float32),
                    targets=tgt_cubes[keep].astype(np.float32))
    if embedding is not None:
        pairs.embeddings = np.asarray(embedding, dtype=np.float32)[None]
        pairs.embedding_index = np.zeros(len(pairs), dtype=np.int64)
    return pairs


def save_pairs(path: Union[str, pathlib.Path], pairs: PairSet):
    arrays = {"inputs": pairs.inputs, "targets": pairs.targets}
    if pairs.embeddings is not None:
        arrays["embeddings"] = pairs.embeddings
        arrays["embedding_index"] = pairs.embedding_index
    np.savez_compressed(path, **arrays)


def load_pairs(paths: Sequence[Union[str, pathlib.Path]]) -> PairSet:
    """Concatenate pair archives; embeddings are kept only if every archive has one."""
    inputs, targets, embeddings, index = [], [], [], []
    for path in paths:
        try:
            with np.load(path, allow_pickle=False) as archive:
                inputs.append(archive["inputs"])
                targets.append(archive["targets"])
                if "embeddings" in archive:
                    index.append(archive["embedding_index"] + sum(len(e) for e in embeddings))
                    embeddings.append(archive["embeddings"])
        except (ValueError, EOFError, KeyError, AttributeError, TypeError) as e:
            raise TrainingError(f"{path}: not a pair archive ({e!r})")
    if not inputs:
        raise TrainingError("No training pairs given")
    with_embeddings = len(embeddings) == len(inputs)
    return PairSet(
        inputs=np.concatenate(inputs),
        targets=np.concatenate(targets),
        embeddings=np.concatenate(embeddings) if with_embeddings else None,
        embedding_index=np.concatenate(index) if with_embeddings else None,
    )


def _batch(pairs: PairSet, index: np.ndarray, rng: Optional[np.random.Generator] = None,
           augmentation: Optional[AugmentConfig] = None):
    inputs = pairs.inputs[index]
    if augmentation is not None and rng is not None:
        inputs = np.stack([augment(c, int(rng.integers(2**31)), augmentation) for c in inputs])
    x = torch.from_numpy(inputs.astype(np.float32))[:, None]
    y = torch.from_numpy(pairs.targets[index].astype(np.float32))[:, None]
    emb = None
    if pairs.embeddings is not None:
        emb = torch.from_numpy(pairs.embeddings[pairs.embedding_index[index]])
    return x, y, emb


def evaluate(model: CryoSamuUNet, pairs: PairSet, batch_size: int) -> float:
    """Mean validation loss in eval (bypass) mode."""
    total = 0.0
    for start in range(0, len(pairs), batch_size):
        index = np.arange(start, min(start + batch_size, len(pairs)))
        x, y, _ = _batch(pairs, index)
        total += float(smooth_l1(unet_forward(x, None, model, mode=EVAL), y)) * len(index)
    return total / max(len(pairs), 1)


@dataclass
class FitResult:
    model: CryoSamuUNet
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[Tuple[int, float]] = field(default_factory=list)
    best_val: float = math.inf


def fit(pairs: PairSet, cfg: "PipelineConfig", steps: int, val_fraction: float = 0.1,
        eval_every: int = 50, augmentation: Optional[AugmentConfig] = None,
        model: Optional[CryoSamuUNet] = None) -> FitResult:
    """
    Train on cube pairs with AdamW, cosine annealing and gradient clipping;
    validate in eval mode and keep the best-validation weights.
    """
    if len(pairs) < 2:
        raise TrainingError(f"Need at least two cube pairs, got {len(pairs)}")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)

    order = rng.permutation(len(pairs))
    n_val = min(max(1, int(round(val_fraction * len(pairs)))), len(pairs) - 1)
    val, train = pairs.subset(np.sort(order[:n_val])), pairs.subset(np.sort(order[n_val:]))
    logger.info(f"Training on {len(train)} cube pairs, validating on {len(val)}")

    model = model or init_model(cfg.model, cfg.seed)
    state = make_train_state(model, cfg.learning_rate, cfg.weight_decay, steps)
    result = FitResult(model=model)
    best_state = copy.deepcopy(model.state_dict())

    for step in range(steps):
        index = rng.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False)
        x, y, emb = _batch(train, index, rng, augmentation)
        step_result = train_step(state, (x, y, emb), clip=cfg.clip, bypass=emb is None)
        result.train_losses.append(step_result.loss)

        if (step + 1) % eval_every == 0 or step == steps - 1:
            val_loss = evaluate(model, val, cfg.batch_size)
            result.val_losses.append((step + 1, val_loss))
            logger.info(f"step {step + 1:5d}  train {step_result.loss:.6f}  "
                        f"val {val_loss:.6f}  lr {step_result.lr:.2e}")
            if val_loss < result.best_val:
                result.best_val = val_loss
                best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    return result
