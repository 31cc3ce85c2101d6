"""
Fixed-size structural embeddings.

A C x R x d per-chain embedding (zero padded to a common R) is reduced to an
L x d matrix: chains are averaged, weighted by a softmax over their similarity
matrix and pooled; residues are weighted the same way and then selected
(R > L) or repeated (R < L) to reach exactly L rows.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union
import json
import logging
import math
import pathlib

import numpy as np
from scipy.special import softmax

from .constants import DEFAULT_EMBED_LEN, EXTENSIONS
from .lib import EmbeddingFormatError, PoolingError, REPORT_SCHEMA_VERSION

logger = logging.getLogger(__name__)

SOFTMAX_AXES = {"row": 1, "column": 0}


@dataclass
class EmbeddingSet:
    tensor: np.ndarray
    chain_lengths: List[int]
    chain_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        if self.tensor.ndim != 3 or min(self.tensor.shape) < 1:
            raise PoolingError(
                f"Embeddings must be a non-empty C x R x d array, got {self.tensor.shape}")
        C, R, _ = self.tensor.shape
        if len(self.chain_lengths) != C:
            raise PoolingError(f"{len(self.chain_lengths)} chain lengths for {C} chains")
        for i, n in enumerate(self.chain_lengths):
            if not 0 <= n <= R:
                raise PoolingError(f"Chain {i} length {n} outside [0, {R}]")
            if np.any(self.tensor[i, n:, :] != 0):
                raise PoolingError(f"Chain {i} has non-zero values past its length {n}")
        if not self.chain_ids:
            self.chain_ids = [str(i) for i in range(C)]

    @property
    def d(self) -> int:
        return self.tensor.shape[2]

    @property
    def n_chains(self) -> int:
        return self.tensor.shape[0]

    @property
    def n_residues(self) -> int:
        return self.tensor.shape[1]


@dataclass
class ChainWeights:
    S: np.ndarray
    W: np.ndarray
    w: np.ndarray


@dataclass
class PooledEmbedding:
    E_pooled: np.ndarray
    residue_weights: np.ndarray
    E_final: np.ndarray
    selection_map: np.ndarray

    @property
    def L(self) -> int:
        return self.E_final.shape[0]


def chain_mean(E: EmbeddingSet, true_length: bool = False) -> np.ndarray:
    """
    Chain-level embeddings, C x d. The mean runs over the padded residue axis
    (dividing by R) unless `true_length` is set.
    """
    if not true_length:
        return E.tensor.mean(axis=1)
    lengths = np.maximum(np.asarray(E.chain_lengths, dtype=np.float64), 1.0)
    return E.tensor.sum(axis=1) / lengths[:, None]


def attention_weights(X: np.ndarray, softmax_axis: str = "row") -> ChainWeights:
    """Similarity, softmax and row-mean weighting over the rows of X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise PoolingError(f"Expecting a non-empty 2D array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise PoolingError("Embeddings contain non-finite values")
    if softmax_axis not in SOFTMAX_AXES:
        raise PoolingError(
            f"softmax_axis must be one of {sorted(SOFTMAX_AXES)}, got '{softmax_axis}'")

    S = X @ X.T
    W = softmax(S, axis=SOFTMAX_AXES[softmax_axis])
    w = W.mean(axis=1)
    return ChainWeights(S=S, W=W, w=w)


def chain_weights(chain_emb: np.ndarray, softmax_axis: str = "row") -> ChainWeights:
    return attention_weights(chain_emb, softmax_axis)


def pool_chains(E: EmbeddingSet, w: Sequence[float]) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (E.n_chains,):
        raise PoolingError(f"{w.shape[0] if w.ndim else 0} weights for {E.n_chains} chains")
    return np.tensordot(w, E.tensor, axes=(0, 0))


def residue_weights(E_pooled: np.ndarray, softmax_axis: str = "row") -> np.ndarray:
    return attention_weights(E_pooled, softmax_axis).w


def min_max(X: np.ndarray, per_feature: bool = False) -> np.ndarray:
    axis = 0 if per_feature else None
    lo = X.min(axis=axis, keepdims=per_feature)
    span = X.max(axis=axis, keepdims=per_feature) - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(span > 0, (X - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out


def rank_residues(alpha: np.ndarray) -> np.ndarray:
    """Indices by descending weight, ties to the lower index."""
    return np.argsort(-np.asarray(alpha), kind="stable")


def finalize(E_pooled: np.ndarray, alpha: Sequence[float], L: int = DEFAULT_EMBED_LEN,
             per_feature: bool = False) -> PooledEmbedding:
    E_pooled = np.asarray(E_pooled, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    R = E_pooled.shape[0]
    if R < 1 or L < 1:
        raise PoolingError(f"Need R >= 1 and L >= 1, got R={R}, L={L}")
    if alpha.shape != (R,):
        raise PoolingError(f"{alpha.shape} residue weights for {R} residues")

    normalized = min_max(E_pooled, per_feature=per_feature)
    order = rank_residues(alpha)
    if R > L:
        selection = np.sort(order[:L])
    elif R < L:
        selection = np.tile(order, math.ceil(L / R))[:L]
    else:
        selection = np.arange(R)

    return PooledEmbedding(
        E_pooled=E_pooled,
        residue_weights=alpha,
        E_final=normalized[selection],
        selection_map=selection,
    )


def pool_embedding(E: EmbeddingSet, L: int = DEFAULT_EMBED_LEN,
                   softmax_axis: str = "row", true_length: bool = False,
                   per_feature: bool = False) -> PooledEmbedding:
    chains = chain_mean(E, true_length=true_length)
    weights = chain_weights(chains, softmax_axis)
    pooled = pool_chains(E, weights.w)
    alpha = residue_weights(pooled, softmax_axis)
    logger.info(f"Pooled {E.n_chains} chains x {E.n_residues} residues "
                f"(d={E.d}) into {L} rows; chain weights {np.round(weights.w, 4).tolist()}")
    return finalize(pooled, alpha, L, per_feature=per_feature)


def _load_npy(path: pathlib.Path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except (ValueError, EOFError) as e:
        raise EmbeddingFormatError(f"{path}: not a readable .npy array ({e})")


def _chain_layout(chains, manifest: pathlib.Path) -> List[tuple]:
    if not isinstance(chains, list) or not chains:
        raise EmbeddingFormatError(f"{manifest}: 'chains' must be a non-empty list")
    layout = []
    for i, chain in enumerate(chains):
        try:
            n, offset = int(chain["length"]), int(chain["offset"])
            chain_id = str(chain.get("id", i))
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise EmbeddingFormatError(
                f"{manifest}: chain {i} needs integer 'length' and 'offset' ({e!r})")
        if n < 0:
            raise EmbeddingFormatError(f"{manifest}: chain {chain_id} has length {n}")
        layout.append((chain_id, n, offset))
    return layout


def read_embeddings(path: Union[str, pathlib.Path],
                    manifest: Optional[Union[str, pathlib.Path]] = None) -> EmbeddingSet:
    """
    Read a float32 blob described by a JSON manifest
    ({"d": .., "chains": [{"id", "length", "offset"}]}, offsets in float32
    values) or a C x R x d .npy array.
    """
    path = pathlib.Path(path)
    if path.suffix.lstrip(".") == EXTENSIONS.npy:
        tensor = _load_npy(path)
        if tensor.dtype not in (np.float32, np.float64) or tensor.ndim != 3:
            raise EmbeddingFormatError(
                f"{path}: expecting a C x R x d float32/float64 array, "
                f"got {tensor.dtype} {tensor.shape}")
        nonzero = np.any(tensor != 0, axis=2)
        lengths = [int(np.flatnonzero(row)[-1]) + 1 if row.any() else 0 for row in nonzero]
        return EmbeddingSet(tensor=tensor, chain_lengths=lengths)

    if manifest is None:
        raise EmbeddingFormatError(f"{path}: a raw embedding blob needs a manifest")
    manifest = pathlib.Path(manifest)
    try:
        meta = json.loads(manifest.read_text())
        d = int(meta["d"])
        chains = meta["chains"]
    except (ValueError, KeyError, TypeError) as e:
        raise EmbeddingFormatError(f"{manifest}: malformed embedding manifest ({e!r})")
    if d < 1:
        raise EmbeddingFormatError(f"{manifest}: embedding width d={d}")
    layout = _chain_layout(chains, manifest)

    blob = np.fromfile(path, dtype="<f4")
    R = max(max(n for _, n, _ in layout), 1)
    tensor = np.zeros((len(layout), R, d), dtype=np.float64)
    for i, (chain_id, n, offset) in enumerate(layout):
        end = offset + n * d
        if offset < 0 or end > blob.size:
            raise EmbeddingFormatError(
                f"{path}: chain {chain_id} spans values [{offset}, {end}) "
                f"but the blob holds {blob.size}")
        tensor[i, :n, :] = blob[offset:end].reshape(n, d)

    return EmbeddingSet(
        tensor=tensor,
        chain_lengths=[n for _, n, _ in layout],
        chain_ids=[chain_id for chain_id, _, _ in layout],
    )


def write_pooled(path: Union[str, pathlib.Path], pooled: PooledEmbedding):
    """Write E_final as a float32 blob plus a `<path>.json` manifest."""
    path = pathlib.Path(path)
    pooled.E_final.astype("<f4").tofile(path)
    manifest = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "L": int(pooled.E_final.shape[0]),
        "d": int(pooled.E_final.shape[1]),
        "selection_map": pooled.selection_map.tolist(),
        "residue_weights": pooled.residue_weights.tolist(),
    }
    _manifest_path(path).write_text(json.dumps(manifest, indent=4) + "\n")


def read_pooled(path: Union[str, pathlib.Path]) -> np.ndarray:
    """Read an L x d pooled embedding written by `write_pooled` (or a .npy)."""
    path = pathlib.Path(path)
    if path.suffix.lstrip(".") == EXTENSIONS.npy:
        E = _load_npy(path)
    else:
        manifest = _manifest_path(path)
        if not manifest.exists():
            raise EmbeddingFormatError(f"Pooled embedding manifest not found: {manifest}")
        try:
            meta = json.loads(manifest.read_text())
            L, d = int(meta["L"]), int(meta["d"])
        except (ValueError, KeyError, TypeError) as e:
            raise EmbeddingFormatError(f"{manifest}: malformed pooled manifest ({e!r})")
        E = np.fromfile(path, dtype="<f4")
        if L < 1 or d < 1 or E.size != L * d:
            raise EmbeddingFormatError(f"{path}: {E.size} values, manifest says {L} x {d}")
        E = E.reshape(L, d)
    if E.ndim != 2:
        raise EmbeddingFormatError(f"{path}: expecting an L x d array, got {E.shape}")
    return E.astype(np.float32)


def _manifest_path(path: pathlib.Path) -> pathlib.Path:
    return path.with_name(path.name + ".json")


def random_embedding(L: int, d: int, seed: int) -> np.ndarray:
    """Seeded stand-in for a pooled embedding, values in [0, 1]."""
    return np.random.default_rng(seed).random((L, d)).astype(np.float32)
