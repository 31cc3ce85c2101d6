"""
Weight store: a JSON manifest plus a little-endian float32 blob.

manifest.json:
    {"format_version": "1.0", "dtype": "float32", "byteorder": "little",
     "model": {<ModelConfig>},
     "parameters": [{"name": .., "shape": [..], "offset": <float32 index>}, ..],
     "total": <float32 count>}
weights.bin: parameters concatenated in manifest order, C order.
"""

from collections import OrderedDict
from typing import Dict, Optional, Tuple, Union
import json
import logging
import pathlib

import numpy as np
import torch
from packaging import version

from ..constants import (
    WEIGHTS_BLOB_NAME,
    WEIGHTS_FORMAT_VERSION,
    WEIGHTS_MANIFEST_NAME,
)
from ..lib import WeightsError
from .unet import CryoSamuUNet, ModelConfig

logger = logging.getLogger(__name__)

ModelWeights = Dict[str, torch.Tensor]


def save_weights(model: CryoSamuUNet, path: Union[str, pathlib.Path]):
    path = pathlib.Path(path)
    path.mkdir(parents=True, exist_ok=True)

    entries, offset, chunks = [], 0, []
    for name, tensor in model.state_dict().items():
        values = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").ravel()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += values.size
        chunks.append(values)

    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob.tofile(path / WEIGHTS_BLOB_NAME)
    manifest = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "dtype": "float32",
        "byteorder": "little",
        "model": model.cfg.to_dict(),
        "parameters": entries,
        "total": int(offset),
    }
    (path / WEIGHTS_MANIFEST_NAME).write_text(json.dumps(manifest, indent=4) + "\n")
    logger.info(f"Saved {len(entries)} parameter tensors ({offset} values) to {path}")


def read_weights(path: Union[str, pathlib.Path]) -> Tuple["OrderedDict[str, torch.Tensor]", ModelConfig]:
    path = pathlib.Path(path)
    manifest_path = path / WEIGHTS_MANIFEST_NAME
    if not manifest_path.exists():
        raise WeightsError(f"weights manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        fmt = version.parse(str(manifest["format_version"]))
        entries = [
            {"name": str(e["name"]), "shape": [int(s) for s in e["shape"]], "offset": int(e["offset"])}
            for e in manifest["parameters"]
        ]
        cfg = ModelConfig.from_dict(manifest["model"])
    except (ValueError, KeyError, TypeError, version.InvalidVersion) as e:
        raise WeightsError(f"Malformed weights manifest {manifest_path}: {e}")

    if fmt.major != version.parse(WEIGHTS_FORMAT_VERSION).major:
        raise WeightsError(
            f"{manifest_path}: format version {fmt} is not compatible with "
            f"{WEIGHTS_FORMAT_VERSION}")
    if manifest.get("dtype") != "float32" or manifest.get("byteorder") != "little":
        raise WeightsError(f"{manifest_path}: only little-endian float32 blobs are supported")

    blob_path = path / WEIGHTS_BLOB_NAME
    if not blob_path.exists():
        raise WeightsError(f"weights blob not found: {blob_path}")
    blob = np.fromfile(blob_path, dtype="<f4")
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries)
    if blob.size != expected or blob.size != manifest.get("total", expected):
        raise WeightsError(
            f"{blob_path}: holds {blob.size} values, manifest describes {expected}")

    state = OrderedDict()
    for entry in entries:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = int(entry["offset"])
        if start + n > blob.size:
            raise WeightsError(f"{blob_path}: parameter {entry['name']} runs past the blob")
        values = blob[start:start + n].reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(values.astype(np.float32))
    return state, cfg


def load_weights(path: Union[str, pathlib.Path],
                 cfg: Optional[ModelConfig] = None) -> CryoSamuUNet:
    """
    Build a model from a weights directory. When `cfg` is given, the stored
    parameters must match the model it describes exactly.
    """
    state, stored_cfg = read_weights(path)
    model = CryoSamuUNet(cfg or stored_cfg)

    expected = model.state_dict()
    for name, tensor in expected.items():
        if name not in state:
            raise WeightsError(f"{path}: parameter {name} missing from the weights")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise WeightsError(
                f"{path}: parameter {name} has shape {tuple(state[name].shape)}, "
                f"model expects {tuple(tensor.shape)}")
    extra = [name for name in state if name not in expected]
    if extra:
        raise WeightsError(f"{path}: unexpected parameter {extra[0]}")

    model.load_state_dict(state)
    logger.info(f"Loaded {len(state)} parameter tensors from {path}")
    return model
