import pathlib

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from cryosamu.config import PipelineConfig
from cryosamu.lib import NetworkError, TrainingError
from cryosamu.net.training import (
    PairSet,
    clip_gradients,
    fit,
    load_pairs,
    make_train_state,
    prepare_pairs,
    save_pairs,
    smooth_l1,
    toy_pair,
    train_step,
    train_toy,
)
from cryosamu.net.unet import ModelConfig, init_model
from cryosamu.pooling import random_embedding
from cryosamu.simulate import derive_params, simulate_map
from cryosamu.structure import read_pdb

DATA = pathlib.Path(__file__).parent / "data"


def _small_pipeline(**overrides) -> PipelineConfig:
    cfg = PipelineConfig(
        cube_size=16, core_size=10, pad=16, batch_size=2, learning_rate=1e-3,
        model=ModelConfig.toy(dropout_p=0.0, embed_dim=16, embed_len=8),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg.validate()


@pytest.mark.parametrize("difference, expected", [
    (0.0, 0.0),
    (1.0, 0.5),
    (-1.0, 0.5),
    (2.0, 1.5),
    (0.5, 0.125),
])
def test_smooth_l1_values(difference, expected):
    X = torch.full((2, 3), 1.0 + difference)
    Y = torch.ones(2, 3)
    assert float(smooth_l1(X, Y)) == pytest.approx(expected)


def test_smooth_l1_gradient_away_from_knee():
    X = torch.tensor([0.3, -0.4, 2.5, -3.0], dtype=torch.float64, requires_grad=True)
    Y = torch.zeros(4, dtype=torch.float64)
    assert gradcheck(lambda x: smooth_l1(x, Y).value, (X,), rtol=1e-4)


def test_smooth_l1_shape_mismatch():
    with pytest.raises(NetworkError, match="differ in shape"):
        smooth_l1(torch.zeros(2), torch.zeros(3))


def test_clip_gradients_rescales_to_max_norm():
    p = torch.nn.Parameter(torch.zeros(2))
    p.grad = torch.tensor([3.0, 4.0])
    assert clip_gradients([p], 0.5) == pytest.approx(5.0)
    assert p.grad.norm().item() == pytest.approx(0.5, rel=1e-5)


def test_zero_learning_rate_leaves_weights():
    cfg = ModelConfig.toy(dropout_p=0.0, embed_dim=16, embed_len=4)
    model = init_model(cfg, seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    state = make_train_state(model, lr=0.0, total_steps=3)

    result = train_step(state, toy_pair(cfg, seed=0))
    assert result.lr == 0.0
    assert state.step == 1
    for name, value in model.state_dict().items():
        assert torch.equal(value, before[name]), name


def test_non_finite_loss_is_reported():
    cfg = ModelConfig.toy(dropout_p=0.0, embed_dim=16, embed_len=4)
    state = make_train_state(init_model(cfg, seed=0))
    x, y, emb = toy_pair(cfg, seed=0)
    x[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingError, match="Non-finite loss at step 0"):
        train_step(state, (x, y, emb))


def test_toy_pair_shapes():
    cfg = ModelConfig.toy(embed_dim=16, embed_len=4)
    x, y, emb = toy_pair(cfg, seed=3)
    assert x.shape == y.shape == (1, 1, 16, 16, 16)
    assert emb.shape == (1, 4, 16)
    assert y.max().item() == 1.0
    assert not torch.equal(x, y)


def test_toy_overfit():
    _, losses = train_toy(seed=0, steps=200)
    assert len(losses) == 200
    assert losses[-1] <= 0.1 * losses[0]


def _experimental_map():
    structure = read_pdb(DATA / "toy.pdb")
    target = simulate_map(structure, derive_params(3.0)).map
    noise = np.random.default_rng(0).normal(scale=0.02, size=target.shape)
    return structure, target.with_data(target.data + noise)


def test_prepare_pairs_drops_empty_targets():
    structure, exp = _experimental_map()
    cfg = _small_pipeline()
    pairs = prepare_pairs(exp, structure, cfg, random_embedding(8, 16, seed=0))

    assert len(pairs) >= 1
    assert pairs.inputs.shape[1:] == (16, 16, 16)
    assert pairs.inputs.shape == pairs.targets.shape
    assert np.all(pairs.targets.reshape(len(pairs), -1).max(axis=1) > 0)
    assert pairs.embeddings.shape == (1, 8, 16)
    assert pairs.embedding_index.tolist() == [0] * len(pairs)


def test_pair_archives_concatenate(tmp_path):
    rng = np.random.default_rng(1)

    def _pairs(n):
        return PairSet(
            inputs=rng.random((n, 16, 16, 16), dtype=np.float32),
            targets=rng.random((n, 16, 16, 16), dtype=np.float32),
            embeddings=rng.random((1, 8, 16), dtype=np.float32),
            embedding_index=np.zeros(n, dtype=np.int64),
        )

    save_pairs(tmp_path / "a.npz", _pairs(2))
    save_pairs(tmp_path / "b.npz", _pairs(3))
    merged = load_pairs([tmp_path / "a.npz", tmp_path / "b.npz"])
    assert len(merged) == 5
    assert merged.embeddings.shape == (2, 8, 16)
    assert merged.embedding_index.tolist() == [0, 0, 1, 1, 1]


def test_fit_keeps_best_validation_weights():
    rng = np.random.default_rng(2)
    target = rng.random((6, 16, 16, 16), dtype=np.float32)
    pairs = PairSet(inputs=target + rng.normal(scale=0.05, size=target.shape).astype(np.float32),
                    targets=target)
    cfg = _small_pipeline()

    result = fit(pairs, cfg, steps=6, val_fraction=0.34, eval_every=2)
    assert len(result.train_losses) == 6
    assert [step for step, _ in result.val_losses] == [2, 4, 6]
    assert result.best_val == min(loss for _, loss in result.val_losses)


def test_fit_needs_two_pairs():
    one = PairSet(inputs=np.zeros((1, 16, 16, 16)), targets=np.zeros((1, 16, 16, 16)))
    with pytest.raises(TrainingError, match="at least two"):
        fit(one, _small_pipeline(), steps=1)
