import math

import numpy as np
import pytest

from tbcnn.autograd import Tensor
from tbcnn.model import (
    BRANCHES, Checkpoint, ModelConfig, ModelParams, _block, _block_reference, branch_forward,
    embed, export_attention, features, init_params, model_forward, score_batch,
)

FULL = ModelConfig(majors=("a", "b"))
SMALL = ModelConfig(n_d=10, n_t=6, n_l=4, fusion_hidden=(16, 8), majors=("a", "b"))


def binary_input(cfg, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = cfg.input_shape if batch is None else (batch,) + cfg.input_shape
    return (rng.random(shape) < 0.15).astype(np.float64)


def test_branch_widths_and_fusion_width():
    assert [FULL.branch_width(b) for b in BRANCHES] == [360, 216, 432]
    assert FULL.fusion_width == 1008
    params = init_params(FULL)
    X = binary_input(FULL)
    for br, width in zip(BRANCHES, (360, 216, 432)):
        assert branch_forward(X, br, params, FULL).shape == (width,)
    assert embed(X, "a", params, FULL).shape == (256,)
    assert model_forward(X, "a", params, FULL).shape == ()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(enabled_branches=("Q",))
    with pytest.raises(ValueError):
        ModelConfig(s=2)
    with pytest.raises(ValueError):
        ModelConfig(majors=("a", "a"))
    with pytest.raises(ValueError):
        ModelConfig(pool_region=(40, 3))
    assert ModelConfig(enabled_branches=("D", "P")).enabled_branches == ("P", "D")
    assert ModelConfig.from_dict(FULL.to_dict()) == FULL


def test_init_bounds_and_seeding():
    p = init_params(FULL, seed=1)
    w = p.shared["P.0.conv.weight"].data
    bound = math.sqrt(6 / 36)
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound
    assert not p.shared["P.0.conv.bias"].data.any()
    same = init_params(FULL, seed=1)
    other = init_params(FULL, seed=2)
    for name, arr in p.to_arrays().items():
        assert np.array_equal(arr, same.to_arrays()[name])
    assert not np.array_equal(w, other.shared["P.0.conv.weight"].data)


def identity_params(cfg):
    p = init_params(cfg)
    s = cfg.s
    for name, t in p.shared.items():
        t.data[...] = 0.0
        if name.endswith("conv.weight"):
            br = name[0]
            if br == "D":
                t.data[:, s // 2, s // 2] = 1.0
            else:
                for c in range(cfg.n_l):
                    t.data[(c, 0, s // 2, c) if br == "P" else (c, s // 2, 0, c)] = 1.0
    return p


def test_identity_kernels_pass_nonnegative_input_through():
    cfg = ModelConfig(**{**SMALL.to_dict(), "attention_enabled": False})
    p = identity_params(cfg)
    X = binary_input(cfg, 4)
    for br in BRANCHES:
        out = _block(Tensor(X), br, 0, p, cfg)
        assert np.array_equal(out.data, X)
    np.testing.assert_array_equal(branch_forward(X, "P", p, cfg).data, X.max(axis=1).ravel())
    np.testing.assert_array_equal(branch_forward(X, "R", p, cfg).data, X.max(axis=0).ravel())


def test_zero_params_give_zero_score():
    p = init_params(SMALL)
    for t in p.tensors():
        t.data[...] = 0.0
    X = binary_input(SMALL, 2)
    assert float(model_forward(X, "a", p, SMALL).data) == 0.0
    assert not embed(X, "a", p, SMALL).data.any()


def test_persistence_branch_is_max_over_slots():
    cfg = ModelConfig(**{**SMALL.to_dict(), "attention_enabled": False, "blocks": 1})
    p = init_params(cfg, seed=5)
    X = binary_input(cfg, 7)
    w = p.shared["P.0.conv.weight"].data
    b = p.shared["P.0.conv.bias"].data
    D, T, C = X.shape
    pad = np.pad(X, ((0, 0), (1, 1), (0, 0)))
    H = np.zeros((D, T, C))
    for i in range(D):
        for j in range(T):
            for o in range(C):
                H[i, j, o] = max(0.0, b[o] + np.sum(w[o, 0] * pad[i, j:j + 3]))
    np.testing.assert_allclose(branch_forward(X, "P", p, cfg).data, H.max(axis=1).ravel(),
                               atol=1e-12)


def test_distribution_channels_stay_local():
    cfg = ModelConfig(**{**SMALL.to_dict(), "attention_enabled": False})
    p = init_params(cfg, seed=3)
    X = binary_input(cfg, 1)
    base = branch_forward(X, "D", p, cfg).data.reshape(2, 2, cfg.n_l)
    X2 = X.copy()
    X2[:, :, 1] = 1.0 - X2[:, :, 1]
    moved = branch_forward(X2, "D", p, cfg).data.reshape(2, 2, cfg.n_l)
    others = [c for c in range(cfg.n_l) if c != 1]
    np.testing.assert_array_equal(base[:, :, others], moved[:, :, others])


def test_heads_are_independent():
    p = init_params(SMALL, seed=0)
    X = binary_input(SMALL, 3)
    sa = float(model_forward(X, "a", p, SMALL).data)
    sb = float(model_forward(X, "b", p, SMALL).data)
    assert sa != sb
    p.heads["a"], p.heads["b"] = p.heads["b"], p.heads["a"]
    assert float(model_forward(X, "a", p, SMALL).data) == sb
    with pytest.raises(KeyError):
        model_forward(X, "zz", p, SMALL)


def test_score_batch_matches_single_forward():
    p = init_params(SMALL, seed=4)
    X = binary_input(SMALL, 8, batch=5)
    majors = ["b", "a", "b", "a", "a"]
    batch = score_batch(X, majors, p, SMALL).data
    single = [float(model_forward(X[i], m, p, SMALL).data) for i, m in enumerate(majors)]
    np.testing.assert_allclose(batch, single, rtol=1e-12, atol=1e-12)


def test_fused_block_matches_reference():
    p = init_params(SMALL, seed=6)
    for t in p.tensors():
        t.data += np.random.default_rng(0).uniform(-0.1, 0.1, t.shape)
    X = Tensor(binary_input(SMALL, 9, batch=3))
    for br in BRANCHES:
        np.testing.assert_allclose(_block(X, br, 0, p, SMALL).data,
                                   _block_reference(X, br, 0, p, SMALL).data, atol=1e-12)


def test_export_attention():
    p = init_params(SMALL, seed=2)
    X = binary_input(SMALL, 10, batch=2)
    att = export_attention(X, p, SMALL)
    assert {k: v.shape for k, v in att.items()} == {"day": (10,), "slot": (6,), "location": (4,)}
    assert all(((v > 0) & (v < 1)).all() for v in att.values())
    one = export_attention(X[0], p, SMALL)
    two = export_attention(X[1:], p, SMALL)
    for k in att:
        np.testing.assert_allclose(att[k], (one[k] + two[k]) / 2, atol=1e-15)
    off = ModelConfig(**{**SMALL.to_dict(), "attention_enabled": False})
    with pytest.raises(ValueError):
        export_attention(X, init_params(off), off)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(SMALL, seed=11)
    ck = Checkpoint(SMALL, p, seed=11, epoch=3, run_config={"train.seed": 11})
    ck.save(tmp_path / "c.json")
    back = Checkpoint.load(tmp_path / "c.json")
    assert back.config == SMALL and back.epoch == 3 and back.run_config == {"train.seed": 11}
    for name, arr in p.to_arrays().items():
        assert np.array_equal(arr, back.params.to_arrays()[name])
    X = binary_input(SMALL)
    assert float(model_forward(X, "b", p, SMALL).data) == \
        float(model_forward(X, "b", back.params, SMALL).data)


def test_from_arrays_rejects_mismatch():
    arrays = init_params(SMALL).to_arrays()
    arrays.pop("heads.a.fc1.bias")
    with pytest.raises(ValueError, match="missing"):
        ModelParams.from_arrays(arrays, SMALL)


def test_branch_subsets_change_feature_width():
    cfg = ModelConfig(**{**SMALL.to_dict(), "enabled_branches": ("R",)})
    p = init_params(cfg)
    assert features(binary_input(cfg), p, cfg).shape == (cfg.branch_width("R"),)
    with pytest.raises(ValueError, match="disabled"):
        branch_forward(binary_input(cfg), "P", p, cfg)


def test_input_shape_checked():
    with pytest.raises(ValueError, match="shape"):
        model_forward(np.zeros((3, 3, 3)), "a", init_params(SMALL), SMALL)
