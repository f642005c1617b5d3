import numpy as np
import pytest

from skelmae import masking as mk
from skelmae import model as M
from skelmae import tensor as tn
from skelmae.checkpoint import Checkpoint
from skelmae.model import BlockConfig, ModelConfig
from skelmae.tensor import Tensor, backward, finite_diff_grad, relative_error
from skelmae.training import mse_loss

# Transcribed row by row from the architecture tables: "d_in d_out qkv" per block.
TABLES = {
    "dim256-depth9": ("3 64", "64 64 16|64 64 16|64 128 32|128 128 32|128 256 64|256 256 64|256 256 64|256 256 64",
                      "256 256 64|256 256 64|256 256 64|256 128 64|128 128 32|128 64 32|64 64 16|64 64 16", "64 3"),
    "dim512-depth9": ("3 64", "64 64 16|64 128 32|128 128 32|128 256 64|256 256 64|256 512 128|512 512 128|512 512 128",
                      "512 512 128|512 512 128|512 256 64|256 256 64|256 128 32|128 128 32|128 64 16|64 64 16", "64 3"),
    "dim128-depth9": ("3 32", "32 32 8|32 32 8|32 64 16|64 64 16|64 128 32|128 128 32|128 128 32|128 128 32",
                      "128 128 32|128 128 32|128 128 32|128 64 32|64 64 16|64 32 16|32 32 8|32 32 8", "32 3"),
    "dim256-depth5": ("3 64", "64 64 16|64 64 16|64 128 32|128 128 32|128 256 64|256 256 64|256 256 64|256 256 64",
                      "256 128 64|128 128 32|128 64 32|64 64 16", "64 3"),
    "dim256-depth7": ("3 64", "64 64 16|64 64 16|64 128 32|128 128 32|128 256 64|256 256 64|256 256 64|256 256 64",
                      "256 256 64|256 256 64|256 128 64|128 128 32|128 64 32|64 64 16", "64 3"),
    "dim256-depth11": ("3 64", "64 64 16|64 64 16|64 128 32|128 128 32|128 256 64|256 256 64|256 256 64|256 256 64",
                       "256 256 64|256 256 64|256 256 64|256 256 64|256 128 64|128 128 32|128 128 32|128 64 32|"
                       "64 64 16|64 64 16", "64 3"),
}


def expected_rows(name):
    inp, enc, dec, out = TABLES[name]
    rows = [("encoder", "input layer", *map(int, inp.split()), None)]
    rows += [("encoder", f"Block{i + 1}", *map(int, r.split())) for i, r in enumerate(enc.split("|"))]
    rows += [("decoder", f"Block{i + 1}", *map(int, r.split())) for i, r in enumerate(dec.split("|"))]
    rows.append(("decoder", "output layer", *map(int, out.split()), None))
    return rows


def small_cfg(**kw):
    # widths 8/16, two blocks on each side
    return ModelConfig("test", 16, 8, (BlockConfig(8, 8, 8, 2), BlockConfig(8, 16, 8, 2)),
                       (BlockConfig(16, 16, 8, 2), BlockConfig(16, 8, 8, 2)), max_T=6, max_J=5, n_heads=2, **kw)


def batch_for(frames, spec, seed=0):
    T, J = frames.shape[1:3]
    plans = [mk.make_plan(T, J, spec, mk.make_rng(seed, i)) for i in range(len(frames))]
    return mk.MaskedBatch.from_plans(frames, plans)


@pytest.mark.parametrize("name", sorted(TABLES))
def test_presets_match_tables(name):
    cfg = M.preset(name)
    assert cfg.layer_table() == expected_rows(name)
    depth = int(name.split("depth")[1])
    assert len(cfg.decoder_blocks) + 1 == depth
    assert len(cfg.encoder_blocks) == 8


def test_param_count_ratio():
    small = M.count_params(M.preset("dim128-depth9"))
    large = M.count_params(M.preset("dim512-depth9"))
    assert abs(large / small - 11.0) / 11.0 < 0.30


@pytest.mark.parametrize("name", ["tiny", "micro", "dim128-depth9"])
def test_count_params_matches_enumeration(name):
    cfg = M.preset(name)
    assert M.SkeletonMAE(cfg).num_parameters() == M.count_params(cfg)


def test_block_chain_validation():
    with pytest.raises(ValueError, match="chain"):
        ModelConfig("bad", 8, 8, (BlockConfig(8, 16, 8), BlockConfig(8, 8, 8)), (BlockConfig(8, 8, 8),))
    with pytest.raises(ValueError, match="divisible"):
        BlockConfig(8, 8, 6, 4)


def test_config_round_trip_and_scaling():
    cfg = M.preset("dim256-depth9")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    quarter = cfg.scaled(4, n_heads=2)
    assert quarter.encoder_blocks[-1] == BlockConfig(64, 64, 16, 2)
    assert len(quarter.decoder_blocks) == len(cfg.decoder_blocks)


def test_positional_encoding_values():
    pe = M.positional_encoding(0, 0, 25, 8)
    np.testing.assert_array_equal(pe, [0, 1, 0, 1, 0, 1, 0, 1])
    f, j = np.meshgrid(np.arange(20), np.arange(25), indexing="ij")
    codes = M.positional_encoding(f, j, 25, 16).reshape(500, 16)
    assert len({tuple(np.round(c, 12)) for c in codes}) == 500
    # same flat position, same code
    np.testing.assert_array_equal(M.positional_encoding(1, 0, 25, 16), M.positional_encoding(0, 25, 25, 16))


def test_patch_embed_zero_and_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4, 3))
    layer = M.Linear(3, 3, rng, zero=True)
    fidx, jidx = np.broadcast_to(np.arange(3), (2, 3)), np.broadcast_to(np.arange(4), (2, 3, 4))
    assert np.all(M.patch_embed(layer, x, fidx, jidx).tokens.data == 0)
    layer.weight.data = np.eye(3)
    grid = M.patch_embed(layer, x, fidx, jidx)
    np.testing.assert_array_equal(grid.tokens.data, x)
    assert grid.frame_ids[1, 2, 3] == 2 and grid.joint_ids[1, 2, 3] == 3


def test_divide_and_merge_tuples_round_trip():
    x = Tensor(np.arange(2 * 5 * 3 * 4, dtype=float).reshape(2, 5, 3, 4))
    tuples, T = M.divide_tuples(x, 2)
    assert tuples.shape == (2, 3, 6, 4) and T == 5
    # the padded tuple repeats the last frame
    np.testing.assert_array_equal(tuples.data[:, 2, 3:], x.data[:, 4])
    np.testing.assert_array_equal(M.merge_tuples(tuples, T, 3).data, x.data)


def test_single_token_attention_is_value_projection():
    rng = np.random.default_rng(3)
    block = M.STTABlock(BlockConfig(8, 8, 8, 2), rng)
    x = Tensor(rng.normal(size=(1, 1, 1, 8)))
    h = block.norm1(x)
    expected = block.proj(block.value(h)).data
    np.testing.assert_allclose(block.attention(h).data, expected, rtol=1e-12)


def test_block_gradients():
    rng = np.random.default_rng(4)
    block = M.STTABlock(BlockConfig(8, 16, 8, 2), rng)
    x = rng.uniform(-1, 1, (1, 2, 4, 8))
    w = Tensor(rng.uniform(-1, 1, (1, 2, 4, 16)))
    f = lambda t: (block(t) * w).sum()
    t = Tensor(x, requires_grad=True)
    backward(f(t))
    assert relative_error(t.grad, finite_diff_grad(f, Tensor(x), 1e-5)) < 1e-4
    p = block.fc1.weight
    block.zero_grad()
    backward(f(Tensor(x)))
    analytic = p.grad.copy()
    numeric = np.zeros_like(p.data)
    flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + 1e-5
        hi = f(Tensor(x)).item()
        flat[i] = keep - 1e-5
        lo = f(Tensor(x)).item()
        flat[i] = keep
        nflat[i] = (hi - lo) / 2e-5
    assert relative_error(analytic, numeric) < 1e-4


def test_composite_gradient_encode_decode_mse():
    cfg = small_cfg()
    model = M.SkeletonMAE(cfg, seed=1)
    rng = np.random.default_rng(5)
    frames = rng.uniform(-1, 1, (2, 6, 5, 3))
    batch = batch_for(frames, mk.MaskSpec(0.5, 0.4, "random", seed=2))
    loss = lambda: mse_loss(model(batch), frames)
    params = model.parameters()
    model.zero_grad()
    backward(loss())
    analytic = np.concatenate([p.grad.ravel() for p in params])
    numeric = []
    for p in params:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + 1e-5
            hi = loss().item()
            flat[i] = keep - 1e-5
            lo = loss().item()
            flat[i] = keep
            numeric.append((hi - lo) / 2e-5)
    assert relative_error(analytic, np.array(numeric)) < 1e-4


def test_every_parameter_receives_gradient():
    cfg = M.preset("tiny")
    model = M.SkeletonMAE(cfg, seed=0)
    frames = np.random.default_rng(0).normal(size=(2, 20, 25, 3))
    batch = batch_for(frames, mk.MaskSpec(0.5, 0.5))
    backward(mse_loss(model(batch), frames))
    grads = [p.grad for p in model.parameters()]
    assert all(g is not None for g in grads)
    # key biases never matter to a softmax over keys, so only ~99% of entries are live
    entries = np.concatenate([g.ravel() for g in grads])
    assert np.mean(entries != 0) >= 0.99


def test_shape_pipeline_10x13_tokens():
    cfg = M.preset("tiny")
    model = M.SkeletonMAE(cfg, seed=0)
    frames = np.random.default_rng(1).normal(size=(3, 20, 25, 3))
    batch = batch_for(frames, mk.MaskSpec(0.5, 0.5, "random"))
    latent = model.encode(batch)
    assert latent.shape == (3, 10, 13, cfg.encoder_out)
    assert model.decode(latent, batch).shape == (3, 20, 25, 3)


def test_decoder_depth5_has_four_blocks():
    model = M.SkeletonMAE(M.preset("dim256-depth5"))
    assert len(model.decoder.blocks) == 4


def test_no_nan_for_large_inputs():
    model = M.SkeletonMAE(M.preset("tiny"), seed=2)
    frames = np.random.default_rng(2).uniform(-10, 10, (2, 20, 25, 3))
    out = model(batch_for(frames, mk.MaskSpec(0.6, 0.6, "fixed_index"))).data
    assert np.all(np.isfinite(out))


def test_mask_token_fills_every_masked_position():
    cfg = small_cfg()
    model = M.SkeletonMAE(cfg)
    frames = np.random.default_rng(6).normal(size=(2, 6, 5, 3))
    batch = batch_for(frames, mk.MaskSpec(0.5, 0.4))
    latent = model.encode(batch)
    grid = model.decoder.fill_grid(latent, batch.positions, 6, 5).data.reshape(2, 30, -1)
    vis = np.zeros((2, 30), bool)
    vis[np.arange(2)[:, None], batch.positions] = True
    assert np.all(grid[~vis] == model.decoder.mask_token.data)
    np.testing.assert_array_equal(grid[vis].reshape(2, -1, grid.shape[-1]),
                                  latent.data.reshape(2, -1, grid.shape[-1]))


def test_classifier_zero_head_and_mask_independence():
    cfg = M.preset("tiny")
    frames = np.random.default_rng(7).normal(size=(3, 20, 25, 3))
    clf = M.ActionClassifier(cfg, 4, zero_head=True)
    logits = M.classify(clf, frames).data
    assert logits.shape == (3, 4) and np.all(logits == 0)
    np.testing.assert_allclose(tn.softmax(Tensor(logits), axis=-1).data, 0.25)
    clf = M.ActionClassifier(cfg, 4, seed=1)
    np.testing.assert_array_equal(clf(frames).data, clf(frames.copy()).data)


def test_load_pretrained_encoder_changes_logits():
    cfg = M.preset("tiny")
    frames = np.random.default_rng(8).normal(size=(2, 20, 25, 3))
    pre = M.SkeletonMAE(cfg, seed=11)
    pre.encoder.set_input_stats(np.full((25, 3), 0.5), 2.0)
    clf = M.ActionClassifier(cfg, 4, seed=0)
    before = clf(frames).data
    clf.load_encoder(pre.state_dict())
    assert not np.allclose(before, clf(frames).data)
    np.testing.assert_array_equal(clf.encoder.input_mean.data, pre.encoder.input_mean.data)


def test_load_encoder_mismatch_names_shapes():
    clf = M.ActionClassifier(M.preset("tiny"), 4)
    other = M.SkeletonMAE(M.preset("micro"))
    with pytest.raises(ValueError, match="expected"):
        clf.load_encoder(other.state_dict())


def test_input_stats_standardize_and_invert():
    frames = np.random.default_rng(9).normal(2.0, 3.0, (5, 4, 3, 3))
    mean, scale = M.input_stats(frames, max_J=5)
    assert mean.shape == (5, 3) and np.all(mean[3:] == 0)
    enc = M.Encoder(small_cfg(), np.random.default_rng(0))
    enc.set_input_stats(mean, scale)
    z = enc.standardize(frames, np.arange(3))
    assert abs(z.mean()) < 1e-12 and z.std() == pytest.approx(1.0)
    back = enc.destandardize(Tensor(z), 3).data
    np.testing.assert_allclose(back, frames, atol=1e-12)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = M.preset("tiny")
    frames = np.random.default_rng(10).normal(size=(2, 20, 25, 3))
    clf = M.ActionClassifier(cfg, 4, seed=3)
    clf.encoder.set_input_stats(np.random.default_rng(1).normal(size=(25, 3)), 0.3)
    Checkpoint.from_model(clf, {"note": "x"}).save(tmp_path / "ck")
    back = Checkpoint.load(tmp_path / "ck")
    assert back.meta == {"note": "x"} and back.n_classes == 4
    np.testing.assert_array_equal(back.build()(frames).data, clf(frames).data)

    mae = M.SkeletonMAE(cfg, seed=4)
    Checkpoint.from_model(mae).save(tmp_path / "mae")
    batch = batch_for(frames, mk.MaskSpec(0.5, 0.5))
    np.testing.assert_array_equal(Checkpoint.load(tmp_path / "mae").build()(batch).data, mae(batch).data)
