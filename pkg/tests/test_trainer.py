import numpy as np
import pytest
import torch
from scipy import stats

from hazeshift.denoiser import DenoiserConfig, to_nchw
from hazeshift.diffusion import forward_marginal_x, forward_marginal_y
from hazeshift.haze import gen_pairs
from hazeshift.imageio import unit_to_signed, write_image
from hazeshift.trainer import (
    DatasetError,
    PairedDataset,
    PatchPair,
    TrainConfig,
    evaluate_loss,
    make_batch,
    moving_average,
    sample_patch_pairs,
    sample_timesteps,
    train,
    train_step,
)
from hazeshift.checkpoint import load_checkpoint


def synthetic(n, size=32, seed=0):
    pairs = list(gen_pairs(n, size, None, seed))
    return PairedDataset([unit_to_signed(J) for _, J, _ in pairs], [unit_to_signed(I) for _, _, I in pairs])


TINY = DenoiserConfig(base_channels=8, channel_multipliers=[1, 2], timestep_embed_dim=16)


# patches


def test_full_size_patch(rng):
    x, y = rng.uniform(-1, 1, (2, 64, 64, 3))
    pairs = sample_patch_pairs(x, y, 64, 5, rng)
    assert all(p.origin == (0, 0) for p in pairs)
    np.testing.assert_array_equal(pairs[0].x_patch, x)
    np.testing.assert_array_equal(pairs[0].y_patch, y)


def test_patch_origins_uniform():
    rng = np.random.default_rng(0)
    x = np.zeros((64, 64, 3))
    pairs = sample_patch_pairs(x, x, 32, 10_000, rng)
    origins = np.array([p.origin for p in pairs])
    assert origins.min() >= 0 and origins.max() <= 32
    counts = np.bincount(origins[:, 0] * 33 + origins[:, 1], minlength=33 * 33)
    assert stats.chisquare(counts).pvalue > 0.05
    for axis in (0, 1):
        assert stats.chisquare(np.bincount(origins[:, axis], minlength=33)).pvalue > 0.05


def test_patch_alignment(rng):
    x, y = rng.uniform(-1, 1, (2, 40, 30, 3))
    for p in sample_patch_pairs(x, y, 16, 20, rng):
        r, c = p.origin
        np.testing.assert_array_equal(p.y_patch - p.x_patch, (y - x)[r : r + 16, c : c + 16])


def test_patch_too_large(rng):
    with pytest.raises(ValueError):
        sample_patch_pairs(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), 9, 1, rng)


# timesteps


def test_timesteps_never_both_zero():
    rng = np.random.default_rng(0)
    assert all(sample_timesteps(3, rng) != (0, 0) for _ in range(5000))


def test_timesteps_uniform_over_pairs():
    # a 5%-level test rejects 1 seed in 20 by construction; seed 0 is fixed, not tuned
    T, n = 15, 100_000
    rng = np.random.default_rng(0)
    counts = np.zeros((T + 1, T + 1))
    for _ in range(n):
        tx, ty = sample_timesteps(T, rng)
        counts[tx, ty] += 1
    assert counts[0, 0] == 0
    observed = np.delete(counts.ravel(), 0)
    assert stats.chisquare(observed).pvalue > 0.05
    expected = n / ((T + 1) ** 2 - 1)
    # per-cell bound at 4.5 standard errors (Bonferroni over 255 cells)
    assert np.max(np.abs(observed - expected)) < 4.5 * np.sqrt(expected)


def test_timesteps_single_step():
    rng = np.random.default_rng(2)
    seen = {sample_timesteps(1, rng) for _ in range(500)}
    assert seen == {(0, 1), (1, 0), (1, 1)}


def test_one_sided_policy_pins_a_chain():
    rng = np.random.default_rng(3)
    draws = [sample_timesteps(15, rng, "one_sided") for _ in range(4000)]
    assert (0, 0) not in draws
    pinned = np.mean([(tx == 0) != (ty == 0) for tx, ty in draws])
    assert pinned > 0.5


# train step


def test_perturbation_uses_marginals(rng, linear15):
    x, y = rng.uniform(-1, 1, (2, 16, 16, 3))
    pairs = sample_patch_pairs(x, y, 8, 6, rng)
    xt, yt, t_x, t_y, x0, y0 = make_batch(pairs, linear15, np.random.default_rng(5))
    # replay the same draws and push them through the public marginals
    replay = np.random.default_rng(5)
    ts = [sample_timesteps(15, replay) for _ in pairs]
    nx = torch.from_numpy(replay.standard_normal(tuple(x0.shape))).float()
    ny = torch.from_numpy(replay.standard_normal(tuple(y0.shape))).float()
    for i, (a, b) in enumerate(ts):
        assert (t_x[i].item(), t_y[i].item()) == (a, b)
        assert torch.equal(xt[i], forward_marginal_x(x0[i], y0[i], linear15, a, noise=nx[i]))
        assert torch.equal(yt[i], forward_marginal_y(y0[i], x0[i], linear15, b, noise=ny[i]))


class Perfect(torch.nn.Module):
    """Outputs the stored targets exactly, with a trainable but unused scale."""

    def __init__(self, x0, y0):
        super().__init__()
        self.x0, self.y0 = x0, y0
        self.w = torch.nn.Parameter(torch.tensor(1.0))

    def forward(self, x, y, tx, ty):
        return self.x0 + 0 * self.w * x, self.y0 + 0 * self.w * y


def test_oracle_warm_start_leaves_weights(rng, linear15):
    x, y = rng.uniform(-1, 1, (2, 8, 8, 3))
    pairs = [PatchPair(x, y, (0, 0))]
    model = Perfect(to_nchw(x), to_nchw(y))
    opt = torch.optim.Adam(model.parameters(), lr=5e-5)
    loss = train_step(model, opt, pairs, linear15, rng)
    assert loss == 0.0
    assert model.w.item() == 1.0


def test_non_finite_loss_aborts(rng, linear15, tiny_model):
    x = np.full((8, 8, 3), np.nan)
    opt = torch.optim.Adam(tiny_model.parameters(), lr=5e-5)
    with pytest.raises(FloatingPointError, match="non-finite"):
        train_step(tiny_model, opt, [PatchPair(x, x, (0, 0))], linear15, rng)


def test_loss_batch_permutation(tiny_model, rng, linear15):
    x, y = rng.uniform(-1, 1, (2, 16, 16, 3))
    pairs = sample_patch_pairs(x, y, 8, 6, rng)
    xt, yt, t_x, t_y, x0, y0 = make_batch(pairs, linear15, np.random.default_rng(0))
    perm = torch.tensor([3, 1, 5, 0, 2, 4])
    from hazeshift.denoiser import l1_pair_loss

    tiny_model.double()
    with torch.no_grad():
        a = l1_pair_loss(*tiny_model(xt.double(), yt.double(), t_x, t_y), x0.double(), y0.double())
        b = l1_pair_loss(*tiny_model(xt[perm].double(), yt[perm].double(), t_x[perm], t_y[perm]), x0[perm].double(), y0[perm].double())
    assert abs(a.item() - b.item()) < 1e-12


# training loop


def test_toy_run_loss_decreases(linear15):
    data = synthetic(32)
    cfg = TrainConfig(patch_size=16, patches_per_image=2, images_per_batch=4, learning_rate=1e-3, iterations=200, seed=0)
    ck = train(data, cfg, linear15, TINY)
    ma = moving_average(ck.losses, 20)
    blocks = np.asarray(ck.losses).reshape(10, 20).mean(axis=1)
    assert ma[-1] < ma[0]
    assert blocks[-1] < 0.8 * blocks[0]
    assert np.all(blocks[5:] < blocks[0])


def test_training_is_deterministic(tmp_path, linear15):
    data = synthetic(8)
    cfg = TrainConfig(patch_size=16, patches_per_image=2, images_per_batch=2, iterations=15, seed=3)
    train(data, cfg, linear15, TINY, out_dir=tmp_path / "a", loss_log=tmp_path / "a.csv")
    train(data, cfg, linear15, TINY, out_dir=tmp_path / "b", loss_log=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a" / "final.bin").read_bytes() == (tmp_path / "b" / "final.bin").read_bytes()
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 16


def test_checkpoint_reproduces_validation_loss(tmp_path, linear15):
    data = synthetic(8)
    cfg = TrainConfig(patch_size=16, patches_per_image=2, images_per_batch=2, iterations=10, seed=0)
    ck = train(data, cfg, linear15, TINY, out_dir=tmp_path)
    before = evaluate_loss(ck.model, data, linear15, 16, seed=1)
    loaded = load_checkpoint(tmp_path / "final.bin")
    after = evaluate_loss(loaded.model, data, loaded.schedule, 16, seed=1)
    assert before == after


def test_resume_matches_straight_run(tmp_path, linear15):
    data = synthetic(8)
    base = dict(patch_size=16, patches_per_image=2, images_per_batch=2, seed=4, learning_rate=1e-3)
    straight = train(data, TrainConfig(iterations=20, **base), linear15, TINY, out_dir=tmp_path / "s")
    half = train(data, TrainConfig(iterations=10, **base), linear15, TINY, out_dir=tmp_path / "h")
    resumed = train(data, TrainConfig(iterations=20, **base), linear15, resume=load_checkpoint(tmp_path / "h" / "final.bin"), out_dir=tmp_path / "r")
    for a, b in zip(straight.model.parameters(), resumed.model.parameters()):
        assert torch.equal(a, b)
    assert (tmp_path / "s" / "final.bin").read_bytes() == (tmp_path / "r" / "final.bin").read_bytes()
    assert half.iteration == 10


def test_periodic_checkpoints(tmp_path, linear15):
    data = synthetic(4)
    cfg = TrainConfig(patch_size=16, patches_per_image=1, images_per_batch=2, iterations=6, ckpt_every=2)
    train(data, cfg, linear15, TINY, out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["ckpt_0000002.bin", "ckpt_0000004.bin", "ckpt_0000006.bin", "final.bin"]


def test_train_config_rejects_bad_values():
    with pytest.raises(ValueError):
        TrainConfig(patch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(timestep_sampling="bogus")
    assert TrainConfig().learning_rate == 5e-5
    assert TrainConfig(images_per_batch=16, patches_per_image=16).batch_size == 256


# datasets on disk


def _write_pairs(root, names, size=16):
    for n in names:
        write_image(root / "clear" / n, np.zeros((size, size, 3)))
        write_image(root / "hazy" / n, np.zeros((size, size, 3)))


def test_dataset_from_dir(tmp_path):
    _write_pairs(tmp_path, ["a.png", "b.png"])
    ds = PairedDataset.from_dir(tmp_path)
    assert len(ds) == 2 and ds.names == ["a.png", "b.png"]


def test_dataset_misaligned_names(tmp_path):
    _write_pairs(tmp_path, ["a.png"])
    write_image(tmp_path / "clear" / "only_clear.png", np.zeros((16, 16, 3)))
    with pytest.raises(DatasetError, match="only_clear.png"):
        PairedDataset.from_dir(tmp_path)


def test_dataset_missing_dir(tmp_path):
    with pytest.raises(DatasetError):
        PairedDataset.from_dir(tmp_path)


def test_dataset_shape_mismatch():
    with pytest.raises(DatasetError):
        PairedDataset([np.zeros((8, 8, 3))], [np.zeros((8, 9, 3))])
