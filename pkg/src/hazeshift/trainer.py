"""Patch-based training of the dual denoiser with an L1 objective."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import Checkpoint, optimizer_snapshot, restore_optimizer, save_checkpoint
from .denoiser import DenoiserConfig, DualUNet, l1_pair_loss, to_nchw
from .diffusion import forward_marginal_x, forward_marginal_y
from .imageio import list_images, read_image
from .schedule import Schedule

log = logging.getLogger(__name__)

TIMESTEP_POLICIES = ("uniform", "one_sided")


@dataclass
class TrainConfig:
    patch_size: int = 64
    patches_per_image: int = 16
    images_per_batch: int = 16
    learning_rate: float = 5e-5
    iterations: int = 1000
    seed: int = 0
    timestep_sampling: str = "uniform"
    grad_clip: Optional[float] = None
    ckpt_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        for name in ("patch_size", "patches_per_image", "images_per_batch", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.timestep_sampling not in TIMESTEP_POLICIES:
            raise ValueError(f"unknown timestep policy {self.timestep_sampling!r}")

    @property
    def batch_size(self) -> int:
        return self.images_per_batch * self.patches_per_image


@dataclass
class PatchPair:
    x_patch: np.ndarray
    y_patch: np.ndarray
    origin: Tuple[int, int]


class DatasetError(ValueError):
    pass


class PairedDataset:
    """Aligned clear/hazy images held in memory in the signed range."""

    def __init__(self, clear: Sequence[np.ndarray], hazy: Sequence[np.ndarray], names: Optional[List[str]] = None):
        if len(clear) != len(hazy):
            raise DatasetError(f"{len(clear)} clear vs {len(hazy)} hazy images")
        if not clear:
            raise DatasetError("dataset is empty")
        self.names = names or [str(i) for i in range(len(clear))]
        for name, x, y in zip(self.names, clear, hazy):
            if x.shape != y.shape:
                raise DatasetError(f"{name}: clear shape {x.shape} != hazy shape {y.shape}")
        self.clear = [np.asarray(x, dtype=np.float64) for x in clear]
        self.hazy = [np.asarray(y, dtype=np.float64) for y in hazy]

    def __len__(self):
        return len(self.clear)

    @classmethod
    def from_dir(cls, root) -> "PairedDataset":
        root = Path(root)
        cdir, hdir = root / "clear", root / "hazy"
        for d in (cdir, hdir):
            if not d.is_dir():
                raise DatasetError(f"missing directory {d}")
        cnames, hnames = set(list_images(cdir)), set(list_images(hdir))
        if cnames != hnames:
            only_c = sorted(cnames - hnames)
            only_h = sorted(hnames - cnames)
            raise DatasetError(f"misaligned dataset under {root}: only in clear/: {only_c}; only in hazy/: {only_h}")
        names = sorted(cnames)
        clear, hazy = [], []
        for n in names:
            try:
                clear.append(read_image(cdir / n))
                hazy.append(read_image(hdir / n))
            except OSError as exc:
                raise DatasetError(f"{n}: unreadable image: {exc}") from exc
        return cls(clear, hazy, names)


def sample_patch_pairs(x0, y0, p: int, n: int, rng: np.random.Generator) -> List[PatchPair]:
    """``n`` aligned ``p x p`` crops at uniformly random positions."""
    h, w = x0.shape[:2]
    if x0.shape != y0.shape:
        raise ValueError(f"pair shapes differ: {x0.shape} vs {y0.shape}")
    if p > h or p > w:
        raise ValueError(f"patch size {p} larger than image {h}x{w}")
    rows = rng.integers(0, h - p + 1, size=n)
    cols = rng.integers(0, w - p + 1, size=n)
    return [
        PatchPair(x0[r : r + p, c : c + p], y0[r : r + p, c : c + p], (int(r), int(c)))
        for r, c in zip(rows, cols)
    ]


def sample_timesteps(T: int, rng: np.random.Generator, policy: str = "uniform") -> Tuple[int, int]:
    """Draw ``(t_x, t_y)``; never returns ``(0, 0)``.

    ``uniform``: both independent over ``0..T``, rejecting ``(0, 0)``.
    ``one_sided``: half of the draws pin one chain at 0 (the inference
    regimes), the rest follow ``uniform``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if policy == "one_sided" and rng.random() < 0.5:
        t = int(rng.integers(1, T + 1))
        return (t, 0) if rng.random() < 0.5 else (0, t)
    if policy not in TIMESTEP_POLICIES:
        raise ValueError(f"unknown timestep policy {policy!r}")
    while True:
        tx, ty = (int(v) for v in rng.integers(0, T + 1, size=2))
        if tx or ty:
            return tx, ty


def perturb_pair(x0, y0, t_x: int, t_y: int, s: Schedule, noise_x, noise_y):
    """Perturb both clean images with independent noise through the marginals."""
    return forward_marginal_x(x0, y0, s, t_x, noise=noise_x), forward_marginal_y(y0, x0, s, t_y, noise=noise_y)


def make_batch(pairs: Sequence[PatchPair], s: Schedule, rng: np.random.Generator, policy: str = "uniform"):
    """Stack patch pairs into NCHW tensors with per-pair timesteps and perturbations."""
    x0 = to_nchw(np.stack([p.x_patch for p in pairs]))
    y0 = to_nchw(np.stack([p.y_patch for p in pairs]))
    ts = [sample_timesteps(s.T, rng, policy) for _ in pairs]
    noise_x = torch.from_numpy(rng.standard_normal(tuple(x0.shape))).to(x0.dtype)
    noise_y = torch.from_numpy(rng.standard_normal(tuple(y0.shape))).to(y0.dtype)
    xt, yt = [], []
    for i, (tx, ty) in enumerate(ts):
        a, b = perturb_pair(x0[i], y0[i], tx, ty, s, noise_x[i], noise_y[i])
        xt.append(a)
        yt.append(b)
    t_x = torch.tensor([t[0] for t in ts])
    t_y = torch.tensor([t[1] for t in ts])
    return torch.stack(xt), torch.stack(yt), t_x, t_y, x0, y0


def train_step(model, optimizer, pairs: Sequence[PatchPair], s: Schedule, rng, policy="uniform", grad_clip=None) -> float:
    """One Adam update on the mean L1 error of both predicted clean images."""
    model.train()
    xt, yt, t_x, t_y, x0, y0 = make_batch(pairs, s, rng, policy)
    optimizer.zero_grad(set_to_none=True)
    px, py = model(xt, yt, t_x, t_y)
    loss = l1_pair_loss(px, py, x0, y0)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()} at timesteps {list(zip(t_x.tolist(), t_y.tolist()))}")
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return float(loss.item())


@torch.no_grad()
def evaluate_loss(model, dataset: PairedDataset, s: Schedule, patch_size: int, seed: int = 0, n_batches: int = 4, batch: int = 8) -> float:
    """Loss on a fixed, seeded set of patches; reproducible across processes."""
    model.eval()
    rng = np.random.default_rng([seed, 2**31 - 1])
    total = 0.0
    for _ in range(n_batches):
        pairs = []
        for idx in rng.integers(0, len(dataset), size=batch):
            pairs += sample_patch_pairs(dataset.clear[idx], dataset.hazy[idx], patch_size, 1, rng)
        xt, yt, t_x, t_y, x0, y0 = make_batch(pairs, s, rng)
        px, py = model(xt, yt, t_x, t_y)
        total += float(l1_pair_loss(px, py, x0, y0))
    return total / n_batches


def draw_batch(dataset: PairedDataset, cfg: TrainConfig, rng) -> List[PatchPair]:
    k = cfg.images_per_batch
    idx = rng.choice(len(dataset), size=k, replace=k > len(dataset))
    pairs = []
    for i in idx:
        pairs += sample_patch_pairs(dataset.clear[i], dataset.hazy[i], cfg.patch_size, cfg.patches_per_image, rng)
    return pairs


def set_deterministic(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def train(
    dataset: PairedDataset,
    cfg: TrainConfig,
    schedule: Schedule,
    denoiser_config: Optional[DenoiserConfig] = None,
    out_dir=None,
    resume: Optional[Checkpoint] = None,
    loss_log=None,
) -> Checkpoint:
    """Run (or continue) training up to ``cfg.iterations`` total iterations.

    Each iteration draws its randomness from ``default_rng([seed, it])``,
    so a resumed run follows the same trajectory as an uninterrupted one.
    Checkpoints go to ``out_dir/ckpt_XXXXXXX.bin`` every ``cfg.ckpt_every``
    iterations and to ``out_dir/final.bin`` at the end; losses are written
    as ``iteration,loss`` rows to ``loss_log``.
    """
    h = min(min(x.shape[:2]) for x in dataset.clear)
    if cfg.patch_size > h:
        raise DatasetError(f"patch size {cfg.patch_size} larger than smallest image side {h}")
    if resume is not None:
        model, start = resume.model, resume.iteration
        denoiser_config = resume.denoiser_config
        if resume.optimizer_state is not None:
            opt = restore_optimizer(model, resume.optimizer_state)
            for g in opt.param_groups:
                g["lr"] = cfg.learning_rate
        else:
            opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    else:
        denoiser_config = denoiser_config or DenoiserConfig()
        torch.manual_seed(cfg.seed)
        model = DualUNet(denoiser_config)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
        start = 0

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if loss_log is not None:
        loss_log = Path(loss_log)
        kept = []
        if start > 0 and loss_log.exists():
            kept = [ln for ln in loss_log.read_text().splitlines()[1:] if ln and int(ln.split(",")[0]) <= start]
        loss_log.parent.mkdir(parents=True, exist_ok=True)
        log_file = loss_log.open("w")
        log_file.write("iteration,loss\n")
        for ln in kept:
            log_file.write(ln + "\n")

    def snapshot(it):
        return Checkpoint(
            schedule=schedule,
            denoiser_config=denoiser_config,
            model=model,
            iteration=it,
            seed=cfg.seed,
            optimizer_state=optimizer_snapshot(model, opt),
            extra={"train_config": asdict(cfg)},
        )

    losses = []
    try:
        for it in range(start, cfg.iterations):
            rng = np.random.default_rng([cfg.seed, it])
            pairs = draw_batch(dataset, cfg, rng)
            loss = train_step(model, opt, pairs, schedule, rng, cfg.timestep_sampling, cfg.grad_clip)
            losses.append(loss)
            if log_file is not None:
                log_file.write(f"{it + 1},{loss!r}\n")
            if (it + 1) % 100 == 0 or it == start:
                log.info("iteration %d/%d loss %.5f", it + 1, cfg.iterations, loss)
            if out is not None and cfg.ckpt_every and (it + 1) % cfg.ckpt_every == 0:
                save_checkpoint(out / f"ckpt_{it + 1:07d}.bin", snapshot(it + 1))
    finally:
        if log_file is not None:
            log_file.close()

    final = snapshot(max(cfg.iterations, start))
    final.losses = losses
    if out is not None:
        save_checkpoint(out / "final.bin", final)
    model.eval()
    return final


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window
