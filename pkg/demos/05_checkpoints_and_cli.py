"""
Checkpoints and the command-line workflow
=========================================

Checkpoints are self-describing: a magic tag, a JSON header with the
schedule and network shape, and a float32 payload. The CLI wraps the
whole pipeline; here it is driven in-process through ``main``.
"""

# %%
from pathlib import Path

from hazeshift.checkpoint import load_checkpoint
from hazeshift.cli import main

out = Path("demo_out/cli")
cfg = out / "tiny.json"
out.mkdir(parents=True, exist_ok=True)
cfg.write_text('{"base_channels": 8, "channel_multipliers": [1, 2], "timestep_embed_dim": 16, '
               '"patches_per_image": 2, "images_per_batch": 4, "learning_rate": 5e-5, "patch_size": 32, "stride": 16}')
flags = ["--config", str(cfg), "--seed", "3", "--deterministic"]

# %%
main(["synth", *flags, "--n", "8", "--size", "48", "--out", str(out / "data")])
main(["train", *flags, "--data", str(out / "data"), "--out", str(out / "run"), "--iterations", "40", "--ckpt-every", "20"])

# %%
ckpt = load_checkpoint(out / "run" / "final.bin")
print("header:", {k: v for k, v in ckpt.header().items() if k in ("iteration", "param_count", "schedule")})

# resume for 20 more iterations from the mid-run checkpoint with the same flags; the final file matches byte for byte
main(["train", *flags, "--data", str(out / "data"), "--out", str(out / "resumed"), "--iterations", "40", "--ckpt-every", "20",
      "--ckpt", str(out / "run" / "ckpt_0000020.bin")])
same = (out / "run" / "final.bin").read_bytes() == (out / "resumed" / "final.bin").read_bytes()
print("resumed run identical:", same)

# %%
ck = str(out / "run" / "final.bin")
main(["dehaze", *flags, "--ckpt", ck, "--input", str(out / "data" / "hazy"), "--output", str(out / "dehazed")])
main(["roundtrip", *flags, "--ckpt", ck, "--input", str(out / "data" / "clear"), "--output", str(out / "roundtrip")])
main(["eval", *flags, "--input", str(out / "dehazed"), "--gt", str(out / "data" / "clear"), "--output", str(out / "metrics.csv")])
print((out / "metrics.csv").read_text().splitlines()[-1])
