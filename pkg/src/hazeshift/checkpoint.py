"""Self-describing checkpoint files.

Layout::

    8 bytes   magic  b"HZSHIFT1"
    4 bytes   little-endian uint32 header length n
    n bytes   UTF-8 JSON header (sorted keys)
    rest      little-endian float32 payload

The payload holds the network weights in ``model.parameters()`` order,
optionally followed by the Adam first and second moments in the same
order. The header records the schedule, the network config and how many
floats each section holds, so a file can be loaded with no other input.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .denoiser import DenoiserConfig, DualUNet, count_parameters, flatten_parameters
from .schedule import Schedule, build_schedule

MAGIC = b"HZSHIFT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    schedule: Schedule
    denoiser_config: DenoiserConfig
    model: DualUNet
    iteration: int = 0
    seed: int = 0
    optimizer_state: Optional[dict] = None  # {"step", "lr", "betas", "eps", "exp_avg", "exp_avg_sq"}
    extra: dict = field(default_factory=dict)
    losses: list = field(default_factory=list, repr=False)  # not serialized

    def header(self) -> dict:
        n = count_parameters(self.model)
        h = {
            "format_version": FORMAT_VERSION,
            "schedule": self.schedule.header(),
            "denoiser": self.denoiser_config.to_dict(),
            "iteration": int(self.iteration),
            "seed": int(self.seed),
            "param_count": n,
            "optimizer": None,
            "extra": self.extra,
        }
        if self.optimizer_state is not None:
            o = self.optimizer_state
            h["optimizer"] = {"step": int(o["step"]), "lr": o["lr"], "betas": list(o["betas"]), "eps": o["eps"]}
        h["payload_floats"] = n * (3 if self.optimizer_state is not None else 1)
        return h


def optimizer_snapshot(model: torch.nn.Module, opt: torch.optim.Adam) -> dict:
    params = list(model.parameters())
    group = opt.param_groups[0]
    step = 0
    exp_avg, exp_avg_sq = [], []
    for p in params:
        st = opt.state.get(p, {})
        if st:
            step = int(st["step"])
            exp_avg.append(st["exp_avg"])
            exp_avg_sq.append(st["exp_avg_sq"])
        else:
            exp_avg.append(torch.zeros_like(p))
            exp_avg_sq.append(torch.zeros_like(p))
    return {
        "step": step,
        "lr": group["lr"],
        "betas": tuple(group["betas"]),
        "eps": group["eps"],
        "exp_avg": exp_avg,
        "exp_avg_sq": exp_avg_sq,
    }


def restore_optimizer(model: torch.nn.Module, snapshot: dict) -> torch.optim.Adam:
    opt = torch.optim.Adam(model.parameters(), lr=snapshot["lr"], betas=tuple(snapshot["betas"]), eps=snapshot["eps"])
    if snapshot["step"] > 0:
        for p, m, v in zip(model.parameters(), snapshot["exp_avg"], snapshot["exp_avg_sq"]):
            opt.state[p] = {
                "step": torch.tensor(float(snapshot["step"])),
                "exp_avg": m.clone(),
                "exp_avg_sq": v.clone(),
            }
    return opt


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [flatten_parameters(list(ckpt.model.parameters()))]
    if ckpt.optimizer_state is not None:
        parts.append(flatten_parameters(ckpt.optimizer_state["exp_avg"]))
        parts.append(flatten_parameters(ckpt.optimizer_state["exp_avg_sq"]))
    payload = np.concatenate(parts).astype("<f4").tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def _unflatten(flat: np.ndarray, like) -> list:
    out, pos = [], 0
    for p in like:
        n = p.numel()
        out.append(torch.from_numpy(flat[pos : pos + n].astype(np.float32).reshape(tuple(p.shape))))
        pos += n
    return out


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < 12 or data[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic {data[:8]!r})")
    (hlen,) = struct.unpack("<I", data[8:12])
    if 12 + hlen > len(data):
        raise CheckpointError(f"{source}: header length {hlen} exceeds file size {len(data)}")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format_version {header.get('format_version')!r}")
    try:
        sched = header["schedule"]
        schedule = build_schedule(sched["T"], sched["kappa"], sched["gamma"])
        config = DenoiserConfig(**header["denoiser"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{source}: invalid header field: {exc}") from exc
    model = DualUNet(config)
    n = count_parameters(model)
    if header.get("param_count") != n:
        raise CheckpointError(f"{source}: header param_count {header.get('param_count')} != architecture {n}")
    payload = data[12 + hlen :]
    expected = header.get("payload_floats")
    if len(payload) % 4 or len(payload) // 4 != expected:
        raise CheckpointError(f"{source}: payload holds {len(payload) / 4:g} floats, header says {expected}")
    flat = np.frombuffer(payload, dtype="<f4")
    params = list(model.parameters())
    with torch.no_grad():
        for p, v in zip(params, _unflatten(flat[:n], params)):
            p.copy_(v)
    opt_state = None
    if header.get("optimizer") is not None:
        if expected != 3 * n:
            raise CheckpointError(f"{source}: optimizer section present but payload has {expected} floats")
        o = header["optimizer"]
        opt_state = dict(o)
        opt_state["exp_avg"] = _unflatten(flat[n : 2 * n], params)
        opt_state["exp_avg_sq"] = _unflatten(flat[2 * n :], params)
    elif expected != n:
        raise CheckpointError(f"{source}: payload has {expected} floats but no optimizer section")
    return Checkpoint(
        schedule=schedule,
        denoiser_config=config,
        model=model,
        iteration=int(header.get("iteration", 0)),
        seed=int(header.get("seed", 0)),
        optimizer_state=opt_state,
        extra=header.get("extra") or {},
    )


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from exc
    return from_bytes(data, str(path))
