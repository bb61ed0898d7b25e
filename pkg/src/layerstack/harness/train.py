"""Training loop for the layered noise-prediction objective."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from ..denoiser import DenoiserConfig, LayerDenoiser, init_parameters
from ..schedule import NoiseSchedule, build_schedule, draw_timesteps, q_sample
from ..synthdata import read_dataset
from ..textcond import PromptBundle, Vocabulary, drop_conditions
from .checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainConfig:
    dataset: str = "data"
    out_dir: str = "runs/default"
    lr: float = 1e-5
    warmup: int = 500
    weight_decay: float = 1e-2
    batch_size: int = 32
    grad_accum: int = 8
    cond_dropout: float = 0.10
    total_steps: int = 4000
    seed: int = 0
    log_every: int = 10
    ckpt_every: int = 500
    max_samples: int | None = None
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if isinstance(self.denoiser, dict):
            self.denoiser = DenoiserConfig.from_dict(self.denoiser)
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}")
        for name in ("lr", "batch_size", "grad_accum", "total_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup < 0 or self.weight_decay < 0:
            raise ValueError("warmup and weight_decay must be non-negative")
        if not 0 <= self.cond_dropout <= 1:
            raise ValueError("cond_dropout must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["denoiser"] = self.denoiser.to_dict()
        return d

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))


def lr_at(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup from 0 over ``warmup`` optimizer steps, then constant."""
    if warmup <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup)


@dataclass
class TensorDataset:
    """In-memory training tensors for one layer count."""

    latents: torch.Tensor  # (N, layers, 6, H, W)
    global_ids: torch.Tensor  # (N, L)
    layer_ids: torch.Tensor  # (N, layers, L)

    def __len__(self):
        return self.latents.shape[0]


def load_training_tensors(root, vocab: Vocabulary, max_tokens: int, max_samples: int | None = None) -> dict[int, TensorDataset]:
    from ..apps import layer_set_to_latent

    groups: dict[int, list] = {}
    for i, (ls, _) in enumerate(read_dataset(root)):
        if max_samples is not None and i >= max_samples:
            break
        groups.setdefault(ls.num_layers, []).append(
            (
                layer_set_to_latent(ls),
                torch.tensor(vocab.encode(ls.global_prompt, max_tokens)),
                vocab.encode_batch(ls.layer_prompts, max_tokens),
            )
        )
    if not groups:
        raise TrainingError(f"dataset at {root} is empty")
    return {
        n: TensorDataset(torch.stack([a for a, _, _ in rows]), torch.stack([b for _, b, _ in rows]), torch.stack([c for _, _, c in rows]))
        for n, rows in groups.items()
    }


def iterate_batches(data: dict[int, TensorDataset], batch_size: int, rng: np.random.Generator) -> Iterator[tuple[int, np.ndarray]]:
    """Endless (layer count, indices) stream; order is fixed by ``rng``."""
    while True:
        batches = []
        for n in sorted(data):
            perm = rng.permutation(len(data[n]))
            for s in range(0, len(perm), batch_size):
                batches.append((n, perm[s : s + batch_size]))
        for j in rng.permutation(len(batches)):
            yield batches[j]


def diffusion_loss(
    model: LayerDenoiser,
    sched: NoiseSchedule,
    x0: torch.Tensor,
    global_ids: torch.Tensor,
    layer_ids: torch.Tensor,
    rng: np.random.Generator,
    gen: torch.Generator,
    cond_dropout: float = 0.0,
    empty_ids: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared error between injected and predicted noise over image and mask channels."""
    b, n = x0.shape[:2]
    t = torch.tensor([draw_timesteps(n, sched.T, rng).timesteps for _ in range(b)], dtype=torch.long)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x_t = q_sample(sched, x0, t, eps)
    if cond_dropout > 0:
        bundle, _, _ = drop_conditions(PromptBundle(global_ids, layer_ids), cond_dropout, rng, empty_ids)
        global_ids, layer_ids = bundle.global_, bundle.layers
    pred = model(x_t, t, global_ids, layer_ids)
    return F.mse_loss(pred, eps)


def train(config: TrainConfig, resume: str | None = None, progress=None) -> Path:
    """Train and return the path of the final checkpoint.

    Writes ``loss.csv`` (step, loss, lr), periodic ``ckpt_{step}.ckpt`` files,
    ``final.ckpt`` and the resolved config into ``config.out_dir``.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.default()
    dcfg = config.denoiser
    dcfg.vocab_size = len(vocab)
    sched = build_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))

    torch.manual_seed(config.seed)
    model = init_parameters(dcfg, seed=config.seed)
    start, prior_elapsed = 0, 0.0
    if resume:
        ck = load_checkpoint(resume)
        model.load_state_dict(ck.model.state_dict())
        start = int(ck.meta.get("step", 0))
        prior_elapsed = float(ck.meta.get("elapsed_s", 0.0))
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    data = load_training_tensors(config.dataset, vocab, dcfg.max_tokens, config.max_samples)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    batches = iterate_batches(data, config.batch_size, np.random.default_rng([config.seed, 7]))
    empty = torch.tensor(vocab.encode("", dcfg.max_tokens))

    log_path = out / "loss.csv"
    fh = open(log_path, "a" if resume else "w", newline="")
    writer = csv.writer(fh)
    if not resume:
        writer.writerow(["step", "loss", "lr"])
    t0 = time.time()
    try:
        for step in range(start, config.total_steps):
            lr = lr_at(step, config.lr, config.warmup)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            total = 0.0
            for _ in range(config.grad_accum):
                n, idx = next(batches)
                d = data[n]
                idx_t = torch.from_numpy(idx)
                loss = diffusion_loss(
                    model, sched, d.latents[idx_t], d.global_ids[idx_t], d.layer_ids[idx_t],
                    rng, gen, config.cond_dropout, empty,
                )
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at step {step}")
                (loss / config.grad_accum).backward()
                total += loss.item() / config.grad_accum
            opt.step()
            writer.writerow([step, f"{total:.6f}", f"{lr:.3e}"])
            if step % config.log_every == 0:
                fh.flush()
                log.info("step %d loss %.4f lr %.2e (%.1fs)", step, total, lr, time.time() - t0)
            if progress is not None:
                progress(step, total)
            if config.ckpt_every and (step + 1) % config.ckpt_every == 0:
                meta = {"step": step + 1, "elapsed_s": prior_elapsed + time.time() - t0}
                save_checkpoint(out / f"ckpt_{step + 1}.ckpt", model, sched, vocab, meta)
    finally:
        fh.close()
    model.eval()
    return save_checkpoint(out / "final.ckpt", model, sched, vocab, {
        "step": config.total_steps, "elapsed_s": prior_elapsed + time.time() - t0, "config": config.to_dict(),
    })


def read_loss_log(path) -> tuple[np.ndarray, np.ndarray]:
    steps, losses = [], []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    return np.asarray(steps), np.asarray(losses)


def smoothed(losses: np.ndarray, window: int = 100) -> np.ndarray:
    """Trailing moving average."""
    if len(losses) == 0:
        return losses
    c = np.cumsum(np.insert(losses, 0, 0.0))
    w = np.minimum(np.arange(1, len(losses) + 1), window)
    return (c[1:] - c[np.arange(1, len(losses) + 1) - w]) / w
