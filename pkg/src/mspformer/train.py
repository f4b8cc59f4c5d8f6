# train.py

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import tensor as T
from .analysis import charbonnier
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .errors import FormatError, InputError, NumericError
from .model import forward
from .optimizer import OptimState, adamw_step, clip_grad_norm, lr_at
from .snowsynth import derive_seed

logger = logging.getLogger(__name__)

METRICS_LOG = "metrics.log"
LOG_FIELDS = ("epoch", "lr", "loss", "secs")


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)  # one per optimizer step
    epoch: int = 0
    step: int = 0
    final_path: str = ""


def format_log_line(epoch, lr, loss, secs):
    return f"epoch={epoch} lr={lr:.8f} loss={loss:.8f} secs={secs:.3f}"


def read_metrics_log(path):
    """Parses ``epoch=<n> lr=<f> loss=<f> secs=<f>`` lines into a DataFrame."""
    rows = []
    offset = 0
    with open(path, "rb") as f:
        raw = f.read()
    for line in raw.decode("utf-8").splitlines(keepends=True):
        text = line.strip()
        if text:
            pairs = dict(part.partition("=")[::2] for part in text.split())
            if tuple(pairs) != LOG_FIELDS:
                raise FormatError(f"malformed metrics line {text!r}", offset=offset)
            try:
                rows.append({"epoch": int(pairs["epoch"]), "lr": float(pairs["lr"]),
                             "loss": float(pairs["loss"]), "secs": float(pairs["secs"])})
            except ValueError:
                raise FormatError(f"malformed metrics value in {text!r}", offset=offset) from None
        offset += len(line.encode("utf-8"))
    return pd.DataFrame(rows, columns=list(LOG_FIELDS))


def train_step(model, snowy, clean, state, lr, cfg: TrainConfig):
    """Forward, Charbonnier loss, backward and one AdamW update; returns the loss value."""
    model.zero_grad()
    with T.Tape() as tape:
        pred = forward(model, T.Tensor(snowy))
        loss = charbonnier(pred, T.Tensor(clean), cfg.charbonnier_eps)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    tape.backward(loss)
    named = model.named_parameters()
    if cfg.clip_grad > 0:
        clip_grad_norm(named, cfg.clip_grad)
    adamw_step(named, state, lr)
    return value


def train_loop(model, dataset, cfg: TrainConfig, out_dir, state: OptimState = None,
               start_epoch=0, start_step=0, deterministic=False, config_text=""):
    """Runs epochs ``start_epoch .. cfg.epochs - 1`` and writes checkpoints plus the metrics log.

    Each epoch draws its shuffle and augmentations from a generator seeded by
    ``derive_seed(cfg.seed, epoch)``, so a resumed run repeats the draws of
    an uninterrupted one. ``last_good.mspf`` always holds the newest finite state.
    """
    if len(dataset) == 0:
        raise InputError("training dataset is empty")
    os.makedirs(out_dir, exist_ok=True)
    schedule = cfg.schedule()
    state = state if state is not None else cfg.optim_state()
    result = TrainResult(epoch=start_epoch, step=start_step)
    log_path = os.path.join(out_dir, METRICS_LOG)
    last_good = os.path.join(out_dir, "last_good.mspf")

    def save(path):
        meta = {"epoch": result.epoch, "step": result.step}
        save_checkpoint(path, model, state, meta, config_text)

    save(last_good)
    mode = "a" if start_epoch > 0 and os.path.exists(log_path) else "w"
    with open(log_path, mode, encoding="utf-8", newline="\n") as log:
        for epoch in range(start_epoch, cfg.epochs):
            started = time.perf_counter()
            rng = np.random.default_rng(derive_seed(cfg.seed, epoch))
            lr = lr_at(epoch, schedule)
            order = rng.permutation(len(dataset))
            epoch_losses = []
            for first in range(0, len(order), cfg.batch):
                snowy, clean = dataset.batch(order[first:first + cfg.batch], rng, cfg.crop)
                try:
                    value = train_step(model, snowy, clean, state, lr, cfg)
                except NumericError:
                    logger.warning("aborting epoch=%d step=%d; last good checkpoint kept at %s",
                                   epoch + 1, result.step, last_good)
                    raise
                result.step += 1
                epoch_losses.append(value)
                logger.debug("epoch=%d step=%d loss=%.6f", epoch + 1, result.step, value)
                if cfg.max_steps and result.step >= cfg.max_steps:
                    break

            result.epoch = epoch + 1
            result.losses.extend(epoch_losses)
            secs = 0.0 if deterministic else time.perf_counter() - started
            line = format_log_line(result.epoch, lr, float(np.mean(epoch_losses)), secs)
            log.write(line + "\n")
            log.flush()
            logger.info(line)

            if result.epoch % cfg.checkpoint_every == 0:
                save(os.path.join(out_dir, f"epoch_{result.epoch:04d}.mspf"))
            save(last_good)
            if cfg.max_steps and result.step >= cfg.max_steps:
                logger.info("max_steps=%d reached", cfg.max_steps)
                break

    result.final_path = os.path.join(out_dir, "final.mspf")
    save(result.final_path)
    return result
