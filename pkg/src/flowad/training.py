"""Maximum-likelihood training of the flow decoders.

Per optimizer step, a mini-batch of feature vectors is drawn from a few
random training pyramids together with the positional encodings of the
sampled grid locations; the loss is the empirical negative log-likelihood
with the dimension-dependent constant dropped,

    (1/N) * sum_i [ ||u_i||^2 / 2 - logdet_i ],

minimized with bias-corrected Adam under linear warmup plus cosine
annealing to zero.

Determinism: the RNG for step s of epoch e on scale k is derived from
(seed, k, e, s), so resumed runs consume exactly the same draws as
uninterrupted ones and checkpoints are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, TrainingError
from .feature_store import FeaturePyramid
from .flow_core import FlowModel, positional_encoding_grid
from .numerics import GradTape, backward


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    epochs: int = 100
    image_batch: int = 32
    vector_batch: int = 8192
    warmup_epochs: int = 2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.image_batch < 1 or self.vector_batch < 1:
            raise ConfigError("epochs and batch sizes must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs)")
        if self.vector_batch < self.image_batch:
            raise ConfigError("vector_batch must be >= image_batch")


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != param shape "
                              f"{p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_schedule(config: TrainConfig, epoch: int, step_in_epoch: int,
                steps_per_epoch: int) -> float:
    """Linear warmup to learning_rate, then cosine annealing to zero.

    The first step uses lr/warmup_steps rather than zero; the last step
    of warmup is exactly learning_rate; the final training step is zero.
    """
    if epoch >= config.epochs:
        raise ConfigError(f"epoch {epoch} outside configured {config.epochs}")
    gs = epoch * steps_per_epoch + step_in_epoch
    warmup = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if gs < warmup:
        return config.learning_rate * (gs + 1) / warmup
    span = max(total - 1 - warmup, 1)
    t = (gs - warmup) / span
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * t))


def sample_batch(pyramids: list[FeaturePyramid], scale: int,
                 config: TrainConfig,
                 rng: np.random.Generator,
                 pe_cache: np.ndarray | None = None,
                 cond_dim: int | None = None,
                 pe_base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """Draw (z, c) rows: a few random images, uniform positions per image."""
    if not pyramids:
        raise ConfigError("train set is empty")
    h, w, d = pyramids[0].scales[scale].shape
    if pe_cache is None:
        pe_cache = positional_encoding_grid(h, w, cond_dim or 0, pe_base)

    n = len(pyramids)
    k = min(config.image_batch, config.vector_batch)
    if n >= k:
        img_idx = rng.choice(n, size=k, replace=False)
    else:
        img_idx = rng.integers(0, n, size=k)

    base, extra = divmod(config.vector_batch, k)
    zs, cs = [], []
    for slot, i in enumerate(img_idx):
        count = base + (1 if slot < extra else 0)
        flat = rng.integers(0, h * w, size=count)
        zmap = pyramids[i].scales[scale].reshape(h * w, d)
        zs.append(zmap[flat])
        cs.append(pe_cache[flat])
    return np.concatenate(zs, axis=0), np.concatenate(cs, axis=0)


def cflow_loss(tape: GradTape, decoder, params, z: np.ndarray,
               c: np.ndarray) -> nx.Tensor:
    """Traced mean of ||u||^2/2 - logdet over the batch."""
    n = z.shape[0]
    if n < 1:
        raise ConfigError("loss needs a non-empty batch")
    zt = tape.watch(z)
    ct = tape.watch(c)
    u, logdet = decoder.traced_inverse(tape, zt, ct, params)
    per_row = nx.sub(nx.scale(nx.row_sum(nx.square(u)), 0.5), logdet)
    return nx.scale(nx.sum_all(per_row), 1.0 / n)


@dataclass
class EpochRecord:
    epoch: int
    scale: int
    mean_loss: float


def write_loss_csv(path: str | Path, records: list[EpochRecord]) -> None:
    lines = ["epoch,scale,mean_loss"]
    lines += [f"{r.epoch},{r.scale},{r.mean_loss:.17g}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


class Trainer:
    """Drives per-scale training with resumable epoch-level state."""

    def __init__(self, model: FlowModel, pyramids: list[FeaturePyramid],
                 config: TrainConfig):
        if not pyramids:
            raise ConfigError("train set is empty")
        if len({p.num_scales for p in pyramids}) != 1:
            raise ConfigError("pyramids disagree on scale count")
        if pyramids[0].num_scales != model.num_scales:
            raise ConfigError(
                f"model has {model.num_scales} scales, data has "
                f"{pyramids[0].num_scales}")
        self.model = model
        self.pyramids = pyramids
        self.config = config
        self.adam = [AdamState() for _ in model.decoders]
        self.completed_epochs = 0
        self.records: list[EpochRecord] = []
        self._pe = []
        for k, dec in enumerate(model.decoders):
            h, w, d = pyramids[0].scales[k].shape
            if d != dec.dim:
                raise ConfigError(
                    f"scale {k}: decoder dim {dec.dim} != feature depth {d}")
            self._pe.append(positional_encoding_grid(h, w, dec.cond_dim,
                                                     dec.pe_base))

    def steps_per_epoch(self, scale: int) -> int:
        h, w, _ = self.pyramids[0].scales[scale].shape
        total = h * w * len(self.pyramids)
        return max(1, math.ceil(total / self.config.vector_batch))

    def _train_scale_epoch(self, scale: int, epoch: int) -> float:
        dec = self.model.scale(scale)
        cfg = self.config
        spe = self.steps_per_epoch(scale)
        losses = []
        for step in range(spe):
            rng = np.random.default_rng([cfg.seed, scale, epoch, step])
            z, c = sample_batch(self.pyramids, scale, cfg, rng,
                                pe_cache=self._pe[scale])
            tape = GradTape()
            params = dec.register_parameters(tape)
            loss = cflow_loss(tape, dec, params, z, c)
            loss_val = float(np.asarray(loss.data).reshape(()))
            if not np.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite loss at scale {scale} epoch {epoch} "
                    f"step {step}")
            grads = backward(tape, loss)
            lr = lr_schedule(cfg, epoch, step, spe)
            values = dict(_named_layer_arrays(dec))
            adam_step(values, grads, self.adam[scale], lr,
                      cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(loss_val)
        return float(np.mean(losses))

    def train_epoch(self, epoch: int) -> list[EpochRecord]:
        recs = []
        for k in range(self.model.num_scales):
            mean_loss = self._train_scale_epoch(k, epoch)
            recs.append(EpochRecord(epoch=epoch, scale=k, mean_loss=mean_loss))
        self.records.extend(recs)
        self.completed_epochs = epoch + 1
        return recs

    def train(self, log=None) -> list[EpochRecord]:
        for epoch in range(self.completed_epochs, self.config.epochs):
            recs = self.train_epoch(epoch)
            if log is not None:
                summary = " ".join(f"scale{r.scale}={r.mean_loss:.4f}"
                                   for r in recs)
                log(f"epoch {epoch + 1}/{self.config.epochs} {summary}")
        return self.records

    # -- resumable state ---------------------------------------------------

    def save_state(self, path: str | Path) -> None:
        blob: dict[str, np.ndarray] = {
            "completed_epochs": np.asarray(self.completed_epochs),
            "num_scales": np.asarray(self.model.num_scales),
        }
        for k, dec in enumerate(self.model.decoders):
            blob[f"params{k}"] = dec.get_parameters()
            blob[f"adam_t{k}"] = np.asarray(self.adam[k].t)
            for name, arr in self.adam[k].m.items():
                blob[f"m{k}.{name}"] = arr
            for name, arr in self.adam[k].v.items():
                blob[f"v{k}.{name}"] = arr
        losses = np.asarray([[r.epoch, r.scale, r.mean_loss]
                             for r in self.records]).reshape(-1, 3)
        blob["records"] = losses
        np.savez(path, **blob)

    def load_state(self, path: str | Path) -> None:
        with np.load(path) as blob:
            if int(blob["num_scales"]) != self.model.num_scales:
                raise ConfigError("resume state has a different scale count")
            self.completed_epochs = int(blob["completed_epochs"])
            for k, dec in enumerate(self.model.decoders):
                dec.set_parameters(blob[f"params{k}"])
                self.adam[k] = AdamState(t=int(blob[f"adam_t{k}"]))
                for key in blob.files:
                    if key.startswith(f"m{k}."):
                        self.adam[k].m[key[len(f"m{k}."):]] = blob[key].copy()
                    elif key.startswith(f"v{k}."):
                        self.adam[k].v[key[len(f"v{k}."):]] = blob[key].copy()
            self.records = [
                EpochRecord(epoch=int(e), scale=int(s), mean_loss=float(l))
                for e, s, l in blob["records"]]


def _named_layer_arrays(dec) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, layer in enumerate(dec.layers):
        for name, arr in layer.parameter_arrays():
            out.append((f"L{i}.{name}", arr))
    return out
