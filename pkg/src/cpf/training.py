"""Adam optimization of the head under the joint loss.

Schedule: base lr with one step decay at a configurable epoch. All
randomness (init, per-epoch shuffles) derives from a single seed through
numpy SeedSequence spawn keys, so identically-configured runs are
bit-identical, including the textual TrainLog.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, CpfError, NumericError
from .model import CompositionSpace, CpfParams, FeatureBundle, TextEmbeddings, forward_losses
from .tensor import Tape, backward


@dataclass
class TrainConfig:
    epochs: int = 10
    base_lr: float = 1e-4
    decay_factor: float = 0.1
    decay_epoch: int = 5
    batch_size: int = 1
    seed: int = 0
    alpha1: float = 0.6
    alpha2: float = 0.4
    tau: float = 0.05
    shallow_blocks: tuple[int, ...] | None = None  # indices into stored blocks; None = all
    comp_dim: int | None = None  # joint composition width; None = text width
    variant: str = "full"
    full_train_softmax: bool = False
    log_every: int = 10

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.decay_factor <= 0:
            raise ConfigError("decay_factor must be positive")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        return self


@dataclass
class AdamState:
    """First/second moment estimates per parameter, plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: CpfParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.named_tensors()},
            v={name: np.zeros_like(t.data) for name, t in params.named_tensors()},
        )


def adam_step(params: CpfParams, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place; grads are read off the tensors."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, tensor in params.named_tensors():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        elif not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: base lr before decay_epoch, base * factor afterwards."""
    if not 0 <= epoch < max(config.epochs, 1):
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.decay_epoch:
        return config.base_lr
    return config.base_lr * config.decay_factor


@dataclass
class TrainLog:
    """Step records plus per-epoch means; serialized as line-delimited text.

    Record columns: epoch, step, lr, L_com, L_att, L_obj, L_total. Epoch
    summary rows use step = -1 and carry the sample-weighted epoch means.
    """

    records: list[tuple[int, int, float, float, float, float, float]] = field(default_factory=list)

    def epoch_means(self) -> list[tuple[float, float, float, float]]:
        return [r[3:] for r in self.records if r[1] == -1]

    def to_lines(self) -> list[str]:
        return [
            f"{e}, {s}, {lr!r}, {lc!r}, {la!r}, {lo!r}, {lt!r}"
            for e, s, lr, lc, la, lo, lt in self.records
        ]

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + ("\n" if self.records else "")


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # Stateless split: each epoch's shuffle comes from its own child stream.
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, epoch)))


def init_params(
    train_set: Sequence[FeatureBundle], text: TextEmbeddings, config: TrainConfig
) -> CpfParams:
    """Seeded parameter initialization shaped by the data and text tables."""
    probe = train_set[0]
    n_blocks = len(probe.shallow_blocks) if config.shallow_blocks is None else len(config.shallow_blocks)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    return CpfParams.initialize(
        visual_dim=probe.deep_class.shape[0],
        text_dim=text.dim,
        n_blocks=n_blocks,
        rng=rng,
        comp_dim=config.comp_dim,
        tau=config.tau,
        alpha1=config.alpha1,
        alpha2=config.alpha2,
    )


def train(
    train_set: Sequence[FeatureBundle],
    text: TextEmbeddings,
    space: CompositionSpace,
    config: TrainConfig,
    params: CpfParams | None = None,
) -> tuple[CpfParams, TrainLog]:
    """Optimize the head; deterministic given (data, config.seed)."""
    config.validate()
    if not train_set:
        raise ConfigError("training set is empty")
    if config.shallow_blocks is not None:
        train_set = [b.select_blocks(config.shallow_blocks) for b in train_set]
    if params is None:
        params = init_params(train_set, text, config)
    state = AdamState.for_params(params)
    log = TrainLog()
    n = len(train_set)
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = _epoch_rng(config.seed, epoch).permutation(n)
        epoch_sums = np.zeros(4)
        for start in range(0, n, config.batch_size):
            batch = [train_set[i] for i in order[start : start + config.batch_size]]
            try:
                with Tape() as tape:
                    losses = forward_losses(
                        batch,
                        text,
                        params,
                        space,
                        variant=config.variant,
                        full_train_softmax=config.full_train_softmax,
                    )
                    values = losses.values()
                    backward(tape, losses.l_total)
                adam_step(params, state, lr)
            except CpfError as err:
                raise type(err)(f"epoch {epoch} step {step}: {err}") from err
            finally:
                params.zero_grads()
            epoch_sums += np.array(values) * len(batch)
            if step % config.log_every == 0:
                log.records.append((epoch, step, lr, *values))
            step += 1
        means = (epoch_sums / n).tolist()
        log.records.append((epoch, -1, lr, *means))
    return params, log
