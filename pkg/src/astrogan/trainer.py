"""Two-stage training: supervised L1 pretraining, then adversarial fine-tuning.

Run directory layout written by :func:`fit`::

    best.weights       generator with the lowest validation L1 so far
    last.weights       generator after the most recent epoch
    last_disc.weights  discriminator after the most recent epoch (adversarial stage)
    optimizer.pt       Adam moments, used to resume
    state.json         epoch counters and loss histories
    history.csv        epoch,g_total,g_adv,g_l1,d_loss,val_l1
    config.json        the TrainConfig of the run
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .colorspace import ContractError, Space
from .datapipe import ColorizationSample, SRSample
from .models import ModelParams, SpecMismatchError, load_params, save_params
from .objective import (
    DEFAULT_LAMBDA,
    LossBreakdown,
    breakdown,
    content_l1,
    discriminator_loss,
    generator_objective,
)

log = logging.getLogger(__name__)

Sample = ColorizationSample | SRSample


class Stage(str, enum.Enum):
    PRETRAIN = "pretrain"
    ADVERSARIAL = "adversarial"


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, sample_ids: Sequence[str] = ()):
        super().__init__(message)
        self.sample_ids = list(sample_ids)


class CheckpointError(OSError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 20
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    patience: int = 10
    lambda_weight: float = DEFAULT_LAMBDA
    seed: int = 0
    stage: Stage = Stage.PRETRAIN

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage", Stage(self.stage))
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if self.lambda_weight < 0:
            raise ContractError(f"lambda_weight must be >= 0, got {self.lambda_weight}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        return d


@dataclass
class TrainState:
    epoch: int = 0
    best_val_l1: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    stopped_early: bool = False
    g_loss_history: list[float] = field(default_factory=list)
    g_adv_history: list[float] = field(default_factory=list)
    g_l1_history: list[float] = field(default_factory=list)
    d_loss_history: list[float] = field(default_factory=list)
    val_l1_history: list[float] = field(default_factory=list)
    g_optimizer: dict | None = field(default=None, repr=False)
    d_optimizer: dict | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("g_optimizer")
        d.pop("d_optimizer")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainState":
        return cls(**d)


# ---------------------------------------------------------------------------
# sample -> tensor plumbing


def sample_arrays(sample: Sample) -> tuple[np.ndarray, np.ndarray]:
    """(condition, target) as H x W x C arrays in network units."""
    if isinstance(sample, SRSample):
        return sample.input_lr.pixels, sample.target_hr.pixels
    x, y = sample.input_l, sample.target_ab
    # RGB-mode colorization trains on [-1, 1] like the Lab mode
    xa = x.pixels if x.space is Space.LAB_NORM else x.pixels * 2.0 - 1.0
    ya = y.pixels if y.space is Space.LAB_NORM else y.pixels * 2.0 - 1.0
    return xa, ya


def stack_samples(samples: Sequence[Sample], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = zip(*(sample_arrays(s) for s in samples))
    x = torch.from_numpy(np.stack(xs).astype(np.float64)).permute(0, 3, 1, 2)
    y = torch.from_numpy(np.stack(ys).astype(np.float64)).permute(0, 3, 1, 2)
    return x.to(dtype).contiguous(), y.to(dtype).contiguous()


def discriminator_input(x: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
    """Pair the condition with a real or generated candidate along channels.

    Low-resolution SR conditions are bicubically upsampled to the candidate size.
    """
    if x.shape[-2:] != candidate.shape[-2:]:
        x = F.interpolate(x, size=candidate.shape[-2:], mode="bicubic", align_corners=False)
    return torch.cat([x, candidate], dim=1)


def _postprocess(gen: ModelParams, out: torch.Tensor) -> torch.Tensor:
    return out.clamp(0.0, 1.0) if gen.spec.kind.is_sr else out


# ---------------------------------------------------------------------------


class Trainer:
    """Holds the Adam optimizers of one training stage.

    Parameters are updated in place on ``gen.module`` / ``disc.module``.
    """

    def __init__(self, gen: ModelParams, disc: ModelParams | None, cfg: TrainConfig):
        self.gen = gen
        self.disc = disc
        self.cfg = cfg
        betas = (cfg.beta1, cfg.beta2)
        self.g_opt = torch.optim.Adam(gen.module.parameters(), lr=cfg.lr, betas=betas)
        self.d_opt = None
        if disc is not None:
            self.d_opt = torch.optim.Adam(disc.module.parameters(), lr=cfg.lr, betas=betas)
            _check_pairing(gen, disc)

    def _tensors(self, batch) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
        if isinstance(batch, tuple):
            return batch
        if not batch:
            raise ContractError("empty batch")
        x, y = stack_samples(batch, self.gen.dtype)
        return x, y, [s.id for s in batch]

    @staticmethod
    def _abort(what: str, pred: torch.Tensor, y: torch.Tensor, ids: list[str]) -> None:
        per_sample = (pred.detach() - y).abs().flatten(1).mean(1)
        bad = [i for i, v in zip(ids, per_sample.tolist()) if not math.isfinite(v)]
        raise TrainingError(f"non-finite {what}; offending samples: {bad or ids}", bad or ids)

    def pretrain_step(self, batch) -> float:
        """One Adam update of the generator on the L1 content loss."""
        x, y, ids = self._tensors(batch)
        self.gen.module.train()
        self.g_opt.zero_grad(set_to_none=True)
        pred = self.gen.module(x)
        loss = content_l1(pred, y)
        if not torch.isfinite(loss):
            self._abort("pretraining loss", pred, y, ids)
        loss.backward()
        self.g_opt.step()
        return loss.item()

    def adversarial_step(self, batch) -> tuple[LossBreakdown, float]:
        """Discriminator update on (x, y) vs (x, G(x)), then one generator update."""
        if self.disc is None:
            raise ContractError("adversarial_step needs a discriminator")
        x, y, ids = self._tensors(batch)
        gen, disc = self.gen.module, self.disc.module
        gen.train()
        disc.train()
        fake = gen(x)
        if not torch.isfinite(fake).all():
            self._abort("generator output", fake, y, ids)

        self.d_opt.zero_grad(set_to_none=True)
        d_loss = discriminator_loss(
            disc(discriminator_input(x, y)), disc(discriminator_input(x, fake.detach()))
        )
        d_loss.backward()
        self.d_opt.step()

        self.g_opt.zero_grad(set_to_none=True)
        logits = disc(discriminator_input(x, fake))
        total, adv, l1 = generator_objective(logits, fake, y, self.cfg.lambda_weight)
        if not torch.isfinite(total):
            self._abort("generator loss", fake, y, ids)
        total.backward()
        self.g_opt.step()
        return breakdown(adv.item(), l1.item(), self.cfg.lambda_weight), d_loss.item()

    def validate(self, x: torch.Tensor, y: torch.Tensor) -> float:
        """Mean absolute error of the generator over a validation set (eval mode)."""
        module = self.gen.module
        was_training = module.training
        module.eval()
        total = 0.0
        count = 0
        bs = self.cfg.batch_size
        with torch.no_grad():
            for i in range(0, len(x), bs):
                pred = _postprocess(self.gen, module(x[i : i + bs]))
                total += float((pred - y[i : i + bs]).abs().sum())
                count += pred.numel()
        module.train(was_training)
        return total / count


def _check_pairing(gen: ModelParams, disc: ModelParams) -> None:
    need = gen.spec.in_channels + gen.spec.out_channels
    if disc.spec.in_channels != need:
        raise ContractError(
            f"discriminator expects {disc.spec.in_channels} channels but "
            f"condition + candidate gives {need}"
        )


# ---------------------------------------------------------------------------
# epoch loop


def _write(path: Path, writer: Callable[[Path], None]) -> None:
    try:
        writer(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def _write_json(obj, path: Path) -> None:
    _write(path, lambda p: p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n"))


def _write_history(state: TrainState, path: Path) -> None:
    def writer(p: Path) -> None:
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "g_total", "g_adv", "g_l1", "d_loss", "val_l1"])
            for i in range(state.epoch):
                w.writerow(
                    [
                        i + 1,
                        repr(state.g_loss_history[i]),
                        repr(state.g_adv_history[i]),
                        repr(state.g_l1_history[i]),
                        repr(state.d_loss_history[i]),
                        repr(state.val_l1_history[i]),
                    ]
                )

    _write(path, writer)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded shuffle for one epoch; independent of any global RNG state."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def fit(
    gen: ModelParams,
    disc: ModelParams | None,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    cfg: TrainConfig,
    run_dir: str | os.PathLike | None = None,
    *,
    val_metric: Callable[[ModelParams], float] | None = None,
    resume: bool = False,
) -> tuple[ModelParams, TrainState]:
    """Train ``gen`` (and ``disc`` in the adversarial stage) with early stopping.

    Returns a copy of the generator at its best validation L1, together with
    the final :class:`TrainState`. ``val_metric`` overrides the validation
    measure; ``resume`` continues from the checkpoints in ``run_dir``.
    """
    if not train_set:
        raise ContractError("training set is empty")
    if not val_set and val_metric is None:
        raise ContractError("validation set is empty")
    adversarial = cfg.stage is Stage.ADVERSARIAL
    if adversarial and disc is None:
        raise ContractError("adversarial stage requires a discriminator")
    if not adversarial:
        disc = None
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        try:
            run.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CheckpointError(f"cannot create run directory {run}: {exc}") from exc
        _write_json(cfg.to_dict(), run / "config.json")

    trainer = Trainer(gen, disc, cfg)
    state = TrainState()
    best = gen.copy()
    if resume:
        if run is None:
            raise ContractError("resume requires a run directory")
        state, best = _restore(run, gen, disc, trainer)

    dtype = gen.dtype
    x_train, y_train = stack_samples(train_set, dtype)
    ids = [s.id for s in train_set]
    if val_metric is None:
        x_val, y_val = stack_samples(val_set, dtype)
        val_metric = lambda _g: trainer.validate(x_val, y_val)  # noqa: E731

    while state.epoch < cfg.epochs and not state.stopped_early:
        order = epoch_order(len(ids), cfg.seed, state.epoch)
        g_tot, g_adv, g_l1, d_losses, weights = [], [], [], [], []
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            batch = (x_train[idx], y_train[idx], [ids[i] for i in idx.tolist()])
            if adversarial:
                parts, d_loss = trainer.adversarial_step(batch)
                g_tot.append(parts.total)
                g_adv.append(parts.adversarial)
                g_l1.append(parts.content_l1)
                d_losses.append(d_loss)
            else:
                loss = trainer.pretrain_step(batch)
                g_tot.append(loss)
                g_adv.append(0.0)
                g_l1.append(loss)
                d_losses.append(0.0)
            weights.append(len(idx))

        val = float(val_metric(gen))
        state.epoch += 1
        for hist, vals in (
            (state.g_loss_history, g_tot),
            (state.g_adv_history, g_adv),
            (state.g_l1_history, g_l1),
            (state.d_loss_history, d_losses),
        ):
            hist.append(float(np.average(vals, weights=weights)))
        state.val_l1_history.append(val)

        if val < state.best_val_l1:
            state.best_val_l1 = val
            state.best_epoch = state.epoch
            state.epochs_since_improvement = 0
            best = gen.copy()
            if run is not None:
                _write(run / "best.weights", lambda p: save_params(best, p))
        else:
            state.epochs_since_improvement += 1
            if state.epochs_since_improvement >= cfg.patience:
                state.stopped_early = True
        log.info(
            "epoch %d: g=%.5f d=%.5f val_l1=%.5f (best %.5f @ %d)",
            state.epoch,
            state.g_loss_history[-1],
            state.d_loss_history[-1],
            val,
            state.best_val_l1,
            state.best_epoch,
        )
        if run is not None:
            _checkpoint(run, gen, disc, trainer, state)

    state.g_optimizer = trainer.g_opt.state_dict()
    state.d_optimizer = trainer.d_opt.state_dict() if trainer.d_opt else None
    return best, state


def _checkpoint(run: Path, gen, disc, trainer: Trainer, state: TrainState) -> None:
    _write(run / "last.weights", lambda p: save_params(gen, p))
    if disc is not None:
        _write(run / "last_disc.weights", lambda p: save_params(disc, p))
    opt = {"g": trainer.g_opt.state_dict(), "d": trainer.d_opt.state_dict() if trainer.d_opt else None}
    _write(run / "optimizer.pt", lambda p: torch.save(opt, p))
    _write_json(state.to_json(), run / "state.json")
    _write_history(state, run / "history.csv")


def _restore(run: Path, gen: ModelParams, disc, trainer: Trainer):
    state = TrainState.from_json(json.loads((run / "state.json").read_text()))
    gen.module.load_state_dict(load_params(run / "last.weights", gen.spec).module.state_dict())
    if disc is not None:
        disc.module.load_state_dict(
            load_params(run / "last_disc.weights", disc.spec).module.state_dict()
        )
    opt = torch.load(run / "optimizer.pt", map_location="cpu", weights_only=True)
    trainer.g_opt.load_state_dict(opt["g"])
    if trainer.d_opt is not None and opt["d"] is not None:
        trainer.d_opt.load_state_dict(opt["d"])
    best_path = run / "best.weights"
    best = load_params(best_path, gen.spec) if best_path.exists() else gen.copy()
    best.module.to(gen.dtype)
    return state, best


def pretrain(
    gen: ModelParams,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    cfg: TrainConfig,
    run_dir: str | os.PathLike | None = None,
) -> tuple[ModelParams, TrainState]:
    return fit(gen, None, train_set, val_set, replace(cfg, stage=Stage.PRETRAIN), run_dir)


def fine_tune(
    gen: ModelParams | str | os.PathLike,
    disc: ModelParams | str | os.PathLike,
    astro_train: Sequence[Sample],
    astro_val: Sequence[Sample],
    cfg: TrainConfig,
    run_dir: str | os.PathLike | None = None,
    *,
    gen_spec=None,
    disc_spec=None,
) -> tuple[ModelParams, TrainState]:
    """Adversarial fine-tuning of a pretrained pair with fresh optimizer state.

    ``gen``/``disc`` may be checkpoint paths; ``gen_spec``/``disc_spec``, when
    given, must match the specs recorded in those checkpoints.
    """
    if not isinstance(gen, ModelParams):
        gen = load_params(gen, gen_spec)
    elif gen_spec is not None and gen.spec != gen_spec:
        raise SpecMismatchError(gen_spec, gen.spec)
    if not isinstance(disc, ModelParams):
        disc = load_params(disc, disc_spec)
    elif disc_spec is not None and disc.spec != disc_spec:
        raise SpecMismatchError(disc_spec, disc.spec)
    return fit(gen, disc, astro_train, astro_val, replace(cfg, stage=Stage.ADVERSARIAL), run_dir)
