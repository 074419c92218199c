"""ADAM training with early stopping, window-based evaluation and the
attention / objective ablation harness."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import (aggregate_patches, build_tile_index, extract_patches, scale_cer, transform_cot,
                   unscale_cer)
from .errors import ConfigError, ContractError, NumericalError
from .losses import L2_WEIGHTS, LossConfig, evaluate_fields, mae, mse, mto_loss
from .model import ModelConfig, build_model, predict

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "cot_val_mae", "cer_val_mae")
ABLATION_COLUMNS = ("method", "objective", "cot_mae", "cot_mae_std", "cer_mae", "cer_mae_std")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch: int = 128
    max_epochs: int = 1000
    patience: int = 50
    loss: str = "MTO"  # "MTO" or "L2"
    lambda1: float = 1.0
    lambda2: float = 15.0
    seed: int = 0
    micro_batch: int = 16  # forward/backward shard size; gradients are reduced in order
    stride: int = 40

    def validate(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch < 1 or self.micro_batch < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("batch, micro_batch, patience and max_epochs must be >= 1")
        if self.loss not in ("MTO", "L2"):
            raise ConfigError(f"loss must be 'MTO' or 'L2', got {self.loss!r}")
        self.loss_config().validate()
        return self

    def loss_config(self):
        return LossConfig(self.lambda1, self.lambda2) if self.loss == "MTO" else L2_WEIGHTS


# -- optimizer -----------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, state, lr):
    """One in-place ADAM update of ``params`` (name -> Tensor) from their ``.grad``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ContractError(f"parameter {name} has no gradient")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- datasets ------------------------------------------------------------

@dataclass
class PatchDataset:
    radiance: np.ndarray  # [N, 2, w, w]
    cot: np.ndarray  # [N, 1, w, w], log(COT + 1)
    cer: np.ndarray  # [N, 1, w, w], CER / 30

    def __len__(self):
        return len(self.radiance)

    def subset(self, idx):
        return PatchDataset(self.radiance[idx], self.cot[idx], self.cer[idx])


def patches_from_profiles(profiles, window=64, stride=40):
    """Materialize every tile of every profile as a training example."""
    rad, cot, cer = [], [], []
    for prof in profiles:
        idx = build_tile_index(*prof.shape, window=window, stride=stride)
        rad.extend(extract_patches(prof.radiance, idx))
        cot.extend(p[None] for p in extract_patches(transform_cot(prof.cot), idx))
        cer.extend(p[None] for p in extract_patches(scale_cer(prof.cer), idx))
    if not rad:
        raise ConfigError("no patches: empty profile list")
    return PatchDataset(np.stack(rad), np.stack(cot), np.stack(cer))


# -- loss evaluation -----------------------------------------------------

def _batch_loss_and_grad(model, data, idx, loss_cfg, micro, with_grad):
    """Loss over ``idx`` (mean over all its pixels); accumulates gradients when asked."""
    total = 0.0
    n = len(idx)
    for lo in range(0, n, micro):
        part = idx[lo:lo + micro]
        w = len(part) / n
        if with_grad:
            cot, cer = model(data.radiance[part])
            loss = mto_loss(data.cot[part], cot, data.cer[part], cer, loss_cfg)
            T.backward(T.scalar_mul(loss, w))
        else:
            with T.no_grad():
                cot, cer = model(data.radiance[part])
                loss = mto_loss(data.cot[part], cot, data.cer[part], cer, loss_cfg)
        total += w * loss.item()
    return total


def dataset_loss(model, data, loss_cfg, micro=16):
    return _batch_loss_and_grad(model, data, np.arange(len(data)), loss_cfg, micro, with_grad=False)


def _val_stats(model, data, loss_cfg, micro):
    cot, cer = predict(model, data.radiance, batch=micro)
    loss = loss_cfg.lambda1 * mse(data.cot, cot) + loss_cfg.lambda2 * mse(data.cer, cer)
    return loss, mae(data.cot, cot), mae(unscale_cer(data.cer), unscale_cer(cer))


# -- training loop -------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    cot_val_mae: float
    cer_val_mae: float


@dataclass
class BestCheckpoint:
    epoch: int
    val_loss: float
    state: dict

    def restore(self, model):
        model.load_state_dict(self.state)
        return model


def train(model, train_data, val_data, cfg=TrainConfig(), stop_when=None, restore_best=True):
    """Minibatch ADAM with early stopping on validation loss.

    ``stop_when(record)`` may end training early (e.g. once a loss target
    is met). Returns ``(best_checkpoint, history)``; with ``restore_best``
    the model is left holding the best weights.
    """
    cfg.validate()
    if len(train_data) == 0 or len(val_data) == 0:
        raise ConfigError("train and validation sets must be nonempty")
    loss_cfg = cfg.loss_config()
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = []
    best = None
    since_best = 0
    n = len(train_data)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, cfg.batch):
            idx = order[lo:lo + cfg.batch]
            model.zero_grad()
            loss = _batch_loss_and_grad(model, train_data, idx, loss_cfg, cfg.micro_batch, with_grad=True)
            if not math.isfinite(loss):
                last = history[-1].epoch if history else 0
                raise NumericalError(f"non-finite training loss in epoch {epoch}; last finite epoch {last}")
            adam_step(model.params, state, cfg.lr)
            batch_losses.append(loss)

        val_loss, cot_mae, cer_mae = _val_stats(model, val_data, loss_cfg, cfg.micro_batch)
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss in epoch {epoch}; last finite epoch {epoch - 1}")
        rec = EpochRecord(epoch, float(np.mean(batch_losses)), val_loss, cot_mae, cer_mae)
        history.append(rec)
        log.debug("epoch %d train %.6g val %.6g", epoch, rec.train_loss, val_loss)

        if best is None or val_loss < best.val_loss:
            best = BestCheckpoint(epoch, val_loss, model.state_dict())
            since_best = 0
        else:
            since_best += 1
        if since_best >= cfg.patience:
            break
        if stop_when is not None and stop_when(rec):
            break

    if restore_best:
        best.restore(model)
    return best, history


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.cot_val_mae), repr(r.cer_val_mae)])
    return buf.getvalue()


# -- window-based retrieval and evaluation -------------------------------

def retrieve_profile(model, radiance, stride=40, batch=16):
    """Tile a [2, H, W] radiance field, predict each window and average overlaps.

    Returns (log-COT, CER in micrometres), each [H, W].
    """
    radiance = np.asarray(radiance, dtype=np.float64)
    idx = build_tile_index(radiance.shape[1], radiance.shape[2], model.config.window, stride)
    patches = np.stack(extract_patches(radiance, idx))
    cot, cer = predict(model, patches, batch=batch)
    return aggregate_patches(list(cot), idx), unscale_cer(aggregate_patches(list(cer), idx))


def evaluate_model(model, profiles, stride=40, mask_cloudy=False):
    pairs = []
    for prof in profiles:
        pc, pr = retrieve_profile(model, prof.radiance, stride)
        pairs.append((transform_cot(prof.cot), pc, prof.cer, pr))
    return evaluate_fields(pairs, mask_cloudy=mask_cloudy)


# -- ablation ------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    method: str
    use_attention: bool
    use_dual_heads: bool
    loss: str


DEFAULT_VARIANTS = (
    Variant("UNet [w/o Attention]", False, False, "L2"),
    Variant("UNet [w/ Attention]", True, False, "L2"),
    Variant("CAM [w/ Attention]", True, True, "L2"),
    Variant("CAM [w/ Attention]", True, True, "MTO"),
)

# Reference MAEs measured on LES scenes, kept for side-by-side reporting only.
REFERENCE_ABLATION = {
    ("UNet [w/o Attention]", "L2"): (0.065, 0.435),
    ("CloudUNet", "L2"): (0.070, 0.407),
    ("UNet [w/ Attention]", "L2"): (0.056, 0.425),
    ("CAM [w/ Attention]", "L2"): (0.044, 0.291),
    ("CAM [w/ Attention]", "MTO"): (0.043, 0.252),
}


@dataclass
class AblationRow:
    method: str
    objective: str
    cot_mae: float
    cot_mae_std: float
    cer_mae: float
    cer_mae_std: float


def run_ablation(train_profiles, val_profiles, test_profiles, base_model=ModelConfig(), base_cfg=TrainConfig(),
                 variants=DEFAULT_VARIANTS, seeds=(0,)):
    """Train one model per (variant, seed) on identical data and score on held-out profiles.

    Every variant sees the same patches, initialisation seed and shuffling
    seed; mean and standard deviation are taken across ``seeds``.
    """
    tr = patches_from_profiles(train_profiles, base_model.window, base_cfg.stride)
    va = patches_from_profiles(val_profiles, base_model.window, base_cfg.stride)
    rows = []
    for v in variants:
        cots, cers = [], []
        for seed in seeds:
            mcfg = replace(base_model, use_attention=v.use_attention, use_dual_heads=v.use_dual_heads)
            model = build_model(mcfg, seed=seed)
            train(model, tr, va, replace(base_cfg, loss=v.loss, seed=seed))
            rep = evaluate_model(model, test_profiles, base_cfg.stride)
            cots.append(rep.cot.mae)
            cers.append(rep.cer.mae)
        rows.append(AblationRow(v.method, v.loss, float(np.mean(cots)), float(np.std(cots)),
                                float(np.mean(cers)), float(np.std(cers))))
    return rows


def ablation_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r.method, r.objective, f"{r.cot_mae:.6f}", f"{r.cot_mae_std:.6f}",
                    f"{r.cer_mae:.6f}", f"{r.cer_mae_std:.6f}"])
    return buf.getvalue()
