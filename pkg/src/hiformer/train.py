"""Loss, desk-scale training loop, and model evaluation.

The loop keeps a deterministic contract: all randomness (split, shuffle,
augmentation) derives from (seed, purpose, epoch) seed sequences, so a
run resumed at an epoch boundary replays the exact stream the unbroken
run would have used.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .data import augment, split_dataset
from .errors import DivergedLoss, LabelOutOfRange
from .metrics import aggregate_metrics
from .nn import SGD
from .tensor import Tensor, no_grad

DICE_SMOOTH = 1.0


def one_hot(mask, num_classes, dtype=np.float32):
    mask = np.asarray(mask)
    lo, hi = int(mask.min()), int(mask.max())
    if lo < 0 or hi >= num_classes:
        raise LabelOutOfRange(f"labels span [{lo}, {hi}] but K={num_classes}")
    eye = np.eye(num_classes, dtype=dtype)
    return eye[mask]


def seg_loss(logits, mask):
    """0.5 * cross-entropy + 0.5 * (1 - soft Dice over foreground).

    The Dice term uses class probabilities with additive smoothing 1 in
    numerator and denominator, averaged over the non-background classes.
    """
    N, K, H, W = logits.shape
    target = one_hot(mask, K, dtype=logits.dtype)  # (N, H, W, K)
    logp = T.log_softmax_lastdim(logits.transpose(0, 2, 3, 1))
    tgt = Tensor(target)
    ce = -(logp * tgt).sum() / float(N * H * W)

    probs = T.exp(logp)
    inter = (probs * tgt).sum(axis=(0, 1, 2))
    psum = probs.sum(axis=(0, 1, 2))
    gsum = Tensor(target.sum(axis=(0, 1, 2)))
    dice_all = (2.0 * inter + DICE_SMOOTH) / (psum + gsum + DICE_SMOOTH)
    dice_fg = dice_all[1:].mean()
    return 0.5 * ce + 0.5 * (1.0 - dice_fg)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    val_frac: float = 0.2
    use_augment: bool = True
    poly_decay: bool = False
    poly_power: float = 0.9
    out: str = None  # best-checkpoint path; sidecars <out>.last / <out>.state.json
    log_path: str = None
    resume: bool = False


@dataclass
class TrainState:
    seed: int
    epoch: int = 0  # epochs completed
    step: int = 0
    best_dice: float = -1.0
    history: list = field(default_factory=list)


def _epoch_lr(cfg, epoch):
    if not cfg.poly_decay:
        return cfg.lr
    return cfg.lr * (1.0 - epoch / max(cfg.epochs, 1)) ** cfg.poly_power


def _make_batch(samples, indices, rng, use_augment):
    picked = [samples[i] for i in indices]
    if use_augment:
        picked = [augment(s, rng) for s in picked]
    images = np.stack([s.image for s in picked]).astype(np.float32)
    masks = np.stack([s.mask for s in picked])
    return images, masks


def predict_masks(model, samples, batch_size=10):
    """Argmax class maps for a list of samples, batched, no autodiff."""
    model.eval()
    preds = []
    with no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            images = np.stack([s.image for s in chunk]).astype(np.float32)
            logits = model(Tensor(images))
            preds.extend(np.argmax(logits.data, axis=1).astype(np.int64))
    return preds


def evaluate_model(model, samples, num_classes, batch_size=10):
    preds = predict_masks(model, samples, batch_size)
    return aggregate_metrics(zip(preds, (s.mask for s in samples)), num_classes)


def _state_path(out):
    return out + ".state.json"


def _last_path(out):
    return out + ".last"


def _save_progress(model, opt, state, cfg):
    if not cfg.out:
        return
    arrays = ckpt_io.model_arrays(model)
    arrays.update(opt.state_arrays())
    ckpt_io.save_arrays(_last_path(cfg.out), arrays)
    with open(_state_path(cfg.out), "w", encoding="utf-8") as fh:
        json.dump(asdict(state), fh, indent=2)


def _try_resume(model, opt, cfg):
    state_file = _state_path(cfg.out) if cfg.out else None
    if not (cfg.resume and state_file and os.path.exists(state_file)
            and os.path.exists(_last_path(cfg.out))):
        return None
    with open(state_file, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    arrays = ckpt_io.load_arrays(_last_path(cfg.out))
    model_keys = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    ckpt_io.load_into_model(model, model_keys)
    opt.load_state_arrays(arrays)
    return TrainState(**raw)


def train(model, samples, cfg):
    """Run the loop; returns (TrainState, history records).

    Emits one JSON-lines record per epoch with train loss and validation
    metrics; checkpoints the best foreground Dice to cfg.out and full
    progress (with momentum buffers) to <out>.last for resuming.
    """
    num_classes = model.cfg.num_classes
    train_set, val_set = split_dataset(samples, cfg.val_frac, cfg.seed)
    if not train_set:
        raise ValueError("training split is empty")
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    state = _try_resume(model, opt, cfg) or TrainState(seed=cfg.seed)

    for epoch in range(state.epoch, cfg.epochs):
        shuffle_rng = np.random.default_rng([cfg.seed, 1, epoch])
        aug_rng = np.random.default_rng([cfg.seed, 2, epoch])
        order = shuffle_rng.permutation(len(train_set))
        opt.lr = _epoch_lr(cfg, epoch)

        model.train()
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            images, masks = _make_batch(
                train_set, order[lo:lo + cfg.batch_size], aug_rng, cfg.use_augment
            )
            logits = model(Tensor(images))
            loss = seg_loss(logits, masks)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergedLoss(state.step, value)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
            state.step += 1

        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "lr": opt.lr,
            "train_size": len(train_set),
            "val_size": len(val_set),
        }
        if val_set:
            report = evaluate_model(model, val_set, num_classes, cfg.batch_size)
            record.update({k: report.mean[k] for k in report.mean})
            if record["dsc"] > state.best_dice:
                state.best_dice = record["dsc"]
                if cfg.out:
                    ckpt_io.save_model(model, cfg.out)
        elif cfg.out:
            ckpt_io.save_model(model, cfg.out)

        state.epoch = epoch + 1
        state.history.append(record)
        if cfg.log_path:
            with open(cfg.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        _save_progress(model, opt, state, cfg)

    if cfg.out and cfg.epochs == 0:
        # Zero-epoch run still materializes the initialization.
        ckpt_io.save_model(model, cfg.out)
    return state, state.history
