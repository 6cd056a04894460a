"""Loss, optimizer and the two-phase training schedule.

The loss pairs pixel-weighted binary cross-entropy with a weighted IoU
term; the weight map emphasizes pixels whose 31x31 neighborhood mean
deviates from the label, i.e. boundaries.  Training runs an optional
pre-training phase on one dataset followed by fine-tuning on another,
checkpoints every epoch, and is bit-deterministic for a fixed seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import DimensionError, NumericError, TrainingError
from .fusion import CaptionGuidedSaliency


def box_mean(arr: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded k x k window mean (always divided by k*k), stride 1."""
    h, w = arr.shape
    pad = k // 2
    integral = np.zeros((h + 2 * pad + 1, w + 2 * pad + 1))
    integral[pad + 1 : pad + 1 + h, pad + 1 : pad + 1 + w] = arr
    integral = integral.cumsum(axis=0).cumsum(axis=1)
    s = (
        integral[k:, k:]
        - integral[:-k, k:]
        - integral[k:, :-k]
        + integral[:-k, :-k]
    )
    return s / (k * k)


@dataclass
class LossTerms:
    weighted_bce: Tensor
    weighted_iou: Tensor
    total: Tensor

    def values(self) -> tuple[float, float, float]:
        return self.weighted_bce.item(), self.weighted_iou.item(), self.total.item()


def structure_loss(logits: Tensor, gt: np.ndarray, window: int = 31) -> LossTerms:
    """Boundary-weighted BCE plus weighted IoU on saliency logits.

    weight = 1 + 5 |boxmean(G) - G|; the BCE term averages by the weights,
    the IoU term is 1 - (sum(w p g) + 1) / (sum(w (p + g - p g)) + 1).
    """
    if logits.shape != gt.shape:
        raise DimensionError(f"structure_loss: logits {logits.shape} vs mask {gt.shape}")
    weight = Tensor(1.0 + 5.0 * np.abs(box_mean(gt, window) - gt))
    target = Tensor(gt)
    bce_map = ad.softplus(logits) - logits * target
    wbce = ad.tensor_sum(weight * bce_map) / ad.tensor_sum(weight)
    probs = ad.sigmoid(logits)
    inter = ad.tensor_sum(weight * probs * target)
    union = ad.tensor_sum(weight * (probs + target - probs * target))
    wiou = 1.0 - (inter + 1.0) / (union + 1.0)
    return LossTerms(wbce, wiou, wbce + wiou)


class Adam:
    """Adam with default moments; lr = 0 leaves parameters bit-identical."""

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.b1**self.step_count
        bc2 = 1.0 - self.b2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            p.data = p.data - self.lr * update

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.asarray(float(self.step_count))}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["opt.step"])
        for name in self.params:
            self.m[name] = state[f"opt.m.{name}"].copy()
            self.v[name] = state[f"opt.v.{name}"].copy()


def train_step(
    model: CaptionGuidedSaliency,
    batch: list[tuple[np.ndarray, np.ndarray, list[Tensor] | None]],
    optimizer: Adam,
    guidance: tuple[bool, ...] | None = None,
    batch_id: str = "?",
) -> tuple[float, float, float]:
    """One forward/backward/update over (image, mask, cached maps) samples."""
    optimizer.zero_grad()
    try:
        with Tape() as tape:
            bce_sum = iou_sum = total = None
            for image, mask, maps in batch:
                terms = structure_loss(
                    model.forward_logits(Tensor(image), maps, guidance), mask
                )
                bce_sum = terms.weighted_bce if bce_sum is None else bce_sum + terms.weighted_bce
                iou_sum = terms.weighted_iou if iou_sum is None else iou_sum + terms.weighted_iou
                total = terms.total if total is None else total + terms.total
            n = len(batch)
            loss = total * (1.0 / n)
        tape.backward(loss)
    except NumericError as exc:
        raise TrainingError(f"non-finite loss on batch {batch_id}: {exc}") from exc
    optimizer.step()
    return bce_sum.item() / n, iou_sum.item() / n, loss.item()


@dataclass
class Sample:
    name: str
    image: np.ndarray
    mask: np.ndarray
    caption: str | None = None


def _flip(sample_image: np.ndarray, mask: np.ndarray):
    return sample_image[:, :, ::-1].copy(), mask[:, ::-1].copy()


class MapCache:
    """Caption attention maps per (sample, flipped) pair.

    Valid while the caption branch is frozen, which is the default
    training mode; joint mode bypasses the cache.
    """

    def __init__(self, model: CaptionGuidedSaliency):
        self.model = model
        self._store: dict[tuple[str, bool], list[Tensor]] = {}

    def get(self, sample: Sample, image: np.ndarray, flipped: bool) -> list[Tensor]:
        key = (sample.name, flipped)
        if key not in self._store:
            self._store[key] = self.model.caption_maps(Tensor(image))
        return self._store[key]


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_training_checkpoint(
    path: str | Path,
    model: CaptionGuidedSaliency,
    optimizer: Adam,
    epoch: int,
    rng: np.random.Generator,
    cfg_hash: str,
    final: bool = False,
) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(optimizer.state_tensors())
    write_checkpoint(path, tensors)
    manifest = {
        "config_hash": cfg_hash,
        "epoch": epoch,
        "final": final,
        "rng_state": rng.bit_generator.state,
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_training_checkpoint(
    path: str | Path, model: CaptionGuidedSaliency, optimizer: Adam | None
) -> dict:
    tensors = read_checkpoint(path)
    model.load_state_dict(
        {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    )
    if optimizer is not None:
        optimizer.load_state_tensors({k: v for k, v in tensors.items() if k.startswith("opt.")})
    return json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))


def train_caption_branch(
    model: CaptionGuidedSaliency,
    samples: list[Sample],
    steps: int,
    lr: float,
    seed: int,
) -> float:
    """Overfit the caption branch on the sample captions (teacher forcing)."""
    named = [(f"caption.{k}", t) for k, t in model.caption.named_parameters()]
    opt = Adam(named, lr=lr)
    rng = np.random.default_rng(seed)
    captioned = [s for s in samples if s.caption]
    if not captioned:
        return 0.0
    last = 0.0
    for _ in range(steps):
        sample = captioned[rng.integers(len(captioned))]
        gold = model.caption.vocab.wrap(model.caption.vocab.encode(sample.caption))
        opt.zero_grad()
        with Tape() as tape:
            grid = model.caption.encode(Tensor(sample.image))
            loss = model.caption.caption_loss(grid, gold)
        tape.backward(loss)
        opt.step()
        last = loss.item()
    return last


def run_schedule(
    model: CaptionGuidedSaliency,
    pretrain: list[Sample],
    finetune: list[Sample],
    out_dir: str | Path,
    lr: float = 2e-3,
    pretrain_epochs: int = 0,
    finetune_epochs: int = 10,
    batch_size: int = 4,
    seed: int = 0,
    augment: bool = False,
    guidance: tuple[bool, ...] | None = None,
    caption_steps: int = 0,
    caption_lr: float = 1e-2,
    val: list[Sample] | None = None,
    resume: str | Path | None = None,
    log_every: int = 1,
    lr_schedule: str = "constant",
    cfg_digest: str | None = None,
) -> Path:
    """Pre-train then fine-tune; returns the final checkpoint path.

    Writes one checkpoint per epoch plus a CSV log with header
    epoch,step,bce,iou,total,val_mae.  Deterministic for a fixed seed:
    batch order and augmentation decisions come from one seeded generator
    whose state rides along in every checkpoint manifest.
    ``lr_schedule="cosine"`` decays the rate to zero over the epoch count.
    """
    if lr_schedule not in ("constant", "cosine"):
        raise TrainingError(f"unknown lr_schedule {lr_schedule!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flags = model.guidance if guidance is None else tuple(guidance)
    cfg_hash = cfg_digest or config_hash(
        {
            "lr": lr,
            "pretrain_epochs": pretrain_epochs,
            "finetune_epochs": finetune_epochs,
            "batch_size": batch_size,
            "seed": seed,
            "augment": augment,
            "guidance": list(flags),
        }
    )

    trainable = [
        (name, p)
        for name, p in model.named_parameters()
        if not name.startswith("caption.")
    ]
    optimizer = Adam(trainable, lr=lr)
    rng = np.random.default_rng(seed)
    start_epoch = 0

    if resume is not None:
        manifest = load_training_checkpoint(resume, model, optimizer)
        start_epoch = manifest["epoch"] + 1
        rng.bit_generator.state = manifest["rng_state"]
    elif caption_steps > 0 and any(flags):
        train_caption_branch(model, pretrain + finetune, caption_steps, caption_lr, seed)

    cache = MapCache(model) if any(flags) and not model.joint_guidance else None
    phases = [("pretrain", pretrain, pretrain_epochs), ("finetune", finetune, finetune_epochs)]
    total_epochs = pretrain_epochs + finetune_epochs
    log_path = out / "train_log.csv"
    mode = "a" if resume is not None else "w"
    final_path = out / "checkpoint_final.sdgt"
    with open(log_path, mode, encoding="utf-8") as log:
        if mode == "w":
            log.write("epoch,step,bce,iou,total,val_mae\n")
        epoch = 0
        for phase_name, samples, epochs in phases:
            for _ in range(epochs):
                if epoch < start_epoch:
                    epoch += 1
                    continue
                if not samples:
                    raise TrainingError(f"{phase_name} phase has no samples")
                if lr_schedule == "cosine":
                    optimizer.lr = lr * 0.5 * (1.0 + np.cos(np.pi * epoch / total_epochs))
                order = rng.permutation(len(samples))
                step = 0
                for lo in range(0, len(order), batch_size):
                    batch = []
                    ids = []
                    for idx in order[lo : lo + batch_size]:
                        sample = samples[idx]
                        image, mask = sample.image, sample.mask
                        flipped = bool(augment and rng.random() < 0.5)
                        if flipped:
                            image, mask = _flip(image, mask)
                        maps = None
                        if cache is not None:
                            maps = cache.get(sample, image, flipped)
                        elif any(flags):
                            maps = model.caption_maps(Tensor(image))
                        batch.append((image, mask, maps))
                        ids.append(sample.name)
                    bce, iou, total = train_step(
                        model, batch, optimizer, flags, batch_id=",".join(ids)
                    )
                    if step % log_every == 0:
                        log.write(f"{epoch},{step},{bce!r},{iou!r},{total!r},\n")
                    step += 1
                val_mae = evaluate_mae(model, val if val is not None else samples, flags)
                log.write(f"{epoch},end,,,,{val_mae!r}\n")
                save_training_checkpoint(
                    out / f"checkpoint_epoch_{epoch:03d}.sdgt",
                    model,
                    optimizer,
                    epoch,
                    rng,
                    cfg_hash,
                    final=epoch == total_epochs - 1,
                )
                epoch += 1
    last = out / f"checkpoint_epoch_{total_epochs - 1:03d}.sdgt"
    if last.exists():
        final_path.write_bytes(last.read_bytes())
        Path(str(final_path) + ".json").write_text(
            Path(str(last) + ".json").read_text(encoding="utf-8"), encoding="utf-8"
        )
    return final_path


def evaluate_mae(
    model: CaptionGuidedSaliency,
    samples: list[Sample],
    guidance: tuple[bool, ...] | None = None,
) -> float:
    """Mean absolute error of predictions over ``samples``."""
    total = 0.0
    for s in samples:
        prob, _ = model.predict(Tensor(s.image), guidance)
        total += float(np.abs(prob.data - s.mask).mean())
    return total / len(samples)
