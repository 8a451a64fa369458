"""Mean-teacher training with rectified inter-consistency and intra-consistency."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .data import AugmentConfig, Sample, augment, extract_patches, normalize, relabel_sequential
from .metrics import MetricsReport, evaluate, instances_from_semantic, pixel_dice
from .model import ConfigError, ModelConfig, NoiseSpec, PGFANet, build_model
from .uncertainty import uncertainty_maps

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_epochs: int = 300
    steps_per_epoch: Optional[int] = None
    base_lr: float = 2.5e-4
    lr_power: float = 0.9
    ema_decay: float = 0.99
    rampup_k: float = 0.1
    lambda_dice: float = 1.0
    lambda_vcc: float = 1.0
    lambda_intra: float = 1.0
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    noise_std: float = 0.1
    noise_teacher: bool = False
    enable_inter: bool = True
    enable_intra: bool = True
    enable_shape: bool = True
    uncertainty_scope: str = "pixel"
    seed: int = 0
    patch_size: int = 64
    patch_stride: Optional[int] = None
    augment: bool = True
    val_every: int = 10
    instance_mode: str = "boundary_aware"
    min_area: int = 0

    def validate(self) -> "TrainConfig":
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay", "must be in [0, 1)")
        if self.base_lr <= 0:
            raise ConfigError("base_lr", "must be > 0")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs", "must be >= 1")
        if self.batch_labeled < 1:
            raise ConfigError("batch_labeled", "must be >= 1")
        if self.batch_unlabeled < 0:
            raise ConfigError("batch_unlabeled", "must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch", "must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std", "must be >= 0")
        if self.uncertainty_scope not in ("pixel", "image"):
            raise ConfigError("uncertainty_scope", "must be 'pixel' or 'image'")
        self.loss_weights.validate()
        return self

    @property
    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(self.lambda_dice, self.lambda_vcc, self.lambda_intra)

    @property
    def consistency_enabled(self) -> bool:
        return self.enable_inter or self.enable_intra


@dataclass
class StepReport:
    epoch: int
    step: int
    l_seg: float
    l_inter: float
    l_intra: float
    lambda_t: float
    lr: float
    total: float
    l_ce: float = 0.0
    l_dice: float = 0.0
    l_vcc: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    student: PGFANet
    teacher: PGFANet
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    global_step: int = 0
    seed: int = 0
    noise_gen: torch.Generator = field(default_factory=torch.Generator)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


# -- schedules ---------------------------------------------------------------

def rampup_weight(t: float, T: float, k: float) -> float:
    """Gaussian ramp-up k * exp(-5 (1 - t/T)^2); clamps to k past the schedule."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if t >= T:
        return float(k)
    return float(k * math.exp(-5.0 * (1.0 - t / T) ** 2))


def poly_lr(it: int, total_iter: int, base_lr: float, power: float = 0.9) -> float:
    frac = min(max(it / total_iter, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


@torch.no_grad()
def ema_update_(teacher: nn.Module, student: nn.Module, alpha: float) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student; buffers are copied."""
    for (nt, pt), (ns, ps) in zip(teacher.named_parameters(), student.named_parameters()):
        if pt.shape != ps.shape:
            raise ValueError(f"parameter {nt} shape {tuple(pt.shape)} != {ns} {tuple(ps.shape)}")
        pt.mul_(alpha).add_(ps, alpha=1.0 - alpha)
    for bt, bs in zip(teacher.buffers(), student.buffers()):
        bt.copy_(bs)


def ema_update(state: TrainState, alpha: float) -> TrainState:
    ema_update_(state.teacher, state.student, alpha)
    return state


# -- state ---------------------------------------------------------------------

def init_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    student = build_model(model_cfg, seed=cfg.seed)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(student.parameters(), lr=cfg.base_lr, weight_decay=0.0)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(student=student, teacher=teacher, optimizer=opt, seed=cfg.seed,
                      noise_gen=gen, rng=np.random.default_rng(cfg.seed))


@dataclass
class Batch:
    images: torch.Tensor
    labels: Optional[torch.Tensor] = None
    instances: Optional[torch.Tensor] = None

    def __len__(self):
        return self.images.shape[0]


def collate(samples: Sequence[Sample], labeled: bool = True) -> Batch:
    images = torch.from_numpy(np.stack([normalize(s.image) for s in samples]))
    if not labeled:
        return Batch(images)
    labels = torch.from_numpy(np.stack([s.class_map for s in samples]).astype(np.int64))
    inst = torch.from_numpy(np.stack([relabel_sequential(s.instance_map) for s in samples]).astype(np.int64))
    return Batch(images, labels, inst)


def _total_iters(cfg: TrainConfig, steps_per_epoch: int) -> int:
    return cfg.total_epochs * steps_per_epoch


def _require_finite(state: TrainState, what: str, t: torch.Tensor) -> None:
    if not bool(torch.isfinite(t).all()):
        raise TrainingError(f"non-finite {what} at step {state.global_step} (epoch {state.epoch})")


def train_step(state: TrainState, labeled: Batch, unlabeled: Optional[Batch], cfg: TrainConfig,
               steps_per_epoch: int = 1) -> Tuple[TrainState, StepReport]:
    if labeled is None or len(labeled) == 0:
        raise TrainingError("labeled batch is empty; the supervised term is mandatory")
    student, teacher = state.student, state.teacher
    student.train()
    w = cfg.loss_weights

    lr = poly_lr(state.global_step, _total_iters(cfg, steps_per_epoch), cfg.base_lr, cfg.lr_power)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    lam = rampup_weight(state.epoch + 1, cfg.total_epochs, cfg.rampup_k)

    out = student(labeled.images)
    l1, b1 = L.seg_loss(out.stage1_logits, labeled.labels, None, w)
    probs = torch.softmax(out.final_logits, dim=1)
    l2, b2 = L.seg_loss(out.final_logits, labeled.labels,
                        L.InstanceBatch(probs, labeled.instances, labeled.labels), w)
    l_seg = l1 + l2
    _require_finite(state, "supervised loss", l_seg)
    loss = l_seg

    l_inter = l_intra = None
    if cfg.consistency_enabled:
        images = labeled.images
        if unlabeled is not None and len(unlabeled):
            images = torch.cat([images, unlabeled.images], dim=0)
        noisy = student(images, NoiseSpec(cfg.noise_std, state.noise_gen))
        cons = images.new_zeros(())
        if cfg.enable_inter:
            with torch.no_grad():
                teacher.train()
                t_noise = NoiseSpec(cfg.noise_std, state.noise_gen) if cfg.noise_teacher else None
                t_out = teacher(images, t_noise)
            _require_finite(state, "student logits", noisy.final_logits)
            _require_finite(state, "teacher logits", t_out.final_logits)
            maps = uncertainty_maps(noisy.final_logits, t_out.final_logits, cfg.uncertainty_scope)
            weight = maps.shape_weight if cfg.enable_shape else None
            l_inter = L.inter_loss(torch.softmax(noisy.final_logits, dim=1), maps.rectified_teacher, weight)
            cons = cons + l_inter
        if cfg.enable_intra:
            l_intra = L.intra_loss(noisy)
            cons = cons + w.lambda_intra * l_intra
        loss = loss + lam * cons

    if not bool(torch.isfinite(loss)):
        raise TrainingError(f"non-finite loss at step {state.global_step} (epoch {state.epoch}): "
                            f"seg={float(l_seg)}, inter={float(l_inter) if l_inter is not None else 0}, "
                            f"intra={float(l_intra) if l_intra is not None else 0}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(state, cfg.ema_decay)

    f_seg = l_seg.item()
    f_inter = l_inter.item() if l_inter is not None else 0.0
    f_intra = l_intra.item() if l_intra is not None else 0.0
    report = StepReport(
        epoch=state.epoch, step=state.global_step, l_seg=f_seg, l_inter=f_inter, l_intra=f_intra,
        lambda_t=lam, lr=lr, total=f_seg + lam * (f_inter + w.lambda_intra * f_intra),
        l_ce=b1["ce"] + b2["ce"], l_dice=b1["dice"] + b2["dice"], l_vcc=b2["vcc"],
    )
    state.global_step += 1
    return state, report


# -- inference -------------------------------------------------------------------

@torch.no_grad()
def predict_probs(model: PGFANet, image: np.ndarray) -> np.ndarray:
    """Softmax of the fused output for one (3, H, W) image in [0, 1]."""
    model.eval()
    f = model.config.downsample_factor
    h, w = image.shape[1:]
    ph, pw = (-h) % f, (-w) % f
    x = normalize(image)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    logits = model(torch.from_numpy(x)[None]).final_logits
    return torch.softmax(logits, dim=1)[0, :, :h, :w].numpy()


def predict_instances(model: PGFANet, image: np.ndarray, mode: str = "boundary_aware",
                      min_area: int = 0) -> np.ndarray:
    return instances_from_semantic(predict_probs(model, image), mode, min_area)


def evaluate_model(model: PGFANet, samples: Sequence[Sample], metric_mode: str = "nuclei",
                   instance_mode: str = "boundary_aware", min_area: int = 0) -> MetricsReport:
    preds, gts, names = [], [], []
    for s in samples:
        preds.append(predict_instances(model, s.image, instance_mode, min_area))
        gts.append(s.instance_map)
        names.append(s.name)
    return evaluate(preds, gts, metric_mode, names)


def mean_pixel_dice(model: PGFANet, samples: Sequence[Sample]) -> float:
    vals = []
    for s in samples:
        fg = predict_probs(model, s.image).argmax(axis=0) > 0
        vals.append(pixel_dice(fg, s.instance_map > 0))
    return float(np.mean(vals))


# -- checkpoints -------------------------------------------------------------------

def config_hash(model_cfg: ModelConfig, cfg: TrainConfig) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "train": asdict(cfg)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, state: TrainState, model_cfg: ModelConfig, cfg: TrainConfig,
                    metrics: Optional[Dict[str, float]] = None) -> Path:
    """Write ``<path>.npz`` (named arrays) and ``<path>.json`` (metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for prefix, model in (("student", state.student), ("teacher", state.teacher)):
        for name, t in model.state_dict().items():
            arrays[f"{prefix}/{name}"] = t.detach().cpu().numpy()
    npz = path.with_suffix(".npz")
    try:
        with open(npz, "wb") as fh:
            np.savez(fh, **arrays)
        meta = {
            "epoch": state.epoch,
            "global_step": state.global_step,
            "config_hash": config_hash(model_cfg, cfg),
            "metrics": metrics or {},
            "model_config": model_cfg.to_dict(),
            "train_config": asdict(cfg),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"cannot write checkpoint {npz}: {e}") from e
    return npz


def load_checkpoint(path, which: str = "student") -> Tuple[PGFANet, dict]:
    path = Path(path)
    npz, meta_path = path.with_suffix(".npz"), path.with_suffix(".json")
    if not npz.exists():
        raise FileNotFoundError(f"checkpoint not found: {npz}")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    model = build_model(ModelConfig(**meta.get("model_config", {})))
    with np.load(npz) as z:
        state = {k.split("/", 1)[1]: torch.from_numpy(z[k]) for k in z.files if k.startswith(which + "/")}
    model.load_state_dict(state)
    return model, meta


# -- training loop -------------------------------------------------------------------

class _Stream:
    """Infinite reshuffled index stream driven by a numpy generator."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self._order: List[int] = []

    def take(self, k: int) -> List[int]:
        out = []
        while len(out) < k:
            if not self._order:
                self._order = [int(i) for i in self.rng.permutation(self.n)]
            out.append(self._order.pop(0))
        return out


@dataclass
class TrainResult:
    state: TrainState
    reports: List[StepReport]
    val_history: List[dict]
    best_checkpoint: Optional[Path]
    final_checkpoint: Optional[Path]


def _patches(samples: Sequence[Sample], cfg: TrainConfig) -> List[Sample]:
    out = []
    for s in samples:
        h, w = s.image.shape[1:]
        if cfg.patch_size and (h > cfg.patch_size or w > cfg.patch_size):
            out.extend(extract_patches(s, cfg.patch_size, cfg.patch_stride or cfg.patch_size))
        else:
            out.append(s)
    return out


def train(model_cfg: ModelConfig, cfg: TrainConfig, labeled: Sequence[Sample],
          unlabeled: Sequence[Sample] = (), val: Sequence[Sample] = (), out_dir=None,
          metric_mode: str = "nuclei", callback=None) -> TrainResult:
    """Run ``total_epochs`` epochs of :func:`train_step` over shuffled patches.

    With ``out_dir`` set, writes ``train_log.jsonl`` and ``checkpoints/{final,best}``.
    """
    cfg.validate()
    if not labeled:
        raise TrainingError("no labeled samples")
    state = init_state(model_cfg, cfg)
    lab = _patches(labeled, cfg)
    unl = _patches(unlabeled, cfg) if cfg.batch_unlabeled else []
    steps = cfg.steps_per_epoch or max(1, math.ceil(len(lab) / cfg.batch_labeled))
    lab_stream = _Stream(len(lab), state.rng)
    unl_stream = _Stream(len(unl), state.rng) if unl else None
    aug_cfg = AugmentConfig()

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
    reports: List[StepReport] = []
    history: List[dict] = []
    best_score, best_ckpt, final_ckpt = -math.inf, None, None

    def prep(idx, pool):
        items = [pool[i] for i in idx]
        if cfg.augment:
            items = [augment(s, state.rng, aug_cfg) for s in items]
        return items

    try:
        for epoch in range(cfg.total_epochs):
            state.epoch = epoch
            t0 = time.time()
            for _ in range(steps):
                lb = collate(prep(lab_stream.take(cfg.batch_labeled), lab))
                ub = None
                if unl_stream is not None and cfg.consistency_enabled:
                    ub = collate(prep(unl_stream.take(cfg.batch_unlabeled), unl), labeled=False)
                state, rep = train_step(state, lb, ub, cfg, steps)
                reports.append(rep)
                if log_fh:
                    log_fh.write(json.dumps({"type": "step", **rep.to_dict()}) + "\n")
            last = epoch == cfg.total_epochs - 1
            if val and (last or (cfg.val_every and (epoch + 1) % cfg.val_every == 0)):
                rep_v = evaluate_model(state.student, val, metric_mode, cfg.instance_mode, cfg.min_area)
                score = rep_v.mean["dice"] if metric_mode == "nuclei" else rep_v.mean["dice_obj"]
                rec = {"type": "val", "epoch": epoch + 1, "global_step": state.global_step, **rep_v.mean}
                history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                if out is not None and score > best_score:
                    best_score = score
                    best_ckpt = save_checkpoint(out / "checkpoints" / "best", state, model_cfg, cfg, rep_v.mean)
            log.info("epoch %d/%d: seg %.4f lambda %.4g (%.1fs)", epoch + 1, cfg.total_epochs,
                     reports[-1].l_seg, reports[-1].lambda_t, time.time() - t0)
            if callback is not None:
                callback(state, epoch)
        state.epoch = cfg.total_epochs
        if out is not None:
            metrics = history[-1] if history else {}
            final_ckpt = save_checkpoint(out / "checkpoints" / "final", state, model_cfg, cfg,
                                         {k: v for k, v in metrics.items() if k != "type"})
            if best_ckpt is None:
                best_ckpt = save_checkpoint(out / "checkpoints" / "best", state, model_cfg, cfg)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(state, reports, history, best_ckpt, final_ckpt)
