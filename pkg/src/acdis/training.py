"""Training loop, checkpoints, modality-mask sampling and finite-difference gradient checks."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import losses as L
from .errors import ConfigError, NumericalError
from .network import ACDIS, ModelConfig, parameter_hash
from .volume_data import AugmentConfig, ModalityMask, MultiModalVolume, augment, enumerate_masks, preprocess

log = logging.getLogger(__name__)

LOG_FILE = "train_log.jsonl"
MASK_POLICIES = ("uniform", "full")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 2
    lr: float = 1e-4
    weight_decay: float = 1e-4
    syn_start_epoch: int = 21
    acct_active: bool = True
    crop: int = 80
    seed: int = 0
    mask_sampling: str = "uniform"
    # model
    base_channels: int = 8
    encoder_depth: int = 2
    afeb_heads: int = 2
    stage_set: Optional[List[int]] = None
    # distillation windows
    window: int = 4
    eps: float = 1e-6
    normalize: bool = True
    # augmentation
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    scale_jitter: float = 0.1
    shift_jitter: float = 0.05
    dtype: str = "float32"
    checkpoint_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 1 <= self.syn_start_epoch <= self.epochs + 1:
            raise ConfigError(f"syn_start_epoch must lie in [1, epochs + 1], got {self.syn_start_epoch}")
        if self.mask_sampling not in MASK_POLICIES:
            raise ConfigError(f"mask_sampling must be one of {MASK_POLICIES}, got {self.mask_sampling!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(_DTYPES)}, got {self.dtype!r}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.crop % 2 ** self.encoder_depth:
            raise ConfigError(f"crop {self.crop} must be divisible by 2**encoder_depth")
        try:
            self.window_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for s in self.model_config().stages:
            if self.crop // 2 ** s < self.window:
                raise ConfigError(f"stage {s} extent {self.crop // 2 ** s} smaller than window {self.window}")

    def model_config(self) -> ModelConfig:
        stages = tuple(self.stage_set) if self.stage_set else None
        return ModelConfig(self.base_channels, self.encoder_depth, afeb_heads=self.afeb_heads, stage_set=stages)

    def window_config(self) -> L.WindowConfig:
        return L.WindowConfig(self.window, self.eps, self.normalize)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.flip_prob, self.rotate_prob, self.scale_jitter, self.shift_jitter)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale overfit profile: 16^3 crops, 8 base channels, two down-samplings, 30 epochs.

        Augmentation is off so a handful of phantoms can be fit within the epoch budget.
        """
        d = dict(epochs=30, batch_size=1, lr=2e-3, syn_start_epoch=5, crop=16, base_channels=8,
                 encoder_depth=2, flip_prob=0.0, rotate_prob=0.0, scale_jitter=0.0, shift_jitter=0.0)
        d.update(overrides)
        return cls(**d)


# --------------------------------------------------------------------------- masks


_MASKS = enumerate_masks()


def sample_modality_mask(rng: np.random.Generator, policy: str = "uniform") -> ModalityMask:
    """Uniform draw over the 15 non-empty masks (``policy="full"`` always returns the full mask)."""
    if policy == "full":
        return ModalityMask.full()
    return _MASKS[int(rng.integers(len(_MASKS)))]


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: Dict[str, torch.Tensor]
    optimizer_state: Optional[dict]
    epoch: int
    step: int
    config: dict
    config_hash: str
    rng_state: Dict[str, dict] = field(default_factory=dict)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def model(self) -> ACDIS:
        cfg = self.train_config
        if cfg.model_config().hash() != self.config_hash:
            raise ConfigError("checkpoint config hash does not match its stored config")
        model = ACDIS(cfg.model_config()).to(_DTYPES[cfg.dtype])
        model.load_state_dict(self.params)
        return model

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.params.items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "config_json": json.dumps(self.config, sort_keys=True),
            "config_hash": self.config_hash,
            "params": self.params,
            "optimizer_state": self.optimizer_state,
            "epoch": self.epoch,
            "step": self.step,
            "rng_state_json": json.dumps(self.rng_state),
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        p = torch.load(path, map_location="cpu", weights_only=True)
        return cls(
            params=p["params"],
            optimizer_state=p["optimizer_state"],
            epoch=p["epoch"],
            step=p["step"],
            config=json.loads(p["config_json"]),
            config_hash=p["config_hash"],
            rng_state=json.loads(p["rng_state_json"]),
        )


# --------------------------------------------------------------------------- training


@dataclass
class TrainState:
    model: ACDIS
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    data_rng: np.random.Generator
    mask_rng: np.random.Generator
    epoch: int = 0
    step: int = 0

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            optimizer_state=self.optimizer.state_dict(),
            epoch=self.epoch,
            step=self.step,
            config=self.config.to_dict(),
            config_hash=self.config.model_config().hash(),
            rng_state={"data": self.data_rng.bit_generator.state, "mask": self.mask_rng.bit_generator.state},
        )


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    # decoupled weight decay; no LR schedule
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def init_state(cfg: TrainConfig) -> TrainState:
    """Fresh model/optimizer with RNG streams split per role (init, data, mask sampling)."""
    init_ss, data_ss, mask_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(init_ss.generate_state(1)[0]))
        model = ACDIS(cfg.model_config())
    model = model.to(_DTYPES[cfg.dtype])
    return TrainState(
        model=model,
        optimizer=make_optimizer(model, cfg),
        config=cfg,
        data_rng=np.random.default_rng(data_ss),
        mask_rng=np.random.default_rng(mask_ss),
    )


def restore_state(ckpt: Checkpoint, cfg: Optional[TrainConfig] = None) -> TrainState:
    cfg = cfg or ckpt.train_config
    if cfg.model_config().hash() != ckpt.config_hash:
        raise ConfigError("checkpoint was written for a different model configuration")
    state = init_state(cfg)
    state.model.load_state_dict(ckpt.params)
    if ckpt.optimizer_state is not None:
        state.optimizer.load_state_dict(ckpt.optimizer_state)
    state.data_rng.bit_generator.state = ckpt.rng_state["data"]
    state.mask_rng.bit_generator.state = ckpt.rng_state["mask"]
    state.epoch, state.step = ckpt.epoch, ckpt.step
    return state


def compute_losses(out: dict, label: torch.Tensor, epoch: int, cfg: TrainConfig) -> Tuple[torch.Tensor, L.LossReport]:
    seg, seg_parts = L.segmentation_loss(out["heads"], label)
    students = [f for per_mod in out["student"] for f in per_mod]
    teachers = [t for _ in out["student"] for t in out["teacher"]]
    _, acct_parts = L.acct_loss(students, teachers, cfg.window_config())
    syn = L.synthesis_loss(out["synth"], out["synth_target"])
    return L.overall_loss(acct_parts["l_var"], acct_parts["l_covar"], seg, syn, epoch,
                          cfg.syn_start_epoch, cfg.acct_active, seg_parts)


def train_step(batch: Tuple[torch.Tensor, torch.Tensor], mask: ModalityMask, epoch: int, state: TrainState) -> L.LossReport:
    """One forward/backward/update. ``batch`` holds complete modalities; ``mask`` only affects the fusion path."""
    x, y = batch
    model, opt = state.model, state.optimizer
    model.train()
    out = model.forward_full(x, mask, mode="train")
    total, report = compute_losses(out, y, epoch, state.config)
    state.step += 1
    report.step, report.epoch = state.step, epoch
    if not (torch.isfinite(total) and report.is_finite()):
        raise NumericalError(f"non-finite loss at step {state.step}: {report.to_record()}", terms=report.to_record())
    opt.zero_grad(set_to_none=True)
    total.backward()
    opt.step()
    return report


def to_tensors(volumes: Sequence[MultiModalVolume], dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([v.stack() for v in volumes])).to(dtype)
    y = torch.from_numpy(np.stack([v.label for v in volumes]).astype(np.int64))
    return x, y


def epoch_batches(dataset: Sequence[MultiModalVolume], cfg: TrainConfig, rng: np.random.Generator):
    order = rng.permutation(len(dataset))
    aug = cfg.augment_config()
    for i in range(0, len(order), cfg.batch_size):
        vols = [augment(preprocess(dataset[j], cfg.crop, rng), rng, aug) for j in order[i:i + cfg.batch_size]]
        yield to_tensors(vols, _DTYPES[cfg.dtype])


def train(
    cfg: TrainConfig,
    dataset: Sequence[MultiModalVolume],
    out_dir=None,
    resume: Optional[Checkpoint] = None,
    on_report: Optional[Callable[[L.LossReport], None]] = None,
) -> Checkpoint:
    """Run ``cfg.epochs`` epochs (1-based), logging each step and checkpointing per epoch.

    With ``resume`` the run continues after the checkpoint's epoch using its
    parameters, optimizer moments and RNG streams.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    torch.use_deterministic_algorithms(True, warn_only=True)
    state = restore_state(resume, cfg) if resume is not None else init_state(cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / LOG_FILE
        kept = []
        if resume is not None and log_path.exists():
            kept = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["step"] <= state.step]
        log_path.write_text("".join(ln + "\n" for ln in kept))
        log_fh = log_path.open("a")
    try:
        for epoch in range(state.epoch + 1, cfg.epochs + 1):
            for batch in epoch_batches(dataset, cfg, state.data_rng):
                mask = sample_modality_mask(state.mask_rng, cfg.mask_sampling)
                report = train_step(batch, mask, epoch, state)
                if log_fh is not None:
                    log_fh.write(json.dumps(report.to_record()) + "\n")
                if on_report is not None:
                    on_report(report)
            state.epoch = epoch
            log.info("epoch %d done, step %d", epoch, state.step)
            if out_dir is not None and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
                state.checkpoint().save(out_dir / f"checkpoint_epoch_{epoch:04d}.pt")
    finally:
        if log_fh is not None:
            log_fh.close()
    final = state.checkpoint()
    if out_dir is not None:
        final.save(out_dir / "final.pt")
    return final


def read_log(path) -> List[L.LossReport]:
    return [L.LossReport.from_record(json.loads(ln)) for ln in Path(path).read_text().splitlines() if ln]


# --------------------------------------------------------------------------- gradient checks


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    passed: bool
    trials: int = 1
    teacher_grad_max: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Norm-wise: ``max|a - n| / max(max|a|, max|n|)``; 0 when both vanish."""
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()))
    diff = float((analytic - numeric).abs().max())
    return diff / scale if scale > 0 else diff


def numeric_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float) -> torch.Tensor:
    """Central differences of scalar ``fn`` at ``x`` (float64), one coordinate at a time."""
    x = x.detach().to(torch.float64).clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def _quadratic(x, a, b):
    v = x.reshape(-1)
    return 0.5 * v @ (a @ v) + b @ v


def _randn(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape))


def _labels(rng, classes, shape):
    return torch.from_numpy(rng.integers(0, classes, size=shape).astype(np.int64))


# name -> (loss(x, *rest), point factory(rng) -> (x, *rest), rest[0] is a teacher argument)
LOSS_SUITE: Dict[str, Tuple[Callable, Callable, bool]] = {
    "variance": (L.variance_loss, lambda r: (_randn(r, 1, 2, 4, 4, 4), _randn(r, 1, 2, 4, 4, 4)), True),
    "covariance": (L.covariance_loss, lambda r: (_randn(r, 1, 2, 4, 4, 4), _randn(r, 1, 2, 4, 4, 4)), True),
    "synthesis": (L.synthesis_loss, lambda r: (_randn(r, 1, 2, 4, 4, 4), _randn(r, 1, 2, 4, 4, 4)), True),
    "dice": (L.dice_loss, lambda r: (_randn(r, 1, 2, 4, 4, 4), _labels(r, 2, (1, 4, 4, 4))), False),
    "wce": (L.weighted_ce_loss, lambda r: (_randn(r, 1, 2, 4, 4, 4), _labels(r, 2, (1, 4, 4, 4))), False),
    "kl": (L.baseline_kl_distill, lambda r: (_randn(r, 1, 2, 4, 4, 4), _randn(r, 1, 2, 4, 4, 4)), True),
}
DEFAULT_SUITE = ("variance", "covariance", "synthesis", "dice", "wce")


def _quadratic_point(rng):
    m = rng.standard_normal((8, 8))
    return (_randn(rng, 8), torch.from_numpy(m @ m.T), _randn(rng, 8))


LOSS_SUITE["quadratic"] = (_quadratic, _quadratic_point, False)


def gradient_check(
    loss_selector: Union[str, Callable],
    toy_point: Optional[Sequence[torch.Tensor]] = None,
    h: float = 1e-3,
    tol: float = 1e-4,
    trials: int = 1,
    seed: int = 0,
    teacher_arg: Optional[bool] = None,
) -> GradCheckReport:
    """Compare autograd gradients with central differences in float64.

    ``loss_selector`` names a :data:`LOSS_SUITE` entry or is a callable taking
    ``(x, *rest)``. Without ``toy_point``, ``trials`` random points are drawn from
    the suite's factory. When the second argument is a teacher target its
    autograd gradient is also recorded (it must be exactly zero).
    """
    if isinstance(loss_selector, str):
        if loss_selector not in LOSS_SUITE:
            raise ConfigError(f"unknown loss {loss_selector!r}; choose from {sorted(LOSS_SUITE)}")
        fn, factory, has_teacher = LOSS_SUITE[loss_selector]
        name = loss_selector
    else:
        fn, factory, has_teacher = loss_selector, None, False
        name = getattr(loss_selector, "__name__", "custom")
    if teacher_arg is not None:
        has_teacher = teacher_arg
    rng = np.random.default_rng(seed)
    if toy_point is not None:
        points = [tuple(toy_point)]
    elif factory is not None:
        points = [factory(rng) for _ in range(trials)]
    else:
        raise ConfigError("a toy_point is required for custom losses")

    worst, teacher_max = 0.0, (0.0 if has_teacher else None)
    for point in points:
        x, *rest = [p.to(torch.float64) if p.is_floating_point() else p for p in point]
        x = x.detach().clone().requires_grad_(True)
        if has_teacher:
            rest[0] = rest[0].detach().clone().requires_grad_(True)
        val = fn(x, *rest)
        grads = torch.autograd.grad(val, [x] + ([rest[0]] if has_teacher else []), allow_unused=True)
        analytic = grads[0] if grads[0] is not None else torch.zeros_like(x)
        if has_teacher:
            tg = grads[1]
            teacher_max = max(teacher_max, 0.0 if tg is None else float(tg.abs().max()))
        frozen = [r.detach() if torch.is_tensor(r) else r for r in rest]
        numeric = numeric_gradient(lambda z: fn(z, *frozen), x, h)
        worst = max(worst, relative_error(analytic.detach(), numeric))
    passed = worst < tol and (teacher_max is None or teacher_max == 0.0)
    return GradCheckReport(name, worst, tol, passed, len(points), teacher_max)


def run_gradient_suite(names: Sequence[str] = DEFAULT_SUITE, trials: int = 20, h: float = 1e-3,
                       tol: float = 1e-4, seed: int = 0) -> List[GradCheckReport]:
    return [gradient_check(n, h=h, tol=tol, trials=trials, seed=seed + i) for i, n in enumerate(names)]


def parameter_gradient_check(
    model: torch.nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    param_names: Sequence[str],
    samples_per_param: int = 3,
    h: float = 1e-5,
    seed: int = 0,
) -> Dict[str, float]:
    """Relative error of autograd vs central differences on sampled entries of named parameters.

    ``loss_fn`` re-runs the forward pass with the model's current parameters.
    """
    params = dict(model.named_parameters())
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name in param_names:
        p = params[name]
        idx = rng.choice(p.numel(), size=min(samples_per_param, p.numel()), replace=False)
        analytic = p.grad.reshape(-1)[idx].detach().clone() if p.grad is not None else torch.zeros(len(idx), dtype=p.dtype)
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                numeric[j] = (up - down) / (2 * h)
        errors[name] = relative_error(analytic, numeric)
    return errors


__all__ = [
    "TrainConfig", "Checkpoint", "TrainState", "sample_modality_mask", "train_step", "train",
    "gradient_check", "run_gradient_suite", "parameter_gradient_check", "GradCheckReport",
    "init_state", "restore_state", "make_optimizer", "read_log", "to_tensors", "parameter_hash",
]
