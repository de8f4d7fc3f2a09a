"""Training objectives.

Windowed variance/covariance consistency losses between a student feature map
and a frozen teacher feature map, feature-synthesis MSE, segmentation losses
over the six prediction heads, baseline distillation losses kept for ablations,
and the composition of everything into one scheduled objective.

All feature maps are ``(B, C, D, H, W)`` tensors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .errors import ProtocolError, ShapeError

NUM_HEADS = 6
DICE_SMOOTH = 1e-5
WCE_CLIP = (0.1, 10.0)


@dataclass(frozen=True)
class WindowConfig:
    window: int = 4
    eps: float = 1e-6
    normalize: bool = True

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


@dataclass
class WindowStats:
    """Per-window moments, each shaped ``(B, C, num_windows)``."""

    n: int
    means: torch.Tensor
    variances: torch.Tensor
    means_b: Optional[torch.Tensor] = None
    variances_b: Optional[torch.Tensor] = None
    covariances: Optional[torch.Tensor] = None


def _check_pair(a: torch.Tensor, b: Optional[torch.Tensor]) -> None:
    if a.dim() != 5:
        raise ShapeError(f"feature map must be 5D (B, C, D, H, W), got {tuple(a.shape)}")
    if b is not None and a.shape != b.shape:
        raise ShapeError(f"feature maps differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def to_windows(x: torch.Tensor, w: int) -> torch.Tensor:
    """Tile the spatial axes into non-overlapping ``w``-cubes: ``(B, C, num_windows, w**3)``.

    Trailing voxels that do not fill a whole window are dropped.
    """
    b, c, d, h, wd = x.shape
    nd, nh, nw = d // w, h // w, wd // w
    if nd * nh * nw == 0:
        raise ShapeError(f"spatial extent {(d, h, wd)} holds no complete {w}^3 window")
    x = x[:, :, : nd * w, : nh * w, : nw * w]
    x = x.reshape(b, c, nd, w, nh, w, nw, w).permute(0, 1, 2, 4, 6, 3, 5, 7)
    return x.reshape(b, c, nd * nh * nw, w ** 3)


def window_stats(a: torch.Tensor, b: Optional[torch.Tensor] = None, cfg: WindowConfig = WindowConfig()) -> WindowStats:
    """Means, unbiased variances and (if ``b`` given) covariances over co-located windows.

    Two-pass: window means first, then centered second moments with divisor n - 1.
    Inputs are used as given; logistic squashing is the caller's business.
    """
    _check_pair(a, b)
    wa = to_windows(a, cfg.window)
    n = wa.shape[-1]
    mean_a = wa.mean(-1)
    da = wa - mean_a.unsqueeze(-1)
    var_a = (da * da).sum(-1) / (n - 1)
    if b is None:
        return WindowStats(n, mean_a, var_a)
    wb = to_windows(b, cfg.window)
    mean_b = wb.mean(-1)
    db = wb - mean_b.unsqueeze(-1)
    var_b = (db * db).sum(-1) / (n - 1)
    cov = (da * db).sum(-1) / (n - 1)
    return WindowStats(n, mean_a, var_a, mean_b, var_b, cov)


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # zero gradient at x == 0 instead of inf * 0 = nan
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def _prepare(f_m: torch.Tensor, f_aux: torch.Tensor, cfg: WindowConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    _check_pair(f_m, f_aux)
    f_aux = f_aux.detach()
    if cfg.normalize:
        return torch.sigmoid(f_m), torch.sigmoid(f_aux)
    return f_m, f_aux


def variance_loss_map(f_m, f_aux, cfg: WindowConfig = WindowConfig()) -> torch.Tensor:
    """Per-window ``1 - (2 s_m s_aux + eps) / (s_m^2 + s_aux^2 + eps)``, shape ``(B, C, num_windows)``."""
    x, y = _prepare(f_m, f_aux, cfg)
    st = window_stats(x, y, cfg)
    s_m, s_aux = _safe_sqrt(st.variances), _safe_sqrt(st.variances_b)
    # the ratio is at most 1 by AM-GM; clamp away rounding that lands just above it
    return (1 - (2 * s_m * s_aux + cfg.eps) / (st.variances + st.variances_b + cfg.eps)).clamp_min(0)


def covariance_loss_map(f_m, f_aux, cfg: WindowConfig = WindowConfig()) -> torch.Tensor:
    """Per-window ``1 - (|cov| + eps) / (s_m s_aux + eps)``; the absolute value ignores contrast polarity."""
    x, y = _prepare(f_m, f_aux, cfg)
    st = window_stats(x, y, cfg)
    s_m, s_aux = _safe_sqrt(st.variances), _safe_sqrt(st.variances_b)
    # |cov| <= s_m s_aux (Cauchy-Schwarz) up to rounding
    return (1 - (st.covariances.abs() + cfg.eps) / (s_m * s_aux + cfg.eps)).clamp_min(0)


def variance_loss(f_m: torch.Tensor, f_aux: torch.Tensor, cfg: WindowConfig = WindowConfig()) -> torch.Tensor:
    """Information-richness loss, averaged over windows and channels. ``f_aux`` is treated as a constant."""
    return variance_loss_map(f_m, f_aux, cfg).mean()


def covariance_loss(f_m: torch.Tensor, f_aux: torch.Tensor, cfg: WindowConfig = WindowConfig()) -> torch.Tensor:
    """Structural-similarity loss, averaged over windows and channels. ``f_aux`` is treated as a constant."""
    return covariance_loss_map(f_m, f_aux, cfg).mean()


FeatureArg = Union[torch.Tensor, Sequence[torch.Tensor]]


def acct_loss(f_m: FeatureArg, f_aux: FeatureArg, cfg: WindowConfig = WindowConfig()) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Variance plus covariance loss.

    Passing sequences pairs them element by element (e.g. encoder stages or
    modality/stage pairs); each component is averaged over pairs before summing.
    """
    if isinstance(f_m, torch.Tensor):
        f_m, f_aux = [f_m], [f_aux]
    f_m, f_aux = list(f_m), list(f_aux)
    if len(f_m) != len(f_aux) or not f_m:
        raise ShapeError(f"need matching non-empty feature lists, got {len(f_m)} and {len(f_aux)}")
    l_var = torch.stack([variance_loss(a, b, cfg) for a, b in zip(f_m, f_aux)]).mean()
    l_covar = torch.stack([covariance_loss(a, b, cfg) for a, b in zip(f_m, f_aux)]).mean()
    return l_var + l_covar, {"l_var": l_var, "l_covar": l_covar}


def synthesis_loss(synth: FeatureArg, target: FeatureArg) -> torch.Tensor:
    """Mean squared error against a frozen target; sequences are averaged pairwise."""
    if isinstance(synth, torch.Tensor):
        synth, target = [synth], [target]
    synth, target = list(synth), list(target)
    if len(synth) != len(target) or not synth:
        raise ShapeError("synthesis_loss needs matching non-empty lists")
    terms = []
    for s, t in zip(synth, target):
        if s.shape != t.shape:
            raise ShapeError(f"synthesized {tuple(s.shape)} vs target {tuple(t.shape)}")
        terms.append(F.mse_loss(s, t.detach(), reduction="mean"))
    return torch.stack(terms).mean()


# --------------------------------------------------------------------------- segmentation


def _check_seg(logits: torch.Tensor, label: torch.Tensor) -> int:
    if logits.dim() != 5:
        raise ShapeError(f"logits must be (B, K, D, H, W), got {tuple(logits.shape)}")
    if label.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"label shape {tuple(label.shape)} does not match logits {tuple(logits.shape)}")
    k = logits.shape[1]
    if label.numel() and (int(label.min()) < 0 or int(label.max()) >= k):
        raise ValueError(f"label values must lie in [0, {k})")
    return k


def dice_loss(logits: torch.Tensor, label: torch.Tensor, class_count: Optional[int] = None) -> torch.Tensor:
    """``1 -`` mean soft Dice over foreground classes (1..K-1), pooled over the batch."""
    k = _check_seg(logits, label)
    if class_count is not None and class_count != k:
        raise ShapeError(f"logits carry {k} classes, expected {class_count}")
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(label.long(), k).permute(0, 4, 1, 2, 3).to(probs.dtype)
    dims = (0, 2, 3, 4)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return 1 - dice[1:].mean()


def class_weights(label: torch.Tensor, class_count: int) -> torch.Tensor:
    """Inverse voxel frequency per class, scaled to mean 1 over present classes, clipped to [0.1, 10].

    Absent classes get weight 1; they contribute no voxels either way.
    """
    counts = torch.bincount(label.reshape(-1).long(), minlength=class_count).to(torch.float64)
    present = counts > 0
    inv = torch.where(present, counts.sum() / counts.clamp(min=1), torch.zeros_like(counts))
    w = torch.ones_like(counts)
    w[present] = inv[present] / inv[present].mean()
    return w.clamp(*WCE_CLIP)


def weighted_ce_loss(logits: torch.Tensor, label: torch.Tensor, weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Class-weighted cross-entropy, normalized by the summed weights of the voxels' true classes."""
    k = _check_seg(logits, label)
    if weights is None:
        weights = class_weights(label, k)
    return F.cross_entropy(logits, label.long(), weight=weights.to(logits.dtype))


def segmentation_loss(heads: Sequence[torch.Tensor], label: torch.Tensor) -> Tuple[torch.Tensor, Dict[str, object]]:
    """Sum of (weighted CE + Dice) over exactly six prediction heads."""
    heads = list(heads)
    if len(heads) != NUM_HEADS:
        raise ProtocolError(f"segmentation loss needs {NUM_HEADS} heads, got {len(heads)}")
    k = _check_seg(heads[0], label)
    weights = class_weights(label, k)
    wce = [weighted_ce_loss(h, label, weights) for h in heads]
    dl = [dice_loss(h, label) for h in heads]
    per_head = [a + b for a, b in zip(wce, dl)]
    total = torch.stack(per_head).sum()
    return total, {"l_wce": torch.stack(wce).sum(), "l_dice": torch.stack(dl).sum(), "heads": per_head}


# --------------------------------------------------------------------------- baselines


def baseline_mse_distill(f_m: torch.Tensor, f_aux: torch.Tensor) -> torch.Tensor:
    return synthesis_loss(f_m, f_aux)


def baseline_kl_distill(f_m: torch.Tensor, f_aux: torch.Tensor) -> torch.Tensor:
    """KL(teacher || student) between per-voxel channel softmaxes of the squashed features, voxel-averaged."""
    _check_pair(f_m, f_aux)
    log_q = torch.log_softmax(torch.sigmoid(f_m), dim=1)
    log_p = torch.log_softmax(torch.sigmoid(f_aux.detach()), dim=1)
    kl = (log_p.exp() * (log_p - log_q)).sum(1)
    return kl.mean()


def adversarial_loss(*_args, **_kwargs):
    """Placeholder for the adversarial synthesis objective of the ablation grid; never trained."""
    raise NotImplementedError("adversarial synthesis loss is intentionally not provided")


# --------------------------------------------------------------------------- composition


@dataclass
class LossReport:
    l_var: float = 0.0
    l_covar: float = 0.0
    l_acct: float = 0.0
    l_syn: float = 0.0
    l_wce: float = 0.0
    l_dice: float = 0.0
    l_seg: float = 0.0
    l_overall: float = 0.0
    heads: List[float] = field(default_factory=lambda: [0.0] * NUM_HEADS)
    acct_active: int = 1
    syn_active: int = 0
    step: int = 0
    epoch: int = 0

    def to_record(self) -> dict:
        keys = ("step", "epoch", "l_var", "l_covar", "l_acct", "l_syn", "l_wce", "l_dice",
                "l_seg", "l_overall", "heads", "acct_active", "syn_active")
        d = asdict(self)
        return {k: d[k] for k in keys}

    @classmethod
    def from_record(cls, rec: dict) -> "LossReport":
        return cls(**{k: rec[k] for k in cls.__dataclass_fields__ if k in rec})

    def is_finite(self) -> bool:
        vals = [self.l_var, self.l_covar, self.l_syn, self.l_wce, self.l_dice, self.l_seg, self.l_overall, *self.heads]
        return all(v == v and abs(v) != float("inf") for v in vals)


def overall_loss(
    l_var: torch.Tensor,
    l_covar: torch.Tensor,
    l_seg: torch.Tensor,
    l_syn: torch.Tensor,
    epoch: int,
    syn_start: int,
    acct_active: bool = True,
    seg_parts: Optional[Dict[str, object]] = None,
) -> Tuple[torch.Tensor, LossReport]:
    """Compose the scheduled objective ``acct * a + seg + syn * s``.

    The synthesis term switches on at ``epoch >= syn_start``. The returned
    report is built from Python floats with the same composition, so its
    identities (``l_acct = l_var + l_covar`` and the gated sum) hold exactly.
    """
    syn_on = int(epoch >= syn_start)
    acct_on = int(bool(acct_active))
    l_acct = l_var + l_covar
    total = l_seg
    if acct_on:
        total = total + l_acct
    if syn_on:
        total = total + l_syn

    rep = LossReport(epoch=epoch, acct_active=acct_on, syn_active=syn_on)
    rep.l_var, rep.l_covar = float(l_var.detach()), float(l_covar.detach())
    rep.l_acct = rep.l_var + rep.l_covar
    rep.l_seg, rep.l_syn = float(l_seg.detach()), float(l_syn.detach())
    rep.l_overall = compose_report_total(rep)
    if seg_parts:
        rep.l_wce = float(seg_parts["l_wce"].detach())
        rep.l_dice = float(seg_parts["l_dice"].detach())
        rep.heads = [float(h.detach()) for h in seg_parts["heads"]]
    return total, rep


def compose_report_total(rep: LossReport) -> float:
    total = rep.l_seg
    if rep.acct_active:
        total = rep.l_acct + total
    if rep.syn_active:
        total = total + rep.l_syn
    return total
