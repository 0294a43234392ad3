"""Event-guided depth extrapolation: dual-encoder U-Net, composite loss, analytic baselines."""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .depth import DepthFrame
from .nn import functional as F
from .nn.losses import masked_mean, ssim_map, window_mask
from .nn.tensor import Tensor, absolute, concat, no_grad, relu, softplus, sqrt

log = logging.getLogger(__name__)

VOXEL_CLIP = 10.0


@dataclass(frozen=True)
class LossWeights:
    depth: float = 1.0
    grad: float = 10.0
    norm: float = 0.01
    ssim: float = 1.0

    def __post_init__(self):
        if min(self.depth, self.grad, self.norm, self.ssim) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class ExtrapolatorConfig:
    """Architecture descriptor.

    ``fusion``: "dual" (separate depth/event encoders, fused at the bottleneck) or
    "concat" (one encoder on channel-stacked input). ``events``: "voxel",
    "frame" (event frame replicated across bins) or "none" (zeroed).
    """
    height: int = 64
    width: int = 64
    bins: int = 5
    widths: tuple = (16, 32, 64)
    bottleneck: int = 128
    fusion: str = "dual"
    events: str = "voxel"
    skip: bool = True
    separable: bool = False
    max_range: float = 200.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.fusion not in ("dual", "concat"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.events not in ("voxel", "frame", "none"):
            raise ValueError(f"unknown event input {self.events!r}")
        levels = len(self.widths)
        if self.height % 2 ** levels or self.width % 2 ** levels:
            raise ValueError(f"geometry must be divisible by {2 ** levels}")

    @classmethod
    def variant(cls, name, **kw):
        """Named ablation presets."""
        presets = {
            "full": {},
            "no_event": {"events": "none"},
            "event_frame": {"events": "frame"},
            "data_concat": {"fusion": "concat"},
            "no_skip": {"skip": False},
            "separable": {"separable": True},
        }
        if name not in presets:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **kw})


class ResConv(nn.Module):
    """ReLU(conv3x3(x) + conv1x1(x)); the 1x1 path can be dropped."""

    def __init__(self, cin, cout, rng, skip=True, separable=False):
        if separable:
            self.depthwise = nn.Conv2d(cin, cin, 3, rng, padding=1, groups=cin, bias=False)
            self.conv3 = nn.Conv2d(cin, cout, 1, rng)
        else:
            self.conv3 = nn.Conv2d(cin, cout, 3, rng, padding=1)
        self.conv1 = nn.Conv2d(cin, cout, 1, rng) if skip else None

    def forward(self, x):
        h = self.depthwise(x) if hasattr(self, "depthwise") else x
        y = self.conv3(h)
        if self.conv1 is not None:
            y = y + self.conv1(x)
        return relu(y)


def resconv_forward(x, block):
    return block(x)


class Encoder(nn.Module):
    def __init__(self, cin, widths, rng, skip, separable):
        self.blocks = []
        c = cin
        for w in widths:
            self.blocks.append(ResConv(c, w, rng, skip, separable))
            c = w

    def forward(self, x):
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = F.maxpool2d(x, 2)
        return x, skips


class ExtrapolatorModel(nn.Module):
    def __init__(self, config=None, seed=0):
        cfg = config or ExtrapolatorConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        w, k = cfg.widths, dict(skip=cfg.skip, separable=cfg.separable)
        if cfg.fusion == "dual":
            self.depth_encoder = Encoder(1, w, rng, **k)
            self.event_encoder = Encoder(cfg.bins, w, rng, **k)
            self.fuse = ResConv(2 * w[-1], cfg.bottleneck, rng, **k)
        else:
            self.encoder = Encoder(1 + cfg.bins, w, rng, **k)
            self.fuse = ResConv(w[-1], cfg.bottleneck, rng, **k)
        self.up = []
        self.dec = []
        c = cfg.bottleneck
        for width in reversed(w):
            self.up.append(nn.ConvTranspose2d(c, width, 2, rng, stride=2))
            self.dec.append(ResConv(2 * width, width, rng, **k))
            c = width
        self.head = nn.Conv2d(c, 1, 1, rng)

    def forward(self, depth, events):
        """depth: (N, 1, H, W) normalized; events: (N, B, H, W) normalized."""
        if self.config.fusion == "dual":
            d, skips = self.depth_encoder(depth)
            e, _ = self.event_encoder(events)
            x = self.fuse(concat([d, e], axis=1))
        else:
            x, skips = self.encoder(concat([depth, events], axis=1))
            x = self.fuse(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(concat([up(x), skip], axis=1))
        return softplus(self.head(x))


# ---------------------------------------------------------------------------
# inputs

def normalize_depth(values, max_range):
    return (np.asarray(values, np.float32) / np.float32(max_range))[None]


def event_input(voxel, config):
    """Map a (B, H, W) voxel grid to the network's event channels for ``config.events``."""
    v = np.asarray(voxel, dtype=np.float32)
    if config.events == "none":
        return np.zeros((config.bins,) + v.shape[1:], np.float32)
    if config.events == "frame":
        v = np.repeat(v.sum(axis=0, keepdims=True), config.bins, axis=0)
    return np.clip(v, -VOXEL_CLIP, VOXEL_CLIP) / VOXEL_CLIP


def extrapolate(model, depth_prior, voxel, t1=None):
    """Predict the depth frame at the end of the voxel interval (timestamp ``t1``)."""
    cfg = model.config
    values = voxel.values if hasattr(voxel, "values") else voxel
    if depth_prior.geometry != (cfg.height, cfg.width) or values.shape[1:] != depth_prior.geometry:
        raise ValueError(f"geometry mismatch: model {(cfg.height, cfg.width)}, "
                         f"depth {depth_prior.geometry}, voxel {values.shape}")
    if values.shape[0] != cfg.bins:
        raise ValueError(f"model expects {cfg.bins} bins, got {values.shape[0]}")
    with no_grad():
        out = model(Tensor(normalize_depth(depth_prior.values, cfg.max_range)[None]),
                    Tensor(event_input(values, cfg)[None]))
    pred = out.data[0, 0] * np.float32(cfg.max_range)
    return DepthFrame(pred, depth_prior.timestamp if t1 is None else t1)


# ---------------------------------------------------------------------------
# loss

def _diffs(d):
    dx = d[:, :, :-1, 1:] - d[:, :, :-1, :-1]
    dy = d[:, :, 1:, :-1] - d[:, :, :-1, :-1]
    return dx, dy


def total_loss(pred, target, weights=LossWeights(), mask=None, data_range=1.0, window=7,
               parts=False):
    """Weighted MSE + gradient + surface-normal + SSIM loss over valid target pixels.

    ``pred``/``target`` are (N, 1, H, W); ``mask`` defaults to ``target > 0``.
    Gradient and normal terms use forward differences on the (H-1, W-1) grid where
    a pixel and its right and lower neighbours are all valid.
    """
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    m = (target.data > 0) if mask is None else np.asarray(mask, bool)
    if not m.any():
        raise ValueError("target has no valid pixels")
    m = m.astype(pred.dtype)
    diff = pred - target
    l_depth = masked_mean(diff * diff, m)
    m2 = m[:, :, :-1, :-1] * m[:, :, :-1, 1:] * m[:, :, 1:, :-1]
    zero = Tensor(np.zeros((), pred.dtype))
    if m2.any():
        pdx, pdy = _diffs(pred)
        tdx, tdy = _diffs(target)
        l_grad = masked_mean(absolute(pdx - tdx) + absolute(pdy - tdy), m2)
        dot = pdx * tdx + pdy * tdy + 1.0
        n_p = sqrt(pdx * pdx + pdy * pdy + 1.0)
        n_t = sqrt(tdx * tdx + tdy * tdy + 1.0)
        l_norm = masked_mean(1.0 - dot / (n_p * n_t), m2)
    else:
        l_grad = l_norm = zero
    h, w = pred.shape[-2:]
    wm = window_mask(m, window) if h >= window and w >= window else None
    if wm is not None and wm.any():
        smap = ssim_map(pred, target, window, data_range)
        l_ssim = (1.0 - masked_mean(smap, wm)) * 0.5
    else:
        l_ssim = zero
    total = (l_depth * weights.depth + l_grad * weights.grad + l_norm * weights.norm
             + l_ssim * weights.ssim)
    if parts:
        return total, {"depth": l_depth.item(), "grad": l_grad.item(),
                       "norm": l_norm.item(), "ssim": l_ssim.item()}
    return total


# ---------------------------------------------------------------------------
# training

@dataclass
class ExtrapDataset:
    """Stacked training triples: prior (N, H, W) m, voxel (N, B, H, W), target (N, H, W) m."""
    prior: np.ndarray
    voxel: np.ndarray
    target: np.ndarray
    gap_us: np.ndarray = None

    def __len__(self):
        return self.prior.shape[0]

    def subset(self, idx):
        g = None if self.gap_us is None else self.gap_us[idx]
        return ExtrapDataset(self.prior[idx], self.voxel[idx], self.target[idx], g)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)


def _batch_inputs(ds, idx, cfg):
    prior = np.stack([normalize_depth(p, cfg.max_range) for p in ds.prior[idx]])
    ev = np.stack([event_input(v, cfg) for v in ds.voxel[idx]])
    target = np.stack([normalize_depth(t, cfg.max_range) for t in ds.target[idx]])
    return Tensor(prior), Tensor(ev), target


def train_extrapolator(dataset, model_config=None, train=None, log_fn=None, val=None):
    """NAdam + cosine-annealed training; returns (model, per-epoch log rows).

    With a validation :class:`ExtrapDataset` each row also carries the pooled
    validation RMSE in metres.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    train = train or TrainConfig()
    cfg = model_config or ExtrapolatorConfig()
    model = ExtrapolatorModel(cfg, seed=train.seed)
    opt = nn.NAdam(model.parameters(), lr=train.lr, total_epochs=train.epochs)
    rng = np.random.default_rng(train.seed + 1)
    history = []
    for epoch in range(train.epochs):
        lr = opt.set_epoch(epoch)
        order = rng.permutation(len(dataset))
        losses, counts = [], []
        for s in range(0, len(order), train.batch_size):
            idx = order[s:s + train.batch_size]
            prior, ev, target = _batch_inputs(dataset, idx, cfg)
            if not (target > 0).any():
                continue
            opt.zero_grad()
            loss = total_loss(model(prior, ev), target, train.weights)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            counts.append(len(idx))
        row = {"epoch": epoch + 1, "lr": lr,
               "train_loss": float(np.average(losses, weights=counts))}
        if val is not None and len(val):
            row["val_rmse"] = pooled_rmse(predict_batch(model, val.prior, val.voxel), val.target)
        history.append(row)
        if log_fn:
            log_fn(row)
        log.debug("epoch %d loss %.6f", epoch + 1, row["train_loss"])
    return model, history


def predict_batch(model, prior, voxel, batch_size=32):
    """Metric depth predictions for stacked priors (N, H, W) and voxels (N, B, H, W)."""
    cfg = model.config
    out = []
    with no_grad():
        for s in range(0, prior.shape[0], batch_size):
            p = np.stack([normalize_depth(x, cfg.max_range) for x in prior[s:s + batch_size]])
            e = np.stack([event_input(v, cfg) for v in voxel[s:s + batch_size]])
            out.append(model(Tensor(p), Tensor(e)).data[:, 0] * np.float32(cfg.max_range))
    return np.concatenate(out) if out else np.empty((0,) + prior.shape[1:], np.float32)


def pooled_rmse(pred, target):
    """RMSE over every pixel valid in both prediction and target."""
    m = (target > 0) & (pred > 0)
    if not m.any():
        return float("nan")
    d = pred[m].astype(np.float64) - target[m]
    return float(np.sqrt(np.mean(d * d)))


def config_to_dict(cfg):
    d = asdict(cfg)
    d["widths"] = list(cfg.widths)
    return d


# ---------------------------------------------------------------------------
# baselines

def baseline_repeat(depth_prior, t1=None):
    return depth_prior.retimed(depth_prior.timestamp if t1 is None else t1)


def _invalid_any(frames):
    bad = np.zeros(frames[0].geometry, bool)
    for f in frames:
        bad |= ~(f.values > 0)
    return bad


def baseline_linear(history, t1, k=3):
    """Per-pixel least-squares line through the last ``k`` frames, evaluated at ``t1``."""
    if len(history) < 2:
        raise ValueError("linear baseline needs at least two frames")
    frames = list(history)[-k:]
    t = np.array([f.timestamp for f in frames], dtype=np.float64)
    if np.ptp(t) == 0:
        raise ValueError("history frames share one timestamp")
    d = np.stack([f.values.astype(np.float64) for f in frames])
    tc = t - t.mean()
    slope = np.tensordot(tc, d - d.mean(axis=0), axes=1) / (tc @ tc)
    pred = d.mean(axis=0) + slope * (t1 - t.mean())
    pred = np.where(_invalid_any(frames), 0.0, np.maximum(pred, 0.0))
    return DepthFrame(pred.astype(np.float32), t1)


def baseline_exponential(history, t1):
    """Geometric extrapolation d_t * (d_t / d_prev) ** ((t1 - t) / (t - t_prev))."""
    if len(history) < 2:
        raise ValueError("exponential baseline needs two frames")
    prev, last = list(history)[-2:]
    dt_hist = last.timestamp - prev.timestamp
    if dt_hist <= 0:
        raise ValueError("history frames must be time-ordered")
    bad = _invalid_any([prev, last])
    a = np.where(bad, 1.0, last.values.astype(np.float64))
    b = np.where(bad, 1.0, prev.values.astype(np.float64))
    pred = a * (a / b) ** ((t1 - last.timestamp) / dt_hist)
    pred = np.where(bad | ~np.isfinite(pred), 0.0, np.minimum(pred, 1e6))
    return DepthFrame(pred.astype(np.float32), t1)
