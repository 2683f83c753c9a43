"""Loss terms, example sampling/augmentation, and the optimization loop.

The total objective is a weighted sum of reconstruction, warping, and
smoothness terms, all L1-based; per-pixel means keep the weights
resolution independent.  Sampling/augmentation may run in parallel
contexts, but one trainer owns the optimizer step and the (append-only)
training log.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError, DivergenceError
from .imagery import FrameSequence, NormStats
from .networks import InterpolationModel
from .warpcore import backward_warp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three loss terms."""

    lambda_r: float = 1.0
    lambda_w: float = 0.65
    lambda_s: float = 0.23

    def __post_init__(self):
        for name in ("lambda_r", "lambda_w", "lambda_s"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    l_r: float
    l_w: float
    l_s: float
    total: float


@dataclass(frozen=True)
class TrainConfig:
    """Sampling, augmentation, and optimizer settings."""

    steps: int
    batch_size: int = 8
    crop_source: int = 264
    crop_train: int = 256
    sequence_length: int = 15
    input_gap_steps: int = 10
    intermediate_count: int = 1
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.2
    val_examples: int = 16
    augment: bool = True
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.crop_train > self.crop_source:
            raise ContractError("crop_train must be <= crop_source")
        if self.crop_train % 16:
            raise ContractError("crop_train must be divisible by 16")
        if not 0 < self.val_fraction < 1:
            raise ContractError("val_fraction must lie in (0, 1)")
        if self.sequence_length < self.input_gap_steps + 1:
            raise ContractError("sequence_length must be >= input_gap_steps + 1")
        if self.intermediate_count < 1:
            raise ContractError("intermediate_count must be >= 1")
        if self.intermediate_count > self.input_gap_steps - 1:
            raise ContractError("intermediate_count exceeds available interior frames")


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def _t(x):
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.as_tensor(arr)


def reconstruction_loss(preds, targets):
    """(1/N) * sum_i mean|pred_i - target_i| (mean over pixels, then frames)."""
    if len(preds) == 0 or len(preds) != len(targets):
        raise ContractError("preds and targets must be equal-length non-empty lists")
    terms = []
    for p, y in zip(preds, targets):
        p, y = _t(p), _t(y)
        if p.shape != y.shape:
            raise ContractError(f"pred shape {tuple(p.shape)} != target shape {tuple(y.shape)}")
        terms.append((p - y).abs().mean())
    return torch.stack(terms).mean()


def warping_loss(i0, i1, intermediates, f01, f10, fhats):
    """Photometric consistency of the estimated flows.

        mean|i0 - g(i1, f01)| + mean|i1 - g(i0, f10)|
        + (1/N) sum_i mean|I_ti - g(i0, fhat_t0_i)|
        + (1/N) sum_i mean|I_ti - g(i1, fhat_t1_i)|

    ``fhats`` is a list of (fhat_t0, fhat_t1) pairs, one per intermediate;
    these are the flows *from* time t back to each endpoint, which is what
    the backward warp needs to rebuild I_t.
    """
    if len(intermediates) == 0:
        raise ContractError("need at least one intermediate frame")
    if len(fhats) != len(intermediates):
        raise ContractError("one (fhat_t0, fhat_t1) pair per intermediate frame")
    i0, i1 = _t(i0), _t(i1)
    if i0.shape != i1.shape:
        raise ContractError(f"i0 shape {tuple(i0.shape)} != i1 shape {tuple(i1.shape)}")
    loss = (i0 - backward_warp(i1, _t(f01))).abs().mean()
    loss = loss + (i1 - backward_warp(i0, _t(f10))).abs().mean()
    term0 = []
    term1 = []
    for it, (fh0, fh1) in zip(intermediates, fhats):
        it = _t(it)
        term0.append((it - backward_warp(i0, _t(fh0))).abs().mean())
        term1.append((it - backward_warp(i1, _t(fh1))).abs().mean())
    return loss + torch.stack(term0).mean() + torch.stack(term1).mean()


def smoothness_loss(f01, f10):
    """Sum over both flows of the mean forward-difference gradient magnitude.

    For one flow with components (u, v) the term is
    ``(mean|dx u| + mean|dy u| + mean|dx v| + mean|dy v|) / 2``; the joint
    mean over the stacked component axis computes exactly that.  The
    boundary row/column is excluded by the forward differences.
    """
    total = None
    for flow in (f01, f10):
        f = _t(flow)
        if f.shape[-3] != 2:
            raise ContractError(f"flow must have 2 components, got shape {tuple(f.shape)}")
        term = (f[..., :, 1:] - f[..., :, :-1]).abs().mean() + (
            f[..., 1:, :] - f[..., :-1, :]
        ).abs().mean()
        total = term if total is None else total + term
    return total


def total_loss(l_r, l_w, l_s, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted combination of the three loss terms."""
    vals = [float(x) for x in (l_r, l_w, l_s)]
    if not all(np.isfinite(v) for v in vals):
        raise DivergenceError(f"non-finite loss components {vals}", step=-1)
    total = weights.lambda_r * vals[0] + weights.lambda_w * vals[1] + weights.lambda_s * vals[2]
    return LossBreakdown(l_r=vals[0], l_w=vals[1], l_s=vals[2], total=total)


# ---------------------------------------------------------------------------
# Sampling and augmentation
# ---------------------------------------------------------------------------


def augment_image(a: np.ndarray, aug: tuple[int, int, int]) -> np.ndarray:
    """Apply (flip_h, flip_v, rot90_k) to the trailing two axes."""
    fh, fv, k = aug
    if fh:
        a = a[..., :, ::-1]
    if fv:
        a = a[..., ::-1, :]
    if k:
        a = np.rot90(a, k=k, axes=(-2, -1))
    return np.ascontiguousarray(a)


@dataclass(frozen=True)
class TrainingExample:
    i0: np.ndarray
    i1: np.ndarray
    labels: tuple[tuple[float, np.ndarray], ...]
    meta: dict = field(default_factory=dict)


def sample_training_example(
    seq: FrameSequence,
    cfg: TrainConfig,
    rng: np.random.Generator,
    window_start: int | None = None,
) -> TrainingExample:
    """Draw one (i0, i1, labels) example from a sequence.

    A window of ``sequence_length`` frames is chosen, i0/i1 are
    ``input_gap_steps`` apart inside it, and ``intermediate_count`` interior
    frames become labels at t = offset/gap.  A single crop and a single
    flip/rotation are applied to every frame of the example.
    """
    n = len(seq)
    if n < cfg.sequence_length:
        raise ContractError(
            f"sequence has {n} frames, need at least {cfg.sequence_length}"
        )
    if window_start is None:
        window_start = int(rng.integers(0, n - cfg.sequence_length + 1))
    elif window_start + cfg.sequence_length > n:
        raise ContractError("window does not fit the sequence")

    gap = cfg.input_gap_steps
    i0_off = int(rng.integers(0, cfg.sequence_length - gap))
    label_offs = sorted(rng.choice(np.arange(1, gap), size=cfg.intermediate_count, replace=False).tolist())

    h, w = seq.shape
    src = min(cfg.crop_source, min(h, w))
    if src < cfg.crop_train:
        raise ContractError(
            f"frames of size {h}x{w} cannot supply a {cfg.crop_train}px crop"
        )
    rs = int(rng.integers(0, h - src + 1))
    cs = int(rng.integers(0, w - src + 1))
    rt = rs + int(rng.integers(0, src - cfg.crop_train + 1))
    ct = cs + int(rng.integers(0, src - cfg.crop_train + 1))

    aug = (0, 0, 0)
    if cfg.augment:
        aug = (int(rng.integers(2)), int(rng.integers(2)), int(rng.integers(4)))

    def prep(frame_idx):
        px = seq[window_start + frame_idx].pixels[rt : rt + cfg.crop_train, ct : ct + cfg.crop_train]
        return augment_image(px, aug)

    i0 = prep(i0_off)
    i1 = prep(i0_off + gap)
    labels = tuple((off / gap, prep(i0_off + off)) for off in label_offs)
    meta = {
        "window_start": window_start,
        "i0_offset": i0_off,
        "label_offsets": tuple(label_offs),
        "crop": (rt, ct),
        "source_crop": (rs, cs),
        "aug": aug,
    }
    return TrainingExample(i0=i0, i1=i1, labels=labels, meta=meta)


def enumerate_windows(seqs: list[FrameSequence], cfg: TrainConfig) -> list[tuple[int, int]]:
    out = []
    for si, seq in enumerate(seqs):
        for start in range(0, len(seq) - cfg.sequence_length + 1):
            out.append((si, start))
    return out


def split_windows(windows, cfg: TrainConfig):
    """Random train/validation split of example windows, fixed by seed."""
    if len(windows) < 2:
        raise ContractError("need at least 2 example windows to split")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(windows))
    n_val = max(1, int(round(cfg.val_fraction * len(windows))))
    n_val = min(n_val, len(windows) - 1)
    val = [windows[i] for i in perm[:n_val]]
    train = [windows[i] for i in perm[n_val:]]
    return train, val


# ---------------------------------------------------------------------------
# Optimization loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    log: list[dict]
    steps: int
    best_val_l_r: float
    norm: NormStats


def _batch_tensors(examples, norm: NormStats):
    i0 = torch.as_tensor(norm.normalize(np.stack([e.i0 for e in examples])), dtype=torch.float32)[:, None]
    i1 = torch.as_tensor(norm.normalize(np.stack([e.i1 for e in examples])), dtype=torch.float32)[:, None]
    n_labels = len(examples[0].labels)
    label_ts, label_imgs = [], []
    for j in range(n_labels):
        ts = torch.tensor([e.labels[j][0] for e in examples], dtype=torch.float32).view(-1, 1, 1, 1)
        imgs = torch.as_tensor(
            norm.normalize(np.stack([e.labels[j][1] for e in examples])), dtype=torch.float32
        )[:, None]
        label_ts.append(ts)
        label_imgs.append(imgs)
    return i0, i1, label_ts, label_imgs


def _forward_losses(model: InterpolationModel, i0, i1, label_ts, label_imgs):
    """Losses for one batch; returns (l_r, l_w, l_s) tensors."""
    f01 = f10 = None
    rec_terms, warp0_terms, warp1_terms = [], [], []
    for ts, target in zip(label_ts, label_imgs):
        out = model.predict_batch(i0, i1, ts)
        f01, f10 = out["f01"], out["f10"]
        rec_terms.append((out["pred"] - target).abs().mean())
        warp0_terms.append((target - backward_warp(i0, out["fhat_t0"])).abs().mean())
        warp1_terms.append((target - backward_warp(i1, out["fhat_t1"])).abs().mean())
    l_r = torch.stack(rec_terms).mean()
    l_w = (
        (i0 - backward_warp(i1, f01)).abs().mean()
        + (i1 - backward_warp(i0, f10)).abs().mean()
        + torch.stack(warp0_terms).mean()
        + torch.stack(warp1_terms).mean()
    )
    l_s = smoothness_loss(f01, f10)
    return l_r, l_w, l_s


def train(
    model: InterpolationModel,
    dataset: list[FrameSequence],
    cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    norm: NormStats | None = None,
    initial_step: int = 0,
) -> TrainResult:
    """Run ``cfg.steps`` Adam steps; the model ends at its best-validation state.

    Normalization stats default to statistics of the frames covered by the
    training split, and are stored on the model for checkpointing.
    Deterministic for a fixed seed up to platform-level reductions.
    """
    if not dataset:
        raise ContractError("dataset is empty")
    windows = enumerate_windows(dataset, cfg)
    train_windows, val_windows = split_windows(windows, cfg)

    if norm is None:
        norm = _train_split_norm(dataset, cfg, train_windows)
    model.norm = norm

    if cfg.steps == 0:
        return TrainResult(log=[], steps=initial_step, best_val_l_r=float("inf"), norm=norm)

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps
    )

    # Fixed validation batch: deterministically sampled examples, no augment.
    val_rng = np.random.default_rng(cfg.seed + 1)
    val_cfg_examples = []
    for si, start in val_windows[: cfg.val_examples]:
        ex = sample_training_example(dataset[si], _no_augment(cfg), val_rng, window_start=start)
        val_cfg_examples.append(ex)
    v_i0, v_i1, v_ts, v_imgs = _batch_tensors(val_cfg_examples, norm)

    def val_l_r() -> float:
        model.eval()
        with torch.no_grad():
            terms = []
            for ts, target in zip(v_ts, v_imgs):
                pred = model.predict_batch(v_i0, v_i1, ts)["pred"]
                terms.append((pred - target).abs().mean())
            out = float(torch.stack(terms).mean())
        model.train()
        return out

    records: list[dict] = []
    best_val = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    last_good_state = copy.deepcopy(model.state_dict())
    t_start = time.time()
    model.train()

    for step in range(1, cfg.steps + 1):
        picks = [train_windows[int(rng.integers(len(train_windows)))] for _ in range(cfg.batch_size)]
        examples = [
            sample_training_example(dataset[si], cfg, rng, window_start=start) for si, start in picks
        ]
        i0, i1, ts, imgs = _batch_tensors(examples, norm)
        l_r, l_w, l_s = _forward_losses(model, i0, i1, ts, imgs)
        total = weights.lambda_r * l_r + weights.lambda_w * l_w + weights.lambda_s * l_s
        if not torch.isfinite(total):
            raise DivergenceError(
                f"non-finite loss at step {initial_step + step}",
                step=initial_step + step,
                last_good_state=last_good_state,
            )
        opt.zero_grad()
        total.backward()
        opt.step()

        if step % cfg.log_every == 0 or step == cfg.steps:
            v = val_l_r()
            records.append(
                {
                    "step": initial_step + step,
                    "l_r": float(l_r.detach()),
                    "l_w": float(l_w.detach()),
                    "l_s": float(l_s.detach()),
                    "total": float(total.detach()),
                    "val_l_r": v,
                    "wallclock_s": round(time.time() - t_start, 3),
                }
            )
            last_good_state = copy.deepcopy(model.state_dict())
            if v < best_val:
                best_val = v
                best_state = copy.deepcopy(model.state_dict())
            log.info(
                "step %d: l_r %.5f l_w %.5f l_s %.5f total %.5f val %.5f",
                initial_step + step, records[-1]["l_r"], records[-1]["l_w"],
                records[-1]["l_s"], records[-1]["total"], v,
            )

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        log=records, steps=initial_step + cfg.steps, best_val_l_r=best_val, norm=norm
    )


def _no_augment(cfg: TrainConfig) -> TrainConfig:
    return dataclasses.replace(cfg, augment=False)


def _train_split_norm(dataset, cfg, train_windows) -> NormStats:
    """Stats over frames covered by at least one training window."""
    covered: dict[int, set[int]] = {}
    for si, start in train_windows:
        covered.setdefault(si, set()).update(range(start, start + cfg.sequence_length))
    total = 0.0
    total_sq = 0.0
    count = 0
    for si, idxs in covered.items():
        px = np.stack([dataset[si][k].pixels for k in sorted(idxs)]).astype(np.float64)
        total += float(px.sum())
        total_sq += float(np.square(px).sum())
        count += px.size
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    return NormStats(mean=mean, std=float(np.sqrt(var)))


def grid_search_lambdas(
    spec_factory,
    dataset: list[FrameSequence],
    cfg: TrainConfig,
    grid: list[tuple[float, float]],
    budget: int | None = None,
):
    """Short-budget training per (lambda_s, lambda_w) pair.

    Returns ``(best_pair, table)`` where the table lists every evaluated
    cell's final validation reconstruction loss (diverged cells record
    infinity).  At most ``budget`` cells are evaluated.
    """
    if not grid:
        raise ContractError("grid must be non-empty")
    cells = grid if budget is None else grid[: int(budget)]
    table = []
    for lam_s, lam_w in cells:
        weights = LossWeights(lambda_r=1.0, lambda_w=lam_w, lambda_s=lam_s)
        model = InterpolationModel(spec_factory(), seed=cfg.seed)
        try:
            result = train(model, dataset, cfg, weights=weights)
            score = result.best_val_l_r
        except DivergenceError:
            score = float("inf")
        table.append({"lambda_s": lam_s, "lambda_w": lam_w, "val_l_r": score})
    best = min(table, key=lambda row: row["val_l_r"])
    return (best["lambda_s"], best["lambda_w"]), table
