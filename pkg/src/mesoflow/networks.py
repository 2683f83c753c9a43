"""Learnable components: U-Net backbone, flow/refinement nets, checkpoints.

Two networks drive the interpolation pipeline.  The flow network maps a
stacked frame pair to bidirectional flows (channels [0:2] -> f01,
[2:4] -> f10).  The refinement ("interp") network maps the stack
[i0, i1, fhat_t0, fhat_t1, g0, g1] to flow residuals and a visibility
logit (channels [0:2] -> d(f_t0), [2:4] -> d(f_t1), [4] -> logit v0,
with v1 = 1 - v0).

Both output heads are zero-initialized so an untrained model has exactly
zero flows and residuals and v0 = 0.5 everywhere; trunk convolutions use
Kaiming fan-in init.  Weights are immutable during inference; training
requires exclusive ownership of a model instance.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ContractError
from .imagery import NormStats
from .warpcore import (
    FlowField,
    VISIBILITY_EPS,
    VisibilityMap,
    approx_intermediate_flows,
    as_blend_time,
    backward_warp,
    blend_visibility,
)

log = logging.getLogger(__name__)

VARIANTS = ("ssm-g", "ssm-t", "ssm-tms")
#: Input H and W must be divisible by this (4 pooling stages).
SIZE_MULTIPLE = 16


@dataclass(frozen=True)
class UNetSpec:
    """Channel/kernel plan for one encoder-decoder network."""

    in_channels: int
    out_channels: int
    stem_channels: int = 64
    stem_kernel: int = 7
    down_channels: tuple[int, ...] = (128, 256, 512, 512)
    down_kernels: tuple[int, ...] = (5, 5, 3, 3)
    up_channels: tuple[int, ...] = (256, 128, 64, 32)
    up_kernel: int = 3
    head_kernel: int = 3
    block_kind: str = "standard"

    def __post_init__(self):
        if len(self.down_channels) != 4 or len(self.up_channels) != 4:
            raise ContractError("spec requires 4 down and 4 up stages")
        if len(self.down_kernels) != len(self.down_channels):
            raise ContractError("one kernel size per down stage")
        if self.block_kind not in ("standard", "multiscale"):
            raise ContractError(f"unknown block_kind {self.block_kind!r}")


def fingerprint(flow_spec: UNetSpec, interp_spec: UNetSpec, variant: str, c: int) -> str:
    blob = json.dumps(
        {"variant": variant, "C": c, "flow": asdict(flow_spec), "interp": asdict(interp_spec)},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def _split3(n: int) -> tuple[int, int, int]:
    a = math.ceil(n / 3)
    return a, a, n - 2 * a


class MultiScaleConv2d(nn.Module):
    """Parallel 3/5/7 convolutions over grouped input channels, concatenated.

    Input and output channels are each split into three contiguous groups
    (ceil thirds; the 7x7 branch takes the remainder) so the declared layer
    width is preserved while large kernels carry fewer channels.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if in_channels < 3 or out_channels < 3:
            raise ContractError("multiscale conv needs at least 3 in and out channels")
        self.in_splits = _split3(in_channels)
        out_splits = _split3(out_channels)
        self.branches = nn.ModuleList(
            nn.Conv2d(ci, co, k, padding=k // 2)
            for ci, co, k in zip(self.in_splits, out_splits, (3, 5, 7))
        )

    def forward(self, x):
        parts = torch.split(x, self.in_splits, dim=1)
        return torch.cat([conv(p) for conv, p in zip(self.branches, parts)], dim=1)


def _conv(kind: str, cin: int, cout: int, k: int) -> nn.Module:
    if kind == "multiscale":
        return MultiScaleConv2d(cin, cout)
    return nn.Conv2d(cin, cout, k, padding=k // 2)


class _DownBlock(nn.Module):
    def __init__(self, kind, cin, cout, k):
        super().__init__()
        self.body = nn.Sequential(
            nn.AvgPool2d(2),
            _conv(kind, cin, cout, k),
            nn.ReLU(inplace=True),
            _conv(kind, cout, cout, k),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class _UpBlock(nn.Module):
    def __init__(self, kind, cin, cskip, cout, k):
        super().__init__()
        self.upsample = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.body = nn.Sequential(
            _conv(kind, cin + cskip, cout, k),
            nn.ReLU(inplace=True),
            _conv(kind, cout, cout, k),
            nn.ReLU(inplace=True),
        )

    def forward(self, x, skip):
        x = self.upsample(x)
        return self.body(torch.cat([x, skip], dim=1))


class UNet(nn.Module):
    """4-down/4-up encoder-decoder with skip connections per ``UNetSpec``."""

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        k = spec.block_kind
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, spec.stem_channels, spec.stem_kernel, padding=spec.stem_kernel // 2),
            nn.ReLU(inplace=True),
        )
        downs = []
        cin = spec.stem_channels
        for cout, kernel in zip(spec.down_channels, spec.down_kernels):
            downs.append(_DownBlock(k, cin, cout, kernel))
            cin = cout
        self.downs = nn.ModuleList(downs)

        skips = (spec.down_channels[2], spec.down_channels[1], spec.down_channels[0], spec.stem_channels)
        ups = []
        for cout, cskip in zip(spec.up_channels, skips):
            ups.append(_UpBlock(k, cin, cskip, cout, spec.up_kernel))
            cin = cout
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(cin, spec.out_channels, spec.head_kernel, padding=spec.head_kernel // 2)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # Zero head: untrained flows/residuals are exactly zero.
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
            raise ContractError(f"input size {h}x{w} must be divisible by {SIZE_MULTIPLE}")
        s0 = self.stem(x)
        d1 = self.downs[0](s0)
        d2 = self.downs[1](d1)
        d3 = self.downs[2](d2)
        d4 = self.downs[3](d3)
        x = self.ups[0](d4, d3)
        x = self.ups[1](x, d2)
        x = self.ups[2](x, d1)
        x = self.ups[3](x, s0)
        return self.head(x)


@dataclass(frozen=True)
class ModelSpec:
    """Variant + band scope + the two network plans."""

    variant: str
    band_scope: int | str
    flow_spec: UNetSpec
    interp_spec: UNetSpec
    C: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "ssm-g":
            if self.band_scope != "all":
                raise ContractError("ssm-g is the all-bands model; band_scope must be 'all'")
        else:
            if not isinstance(self.band_scope, int):
                raise ContractError(f"{self.variant} is band-specific; band_scope must be a band id")
        if self.C != 1:
            raise ContractError("pipeline processes bands as separate single-channel samples (C=1)")

    @property
    def name(self) -> str:
        if self.band_scope == "all":
            return self.variant
        return f"{self.variant}-b{self.band_scope}"

    def fingerprint(self) -> str:
        return fingerprint(self.flow_spec, self.interp_spec, self.variant, self.C)


def model_spec(variant: str, band: int | None = None, **plan) -> ModelSpec:
    """Build a ModelSpec for one of the registered variants.

    ``plan`` kwargs (stem_channels, down_channels, ...) override the default
    channel plan of both networks, e.g. for reduced desk-scale models.
    """
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ContractError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant == "ssm-g":
        if band is not None:
            raise ContractError("ssm-g covers all bands; do not pass a band")
        scope: int | str = "all"
    else:
        if band is None:
            raise ContractError(f"{variant} requires a band")
        scope = int(band)
    kind = "multiscale" if variant == "ssm-tms" else "standard"
    c = 1
    flow = UNetSpec(in_channels=2 * c, out_channels=4 * c, block_kind=kind, **plan)
    interp = UNetSpec(in_channels=8 * c, out_channels=5 * c, block_kind=kind, **plan)
    return ModelSpec(variant=variant, band_scope=scope, flow_spec=flow, interp_spec=interp, C=c)


#: Narrow channel plan for desk-scale CPU experiments.
SMALL_PLAN = dict(
    stem_channels=16,
    down_channels=(32, 48, 64, 64),
    up_channels=(48, 32, 24, 16),
)


class InterpolationModel(nn.Module):
    """Flow + refinement networks plus normalization stats.

    Concurrent inference on shared weights is safe; training mutates the
    weights and needs exclusive ownership.
    """

    def __init__(self, spec: ModelSpec, norm: NormStats | None = None, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.norm = norm
        self.seed = seed
        torch.manual_seed(seed)
        self.flow_net = UNet(spec.flow_spec)
        self.interp_net = UNet(spec.interp_spec)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    # -- batched tensor paths (training / evaluation inner loop) -----------

    def flows(self, i0: torch.Tensor, i1: torch.Tensor):
        """Bidirectional flows for normalized (N, 1, H, W) inputs."""
        if i0.shape != i1.shape:
            raise ContractError(f"input shapes differ: {tuple(i0.shape)} vs {tuple(i1.shape)}")
        for name, im in (("i0", i0), ("i1", i1)):
            m = float(im.mean().abs())
            if m > 5.0:
                log.warning("%s has |mean| %.2f; inputs do not look standardized", name, m)
        out = self.flow_net(torch.cat([i0, i1], dim=1))
        return out[:, 0:2], out[:, 2:4]

    def refine(self, i0, i1, fhat_t0, fhat_t1, g0, g1):
        """Residual flows + complementary visibilities.

        Channel stack order is fixed: [i0, i1, fhat_t0, fhat_t1, g0, g1].
        """
        parts = {"i0": i0, "i1": i1, "fhat_t0": fhat_t0, "fhat_t1": fhat_t1, "g0": g0, "g1": g1}
        base = i0.shape[-2:]
        for name, p in parts.items():
            if p.shape[-2:] != base or p.shape[0] != i0.shape[0]:
                raise ContractError(
                    f"{name} shape {tuple(p.shape)} does not match i0 {tuple(i0.shape)}"
                )
        stack = torch.cat(list(parts.values()), dim=1)
        if stack.shape[1] != self.spec.interp_spec.in_channels:
            raise ContractError(
                f"refinement stack has {stack.shape[1]} channels, expected "
                f"{self.spec.interp_spec.in_channels}"
            )
        out = self.interp_net(stack)
        f_t0 = fhat_t0 + out[:, 0:2]
        f_t1 = fhat_t1 + out[:, 2:4]
        v0 = torch.sigmoid(out[:, 4:5]).clamp(VISIBILITY_EPS, 1.0 - VISIBILITY_EPS)
        v1 = 1.0 - v0
        return f_t0, f_t1, v0, v1

    def predict_batch(self, i0: torch.Tensor, i1: torch.Tensor, t) -> dict:
        """Full pipeline on normalized batches; ``t`` is a float or (N,1,1,1) tensor.

        Returns every intermediate needed by the losses.
        """
        f01, f10 = self.flows(i0, i1)
        fhat_t0, fhat_t1 = approx_intermediate_flows(f01, f10, t)
        g0 = backward_warp(i0, fhat_t0)
        g1 = backward_warp(i1, fhat_t1)
        f_t0, f_t1, v0, v1 = self.refine(i0, i1, fhat_t0, fhat_t1, g0, g1)
        w0 = backward_warp(i0, f_t0)
        w1 = backward_warp(i1, f_t1)
        pred = blend_visibility(w0, w1, v0, v1, t)
        return {
            "f01": f01, "f10": f10,
            "fhat_t0": fhat_t0, "fhat_t1": fhat_t1,
            "f_t0": f_t0, "f_t1": f_t1,
            "v0": v0, "v1": v1,
            "w0": w0, "w1": w1,
            "pred": pred,
        }

    # -- single-pair numpy API ---------------------------------------------

    @staticmethod
    def _pair_to_batch(i0, i1):
        a = torch.tensor(np.array(i0, dtype=np.float32))[None, None]
        b = torch.tensor(np.array(i1, dtype=np.float32))[None, None]
        if a.shape != b.shape:
            raise ContractError(f"input shapes differ: {tuple(a.shape[2:])} vs {tuple(b.shape[2:])}")
        return a, b

    def flow_forward(self, i0, i1) -> tuple[FlowField, FlowField]:
        """Flows for one normalized frame pair (2-D arrays)."""
        a, b = self._pair_to_batch(i0, i1)
        with torch.no_grad():
            f01, f10 = self.flows(a, b)
        return FlowField.from_tensor(f01[0]), FlowField.from_tensor(f10[0])

    def interp_forward(self, i0, i1, fhat_t0: FlowField, fhat_t1: FlowField, g0, g1):
        """Refinement for one pair; returns final flows and visibilities."""
        a, b = self._pair_to_batch(i0, i1)
        ft0 = fhat_t0.tensor()[None]
        ft1 = fhat_t1.tensor()[None]
        ga = torch.tensor(np.array(g0, dtype=np.float32))[None, None]
        gb = torch.tensor(np.array(g1, dtype=np.float32))[None, None]
        with torch.no_grad():
            f_t0, f_t1, v0, v1 = self.refine(a, b, ft0, ft1, ga, gb)
        return (
            FlowField.from_tensor(f_t0[0]),
            FlowField.from_tensor(f_t1[0]),
            VisibilityMap(w=v0[0, 0].numpy()),
            VisibilityMap(w=v1[0, 0].numpy()),
        )

    def interpolate(self, i0, i1, t) -> np.ndarray:
        """Interpolate a physical-unit frame pair at time ``t``.

        Inputs are standardized with the model's stats, run through the
        pipeline, and the result is mapped back to physical units.
        """
        tt = as_blend_time(t)
        norm = self.norm or NormStats(mean=0.0, std=1.0)
        a, b = self._pair_to_batch(norm.normalize(np.asarray(i0, np.float32)),
                                   norm.normalize(np.asarray(i1, np.float32)))
        with torch.no_grad():
            pred = self.predict_batch(a, b, tt)["pred"]
        return norm.denormalize(pred[0, 0].numpy()).astype(np.float32)


def param_count(model_or_spec) -> int:
    """Number of learnable scalars; builds the model if given a spec."""
    if isinstance(model_or_spec, nn.Module):
        return sum(p.numel() for p in model_or_spec.parameters() if p.requires_grad)
    return InterpolationModel(model_or_spec).param_count()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

WEIGHTS_NAME = "weights.pt"
MANIFEST_NAME = "manifest.json"


def save_checkpoint(
    model: InterpolationModel,
    path,
    loss_weights: dict | None = None,
    steps: int = 0,
    seed: int | None = None,
) -> Path:
    """Write weights + manifest into directory ``path``; returns the path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / WEIGHTS_NAME)
    spec = model.spec
    manifest = {
        "variant": spec.variant,
        "band_scope": spec.band_scope,
        "C": spec.C,
        "architecture": {"flow": asdict(spec.flow_spec), "interp": asdict(spec.interp_spec)},
        "fingerprint": spec.fingerprint(),
        "norm": None if model.norm is None else {"mean": model.norm.mean, "std": model.norm.std},
        "loss_weights": loss_weights or {"lambda_r": 1.0, "lambda_w": 0.65, "lambda_s": 0.23},
        "seed": model.seed if seed is None else seed,
        "steps": steps,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path) -> dict:
    mf = Path(path) / MANIFEST_NAME
    if not mf.exists():
        raise CheckpointError(f"no {MANIFEST_NAME} in {path}")
    return json.loads(mf.read_text())


def _unet_spec_from_dict(d: dict) -> UNetSpec:
    d = dict(d)
    for key in ("down_channels", "down_kernels", "up_channels"):
        d[key] = tuple(d[key])
    return UNetSpec(**d)


def load_checkpoint(path, expected_spec: ModelSpec | None = None):
    """Load a checkpoint directory; returns ``(model, manifest)``.

    If ``expected_spec`` is given its fingerprint must match the stored
    one, otherwise the architecture is rebuilt from the manifest.
    """
    path = Path(path)
    manifest = read_manifest(path)
    arch = manifest["architecture"]
    flow = _unet_spec_from_dict(arch["flow"])
    interp = _unet_spec_from_dict(arch["interp"])
    scope = manifest["band_scope"]
    spec = ModelSpec(
        variant=manifest["variant"],
        band_scope=scope if scope == "all" else int(scope),
        flow_spec=flow,
        interp_spec=interp,
        C=manifest["C"],
    )
    if spec.fingerprint() != manifest["fingerprint"]:
        raise CheckpointError("manifest fingerprint does not match its architecture")
    if expected_spec is not None and expected_spec.fingerprint() != manifest["fingerprint"]:
        raise CheckpointError(
            "checkpoint fingerprint does not match the constructed architecture"
        )
    norm = None
    if manifest.get("norm"):
        norm = NormStats(mean=manifest["norm"]["mean"], std=manifest["norm"]["std"])
    model = InterpolationModel(spec, norm=norm, seed=manifest.get("seed", 0))
    state = torch.load(path / WEIGHTS_NAME, weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, manifest
