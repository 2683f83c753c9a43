"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training-dependent criteria (5, 6, 7, 10) share one session-scoped
trained model.  Budgeted for a 2-core CPU box; the heavy run takes a few
minutes.
"""

import time

import numpy as np
import pytest
import torch

from mesoflow.evaluation import (
    LinearPredictor,
    NetworkPredictor,
    gap_sweep,
    psnr,
    reconstruct_series,
    rmse,
    samples_from_sequences,
    ssim,
    time_sweep,
)
from mesoflow.imagery import (
    RampEvent,
    Rotation,
    SyntheticScene,
    TextureParams,
    Translation,
    Vortex,
    generate_synthetic,
)
from mesoflow.networks import (
    InterpolationModel,
    SMALL_PLAN,
    load_checkpoint,
    model_spec,
    param_count,
    save_checkpoint,
)
from mesoflow.training import (
    TrainConfig,
    reconstruction_loss,
    smoothness_loss,
    train,
    warping_loss,
)
from mesoflow.warpcore import VisibilityMap, backward_warp, blend_visibility

from oracles import central_difference_grad, psnr_ref, rel_err, rmse_ref, ssim_ref
from test_networks import TINY_PLAN


def criterion(num, description, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"\nCRITERION {num} [{status}] {description}" + (f" ({detail})" if detail else ""))
    assert passed, f"criterion {num}: {description} ({detail})"


def mixed_scene(seed, T=15, size=64, ramp=False, rotate=False, speed=(0.15, 0.55)):
    r = np.random.default_rng((seed, 99))
    ang = r.uniform(0, 2 * np.pi)
    mag = r.uniform(*speed)
    prims = [Translation(mag * np.cos(ang), mag * np.sin(ang))]
    if rotate:
        prims.append(Rotation((r.uniform(16, size - 16), r.uniform(16, size - 16)),
                              r.uniform(-0.008, 0.008)))
    ramps = ()
    if ramp:
        ramps = (RampEvent((r.uniform(16, size - 16), r.uniform(16, size - 16)),
                           r.uniform(6, 10), r.uniform(-0.04, 0.04)),)
    return SyntheticScene(
        seed=seed,
        velocity_params=tuple(prims),
        ramp_events=ramps,
        texture_params=TextureParams(count=20, sigma_range=(3.0, 7.0)),
        T=T, H=size, W=size,
    )


TRAIN_SEQUENCES = 420  # x5 windows each = 2100 distinct training examples
TRAIN_STEPS = 1000


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Criterion-5 training run shared by criteria 5, 6, 7, and 10."""
    t0 = time.time()
    seqs = [
        generate_synthetic(mixed_scene(1000 + i, ramp=(i % 3 == 0), rotate=(i % 2 == 0)))[0]
        for i in range(TRAIN_SEQUENCES)
    ]
    model = InterpolationModel(model_spec("ssm-t", band=13, **SMALL_PLAN), seed=11)
    cfg = TrainConfig(
        steps=TRAIN_STEPS, batch_size=8, crop_source=64, crop_train=64,
        sequence_length=15, input_gap_steps=10, seed=11, log_every=50,
    )
    result = train(model, seqs, cfg)
    ckpt = tmp_path_factory.mktemp("acceptance") / "checkpoint"
    save_checkpoint(model, ckpt, steps=result.steps)
    return {"model": model, "ckpt": ckpt, "train_s": time.time() - t0, "result": result}


def test_criterion_1_metric_oracles(rng):
    t0 = time.time()
    worst = 0.0
    for _ in range(20):
        a = rng.normal(size=(64, 64)) * rng.uniform(0.5, 3)
        b = a + rng.normal(size=(64, 64)) * rng.uniform(0.01, 0.5)
        width = float(rng.uniform(1, 300))
        for got, ref in (
            (rmse(a, b), rmse_ref(a, b)),
            (psnr(a, b, width), psnr_ref(a, b, width)),
            (ssim(a, b, width), ssim_ref(a, b, width)),
        ):
            worst = max(worst, abs(got - ref) / abs(ref))
    elapsed = time.time() - t0
    criterion(
        1, "rmse/psnr/ssim match brute-force oracles within 1e-6 on 20 pairs",
        worst < 1e-6 and elapsed < 10,
        f"worst rel err {worst:.2e}, {elapsed:.1f}s",
    )


def test_criterion_2_gradient_checks(rng):
    t0 = time.time()
    h = w = 8
    img = rng.normal(size=(h, w))
    flow = rng.uniform(0.2, 0.8, size=(2, h, w)) * rng.choice([-1, 1], size=(2, h, w))
    probe = rng.normal(size=(h, w))

    img_t = torch.tensor(img, requires_grad=True)
    flow_t = torch.tensor(flow, requires_grad=True)
    (backward_warp(img_t, flow_t) * torch.tensor(probe)).sum().backward()
    fd_img = central_difference_grad(
        lambda x: float((backward_warp(torch.tensor(x), torch.tensor(flow)) * torch.tensor(probe)).sum()),
        img.copy(),
    )
    fd_flow = central_difference_grad(
        lambda f: float((backward_warp(torch.tensor(img), torch.tensor(f)) * torch.tensor(probe)).sum()),
        flow.copy(),
    )
    errs = [rel_err(img_t.grad.numpy(), fd_img), rel_err(flow_t.grad.numpy(), fd_flow)]

    # losses w.r.t. network outputs
    i0 = rng.normal(size=(h, w))
    i1 = rng.normal(size=(h, w))
    target = rng.normal(size=(h, w)) * 2
    pred0 = rng.normal(size=(h, w))

    pred_t = torch.tensor(pred0, requires_grad=True)
    reconstruction_loss([pred_t], [torch.tensor(target)]).backward()
    fd = central_difference_grad(
        lambda p: float(reconstruction_loss([torch.tensor(p)], [torch.tensor(target)])), pred0.copy()
    )
    errs.append(rel_err(pred_t.grad.numpy(), fd))

    f01_t = torch.tensor(flow, requires_grad=True)
    fh = torch.tensor(rng.uniform(0.2, 0.8, size=(2, h, w)))
    warping_loss(
        torch.tensor(i0), torch.tensor(i1), [torch.tensor(target)],
        f01_t, torch.tensor(-flow), [(fh, fh.flip(0))],
    ).backward()
    fd = central_difference_grad(
        lambda f: float(
            warping_loss(
                torch.tensor(i0), torch.tensor(i1), [torch.tensor(target)],
                torch.tensor(f), torch.tensor(-flow), [(fh, fh.flip(0))],
            )
        ),
        flow.copy(),
    )
    errs.append(rel_err(f01_t.grad.numpy(), fd))

    fs_t = torch.tensor(flow, requires_grad=True)
    smoothness_loss(fs_t, torch.tensor(-flow)).backward()
    fd = central_difference_grad(
        lambda f: float(smoothness_loss(torch.tensor(f), torch.tensor(-flow))), flow.copy()
    )
    errs.append(rel_err(fs_t.grad.numpy(), fd))

    elapsed = time.time() - t0
    criterion(
        2, "warp and loss gradients match central differences within 1e-4",
        max(errs) < 1e-4 and elapsed < 60,
        f"worst rel err {max(errs):.2e}, {elapsed:.1f}s",
    )


def test_criterion_3_closed_loop_oracle():
    t0 = time.time()
    worst = 0.0
    scenes = [
        SyntheticScene(seed=50, velocity_params=(Translation(0.45, -0.3),), T=8),
        SyntheticScene(seed=51, velocity_params=(Rotation((32, 32), 0.01),), T=8),
        SyntheticScene(
            seed=52,
            velocity_params=(Translation(0.2, 0.2), Vortex((32, 32), 1.5, 14.0)),
            T=8,
        ),
    ]
    for scene in scenes:
        seq, flows = generate_synthetic(scene)
        px = seq.pixel_stack()
        std = px.std()
        for k in range(len(seq) - 1):
            rebuilt = backward_warp(px[k + 1], flows[k].tensor()).numpy()
            margin = int(np.ceil(np.hypot(flows[k].u, flows[k].v).max())) + 1
            sl = (slice(margin, -margin), slice(margin, -margin))
            err = float(np.sqrt(np.mean((rebuilt[sl] - px[k][sl]) ** 2))) / std
            worst = max(worst, err)
    elapsed = time.time() - t0
    criterion(
        3, "ground-truth flows reconstruct the previous frame (interior rmse < 1e-3)",
        worst < 1e-3 and elapsed < 30,
        f"worst normalized rmse {worst:.2e}, {elapsed:.1f}s",
    )


def test_criterion_4_blend_identities(rng):
    t0 = time.time()
    w0 = rng.normal(size=(32, 32)).astype(np.float32)
    w1 = rng.normal(size=(32, 32)).astype(np.float32)
    ones = VisibilityMap(w=np.ones((32, 32)))
    mean_ok = True
    for t in (0.25, 0.5, 0.8):
        out = blend_visibility(w0, w1, ones, ones, t)
        mean_ok &= bool(np.allclose(out, (1 - t) * w0 + t * w1, atol=1e-6))

    # full pipeline at the endpoints returns the warped endpoint bit-exactly,
    # including with non-trivial weights
    model = InterpolationModel(model_spec("ssm-t", band=13, **TINY_PLAN), seed=2)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    i0 = torch.randn(1, 1, 32, 32)
    i1 = torch.randn(1, 1, 32, 32)
    endpoint_ok = True
    for t, key in ((0.0, "w0"), (1.0, "w1")):
        with torch.no_grad():
            out = model.predict_batch(i0, i1, t)
        endpoint_ok &= bool(torch.equal(out["pred"], out[key]))
    elapsed = time.time() - t0
    criterion(
        4, "blend identities: all-ones mean within 1e-6; exact warped endpoints at t=0/1",
        mean_ok and endpoint_ok and elapsed < 10,
        f"{elapsed:.1f}s",
    )


def test_criterion_5_learning_beats_linear(trained):
    model = trained["model"]
    predictor = NetworkPredictor(model)
    linear = LinearPredictor()
    test_seqs = [
        generate_synthetic(mixed_scene(9000 + i, ramp=(i % 3 == 0), rotate=(i % 2 == 0)))[0]
        for i in range(30)
    ]
    samples = samples_from_sequences(test_seqs, 10)
    model_rmse = float(np.mean([rmse(predictor.predict(s.i0, s.i1, 0.5), s.truth_at(0.5)) for s in samples]))
    linear_rmse = float(np.mean([rmse(linear.predict(s.i0, s.i1, 0.5), s.truth_at(0.5)) for s in samples]))
    ratio = model_rmse / linear_rmse
    criterion(
        5,
        f"trained on {TRAIN_SEQUENCES * 5} examples, test RMSE at least 20% below linear",
        ratio <= 0.8 and trained["train_s"] <= 3 * 3600,
        f"model {model_rmse:.5f} vs linear {linear_rmse:.5f}, ratio {ratio:.3f}, "
        f"train {trained['train_s']:.0f}s",
    )


def test_criterion_6_u_shaped_time_curve(trained):
    predictor = NetworkPredictor(trained["model"])
    test_seqs = [
        generate_synthetic(mixed_scene(9100 + i, ramp=(i % 3 == 0), rotate=(i % 2 == 0)))[0]
        for i in range(20)
    ]
    samples = samples_from_sequences(test_seqs, 10)
    sweep = time_sweep(predictor, samples)
    curve = {t: rec.psnr_db for t, rec in sweep.points}
    t_min = min(curve, key=curve.get)
    criterion(
        6, "PSNR over t in {0.1..0.9} attains its minimum at t in {0.4, 0.5, 0.6}",
        t_min in (0.4, 0.5, 0.6),
        "curve " + " ".join(f"{t:.1f}:{v:.2f}" for t, v in sorted(curve.items())),
    )


def test_criterion_7_gap_degradation(trained):
    t0 = time.time()
    seqs = []
    for i in range(6):
        r = np.random.default_rng((4200 + i, 5))
        ang = r.uniform(0, 2 * np.pi)
        mag = r.uniform(0.3, 0.45)
        seqs.append(
            generate_synthetic(
                SyntheticScene(
                    seed=4200 + i,
                    velocity_params=(Translation(mag * np.cos(ang), mag * np.sin(ang)),),
                    texture_params=TextureParams(count=20, sigma_range=(3.0, 7.0)),
                    T=20, H=64, W=64,
                )
            )[0]
        )
    gaps = [2 * k for k in range(1, 10)]  # 1x..9x the base 2-minute gap
    tol = 0.3
    detail = []
    ok = True
    for predictor in (LinearPredictor(), NetworkPredictor(trained["model"])):
        sweep = gap_sweep(predictor, seqs, gaps_minutes=gaps, t=0.5)
        curve = [rec.psnr_db for _, rec in sweep.points]
        assert len(curve) == 9
        non_increasing = all(b <= a + tol for a, b in zip(curve, curve[1:]))
        ok &= non_increasing
        detail.append(f"{predictor.name}: " + "->".join(f"{v:.1f}" for v in curve))
    elapsed = time.time() - t0
    criterion(
        7, "PSNR non-increasing (0.3 dB tolerance) as the gap scales 1x..9x",
        ok and elapsed < 600,
        "; ".join(detail) + f", {elapsed:.0f}s",
    )


def test_criterion_8_parameter_ordering():
    t0 = time.time()
    t_spec = model_spec("ssm-t", band=13)
    tms_spec = model_spec("ssm-tms", band=13)
    n_t = param_count(t_spec)
    n_tms = param_count(tms_spec)
    shape_ok = True
    for spec in (t_spec, tms_spec):
        model = InterpolationModel(spec, seed=0)
        x = torch.randn(1, 1, 256, 256)
        with torch.no_grad():
            out = model.predict_batch(x, x.flip(-1), 0.5)
        shape_ok &= out["f01"].shape == (1, 2, 256, 256)
        shape_ok &= out["v0"].shape == (1, 1, 256, 256)
        shape_ok &= out["pred"].shape == (1, 1, 256, 256)
    elapsed = time.time() - t0
    criterion(
        8, "param_count(ssm-tms) < param_count(ssm-t); 256x256 shape contract",
        n_tms < n_t and shape_ok and elapsed < 60,
        f"tms {n_tms:,} < t {n_t:,}, {elapsed:.1f}s",
    )


def test_criterion_9_determinism_and_checkpoint_fidelity(tmp_path):
    t0 = time.time()
    seqs = [
        generate_synthetic(mixed_scene(8800 + i, rotate=(i % 2 == 0)))[0] for i in range(6)
    ]
    logs = []
    for _ in range(2):
        model = InterpolationModel(model_spec("ssm-t", band=13, **TINY_PLAN), seed=4)
        cfg = TrainConfig(
            steps=20, batch_size=4, crop_source=64, crop_train=64,
            sequence_length=15, input_gap_steps=10, seed=4, log_every=5,
        )
        result = train(model, seqs, cfg)
        logs.append([{k: v for k, v in r.items() if k != "wallclock_s"} for r in result.log])
    identical = logs[0] == logs[1]

    save_checkpoint(model, tmp_path / "ckpt", steps=20)
    back, _ = load_checkpoint(tmp_path / "ckpt")
    px = seqs[0].pixel_stack()
    before = model.interpolate(px[0], px[10], 0.5)
    after = back.interpolate(px[0], px[10], 0.5)
    bit_exact = before.tobytes() == after.tobytes()
    elapsed = time.time() - t0
    criterion(
        9, "identical seeds give identical loss logs; save/load/interpolate is bit-exact",
        identical and bit_exact and elapsed < 600,
        f"{elapsed:.0f}s",
    )


def test_criterion_10_series_reconstruction(trained):
    t0 = time.time()
    scene = SyntheticScene(
        seed=7000,
        velocity_params=(Translation(0.3, 0.12),),
        texture_params=TextureParams(count=24, sigma_range=(3.0, 7.0)),
        ramp_events=(RampEvent(center=(32, 32), radius=10.0, delta=0.03),),
        T=61, H=64, W=64,
    )
    seq, _ = generate_synthetic(scene)
    pixel = (32, 32)  # inside the convective ramp
    learned = reconstruct_series(NetworkPredictor(trained["model"]), seq, 10, pixel)
    linear = reconstruct_series(LinearPredictor(), seq, 10, pixel)
    elapsed = time.time() - t0
    criterion(
        10, "learned 1-step series RMSE below linear on a convective-ramp scene",
        learned.rmse < linear.rmse and elapsed < 300,
        f"learned {learned.rmse:.5f} < linear {linear.rmse:.5f}, {elapsed:.0f}s",
    )
