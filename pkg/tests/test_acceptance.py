"""Acceptance criteria for the whole system, one test per criterion.

Each test prints a single PASS/FAIL line; thresholds are fixed here and not
tunable. Expensive artifacts (profiles, evaluation sweeps, the dynamic run)
are built once per module and shared.
"""
import json
import math
import time

import numpy as np
import pytest

from procamsim.calibration import interpolate, sweep_calibrate
from procamsim.cli import main
from procamsim.config import default_config_document
from procamsim.geometry import Pose, project_many, rotation_from_axis_angle
from procamsim.imaging import checker_pattern, psnr, render_capture
from procamsim.optics import (
    blur_radius,
    convolve,
    focus_distance,
    intrinsics_at_power,
    make_disk_psf,
    power_for_current,
    power_for_focus,
    wiener_precompensate,
)
from procamsim.pipeline import (
    ControllerState,
    DpmSetup,
    EvalSetup,
    autofocus_step,
    run_alignment_eval,
    run_dpm,
    timing_summary,
    zone_transitions,
)
from procamsim.scene import (
    Trajectory,
    default_scene_document,
    marker_corners_3d,
    zone_color,
)
from procamsim.vision import NoiseModel, detect_markers, oracle_detect
from tests.conftest import DEVICE_WH, STATIONS, frontal_pose

SEED = 1234


def _report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture(scope="module")
def noisy_profile(calib_board, etl, base_intr):
    return sweep_calibrate(
        calib_board, etl, base_intr, DEVICE_WH, STATIONS,
        detector="oracle", noise=NoiseModel(sigma0=0.1, eta=0.0), seed=SEED,
    )


@pytest.fixture(scope="module")
def eval_results(eval_board, etl, base_intr, clean_profile):
    setup = EvalSetup(
        board=eval_board, etl=etl, base_intrinsics=base_intr,
        profile=clean_profile, device_wh=DEVICE_WH, stations=STATIONS,
        detector="image", seed=SEED,
    )
    t0 = time.perf_counter()
    adaptive = run_alignment_eval(setup, "adaptive")
    fixed = run_alignment_eval(setup, "fixed", fixed_at_mm=150.0)
    elapsed = time.perf_counter() - t0
    return adaptive, fixed, elapsed


@pytest.fixture(scope="module")
def dpm_trajectory():
    return Trajectory((
        (0.0, Pose(np.eye(3), np.array([0.0, 0.0, 70.0]))),
        (2.0, Pose(np.eye(3), np.array([0.0, 0.0, 250.0]))),
    ))


@pytest.fixture(scope="module")
def dpm_records(prism, etl, base_intr, clean_profile, dpm_trajectory):
    setup = DpmSetup(
        prism=prism, etl=etl, base_intrinsics=base_intr, profile=clean_profile,
        device_wh=DEVICE_WH, detector="image", seed=SEED, frames=60,
    )
    return run_dpm(setup, dpm_trajectory)[0]


def test_criterion_1_calibration_oracle_equivalence(calib_board, etl, base_intr):
    t0 = time.perf_counter()
    profile = sweep_calibrate(
        calib_board, etl, base_intr, DEVICE_WH, STATIONS,
        detector="oracle", noise=NoiseModel(0.0, 0.0), seed=SEED,
    )
    elapsed = time.perf_counter() - t0
    worst_rel = 0.0
    worst_abs = 0.0
    for entry in profile.entries:
        truth = intrinsics_at_power(etl, base_intr, entry.power_d)
        for name in ("fx", "fy", "cx", "cy"):
            rel = abs(getattr(entry.intrinsics, name) - getattr(truth, name)) / abs(getattr(truth, name))
            worst_rel = max(worst_rel, rel)
        worst_abs = max(worst_abs, abs(entry.intrinsics.k1 - truth.k1),
                        abs(entry.intrinsics.k2 - truth.k2))
    ok = worst_rel < 1e-3 and worst_abs < 1e-3 and elapsed < 60.0
    _report(1, ok, f"worst rel {worst_rel:.2e}, worst |k| err {worst_abs:.2e}, "
                   f"{elapsed:.1f} s (< 60 s)")
    assert worst_rel < 1e-3
    assert worst_abs < 1e-3
    assert elapsed < 60.0


def test_criterion_2_interpolation_fidelity(clean_profile, noisy_profile, etl, base_intr):
    def max_fx_err(profile):
        worst = 0.0
        for power in np.linspace(profile.power_min, profile.power_max, 50):
            interp, _ = interpolate(profile, power)
            truth = intrinsics_at_power(etl, base_intr, power)
            worst = max(worst, abs(interp.fx - truth.fx) / truth.fx)
        return worst

    clean_err = max_fx_err(clean_profile)
    noisy_err = max_fx_err(noisy_profile)
    ok = clean_err < 0.003 and noisy_err < 0.008
    _report(2, ok, f"fx deviation noiseless {100 * clean_err:.4f}% (< 0.3%), "
                   f"noisy {100 * noisy_err:.4f}% (< 0.8%)")
    assert clean_err < 0.003
    assert noisy_err < 0.008


def test_criterion_3_alignment_adaptive_vs_fixed(eval_results):
    adaptive, fixed, elapsed = eval_results
    worst_adaptive = max(r.mean_mm for r in adaptive)
    by_dist_a = {r.distance_mm: r for r in adaptive}
    by_dist_f = {r.distance_mm: r for r in fixed}
    at150 = abs(by_dist_f[150.0].mean_mm - by_dist_a[150.0].mean_mm) <= 0.2 * by_dist_a[150.0].mean_mm
    ratio_70 = by_dist_f[70.0].mean_mm / by_dist_a[70.0].mean_mm
    ratio_250 = by_dist_f[250.0].mean_mm / by_dist_a[250.0].mean_mm
    ok = (worst_adaptive < 0.5 and at150 and ratio_70 >= 3.0 and ratio_250 >= 3.0
          and elapsed < 300.0)
    _report(3, ok, f"adaptive max {worst_adaptive:.3f} mm (< 0.5), fixed@150 within 20%: {at150}, "
                   f"fixed/adaptive 70 mm {ratio_70:.1f}x, 250 mm {ratio_250:.1f}x (>= 3), "
                   f"{elapsed:.0f} s (< 300 s)")
    assert worst_adaptive < 0.5
    assert at150
    assert ratio_70 >= 3.0
    assert ratio_250 >= 3.0
    assert elapsed < 300.0


def test_criterion_4_fixed_mode_defocus_at_70(eval_results):
    adaptive, fixed, _ = eval_results
    blur_fixed = next(r.blur_ir_px for r in fixed if r.distance_mm == 70.0)
    blur_adaptive = next(r.blur_ir_px for r in adaptive if r.distance_mm == 70.0)
    ok = blur_fixed >= 5.0 and blur_adaptive <= 1.5
    _report(4, ok, f"steady IR blur at 70 mm: fixed {blur_fixed:.2f} px (>= 5), "
                   f"adaptive {blur_adaptive:.2f} px (<= 1.5)")
    assert blur_fixed >= 5.0
    assert blur_adaptive <= 1.5


def test_criterion_5_zone_rule(dpm_records):
    assert zone_color(129.9999) == "blue" and zone_color(130.0) == "green"
    assert zone_color(189.9999) == "green" and zone_color(190.0) == "yellow"
    transitions = zone_transitions(dpm_records)
    # true distance crosses 130 mm entering frame 20 and 190 mm entering frame 40
    true_crossings = []
    for threshold in (130.0, 190.0):
        true_crossings.append(
            next(r.frame_index for r in dpm_records if r.true_distance_mm >= threshold)
        )
    ok = (len(transitions) == 2
          and abs(transitions[0] - true_crossings[0]) <= 1
          and abs(transitions[1] - true_crossings[1]) <= 1)
    _report(5, ok, f"boundaries at 130/190 mm exact; transitions {transitions} vs "
                   f"true crossings {true_crossings} (within +-1 frame)")
    assert len(transitions) == 2
    assert abs(transitions[0] - true_crossings[0]) <= 1
    assert abs(transitions[1] - true_crossings[1]) <= 1


def test_criterion_6_autofocus_convergence(eval_board, etl, base_intr, clean_profile):
    worst_err = 0.0
    worst_blur = 0.0
    for z in STATIONS:
        pose_true = frontal_pose(z)
        state = ControllerState.initial(clean_profile, etl)
        for _ in range(3):
            power = power_for_current(etl, state.drive_current)
            intr_true = intrinsics_at_power(etl, base_intr, power)
            dets = oracle_detect(eval_board, pose_true, intr_true, 0.0,
                                 NoiseModel(0.0, 0.0), 0)
            state, _ = autofocus_step(state, None, clean_profile, eval_board, etl,
                                      detections=dets)
        power = power_for_current(etl, state.drive_current)
        worst_err = max(worst_err, abs(focus_distance(etl, power) - z))
        worst_blur = max(worst_blur, blur_radius(etl, z, power))
    ok = worst_err < 0.5 and worst_blur < 0.5
    _report(6, ok, f"after 3 steps: worst focus error {worst_err:.4f} mm (< 0.5), "
                   f"worst IR blur {worst_blur:.4f} px (< 0.5)")
    assert worst_err < 0.5
    assert worst_blur < 0.5


def test_criterion_7_wiener_benefit():
    pattern = checker_pattern(256, 256)
    worst_gain = math.inf
    for radius in (1.0, 2.0):
        psf = make_disk_psf(radius)
        blurred = convolve(pattern, psf)
        compensated = convolve(wiener_precompensate(pattern, psf, nsr=0.01), psf)
        worst_gain = min(worst_gain, psnr(compensated, pattern) - psnr(blurred, pattern))
    ok = worst_gain >= 3.0
    _report(7, ok, f"precompensation PSNR gain {worst_gain:.2f} dB (>= 3) "
                   f"for radii 1-2 px at nsr 0.01")
    assert worst_gain >= 3.0


def test_criterion_8_detector_quality(eval_board, etl, base_intr):
    rng = np.random.default_rng(SEED)
    detected = 0
    total = 0
    worst_rms = 0.0
    while total < 50:
        z = rng.uniform(90.0, 240.0)
        tilt = rng.uniform(0.0, math.radians(32.0))
        axis_dir = rng.uniform(0.0, 2.0 * math.pi)
        axis = np.array([math.cos(axis_dir), math.sin(axis_dir), 0.0])
        rot = rotation_from_axis_angle(axis * tilt) @ rotation_from_axis_angle(
            np.array([0.0, 0.0, rng.uniform(0.0, 2.0 * math.pi)])
        )
        pose = Pose(rot, np.array([rng.uniform(-10, 10), rng.uniform(-10, 10), z]))
        power, _ = power_for_focus(etl, z)
        intr = intrinsics_at_power(etl, base_intr, power)
        truth, valid = project_many(intr, pose, marker_corners_3d(eval_board, 0))
        if not valid.all() or truth.min() < 30 or truth.max() > 482:
            continue
        total += 1
        cap = render_capture(eval_board, pose, etl, base_intr, power, DEVICE_WH,
                             seed=total)
        dets = detect_markers(cap)
        if len(dets) == 1 and dets[0].marker_id == 0:
            detected += 1
            err = np.linalg.norm(dets[0].corners - truth, axis=1)
            worst_rms = max(worst_rms, float(np.sqrt((err ** 2).mean())))

    # blur monotonicity at a fixed pose, averaged over renders
    pose = frontal_pose(70.0)
    intr = intrinsics_at_power(etl, base_intr, 0.0)
    truth, _ = project_many(intr, pose, marker_corners_3d(eval_board, 0))
    means = []
    for blur in (0.0, 2.0, 4.0, 8.0):
        errs = []
        for seed in range(3):
            cap = render_capture(eval_board, pose, etl, base_intr, 0.0, DEVICE_WH,
                                 seed=seed, defocus_blur_px=blur)
            dets = detect_markers(cap)
            assert dets, f"detection lost at blur {blur}"
            err = np.linalg.norm(dets[0].corners - truth, axis=1)
            errs.append(np.sqrt((err ** 2).mean()))
        means.append(float(np.mean(errs)))
    monotone = all(b >= a for a, b in zip(means, means[1:]))
    ok = detected == total == 50 and worst_rms <= 0.15 and monotone
    _report(8, ok, f"detected {detected}/{total}, worst corner RMS {worst_rms:.3f} px "
                   f"(<= 0.15), blur-sweep RMS {['%.3f' % m for m in means]} monotone: {monotone}")
    assert detected == total == 50
    assert worst_rms <= 0.15
    assert monotone


def test_criterion_9_dpm_determinism(tmp_path):
    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps(default_scene_document()))
    doc = default_config_document(str(scene))
    doc["dpm_frames"] = 12
    config = tmp_path / "config.json"
    config.write_text(json.dumps(doc))
    traj = tmp_path / "traj.json"
    traj.write_text(json.dumps({
        "keyframes": [
            {"t": 0.0, "translation": [0.0, 0.0, 70.0]},
            {"t": 2.0, "translation": [0.0, 0.0, 250.0]},
        ]
    }))
    profile = tmp_path / "profile.json"
    calib_doc = dict(doc)
    calib_doc["detector"] = "oracle"
    calib_config = tmp_path / "calib_config.json"
    calib_config.write_text(json.dumps(calib_doc))
    assert main(["calibrate", "--config", str(calib_config), "--out", str(profile)]) == 0

    outputs = []
    for run in ("run_a", "run_b"):
        out_dir = tmp_path / run
        code = main(["dpm", "--config", str(config), "--profile", str(profile),
                     "--trajectory", str(traj), "--out-dir", str(out_dir)])
        assert code == 0
        outputs.append((out_dir / "metrics.csv").read_bytes())
    ok = outputs[0] == outputs[1]
    _report(9, ok, f"two cmd_dpm runs, metrics.csv byte-identical: {ok} "
                   f"({len(outputs[0])} bytes)")
    assert ok


def test_criterion_10_timing_report(dpm_records):
    summary = timing_summary(dpm_records)
    total = sum(summary.values())
    detail = ", ".join(f"{k} {v:.0f} ms" for k, v in summary.items())
    soft_ok = total <= 1000.0
    note = "" if soft_ok else " [warning: exceeds 1 s/frame soft ceiling]"
    _report(10, True, f"per-frame stages: {detail}; total {total:.0f} ms{note}")
    assert summary  # report must exist; the ceiling is a warning, not a failure


def test_dpm_oracle_mode_matches_image_mode_transitions(
    prism, etl, base_intr, clean_profile, dpm_trajectory, dpm_records
):
    setup = DpmSetup(
        prism=prism, etl=etl, base_intrinsics=base_intr, profile=clean_profile,
        device_wh=DEVICE_WH, detector="oracle", seed=SEED, frames=60,
    )
    oracle_records, _ = run_dpm(setup, dpm_trajectory)
    image_transitions = zone_transitions(dpm_records)
    oracle_transitions = zone_transitions(oracle_records)
    assert len(oracle_transitions) == len(image_transitions) == 2
    for a, b in zip(image_transitions, oracle_transitions):
        assert abs(a - b) <= 1
