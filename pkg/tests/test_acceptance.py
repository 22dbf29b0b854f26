"""Acceptance suite: one test per criterion, each marked with its number.

Run ``pytest tests/test_acceptance.py`` for a PASS/FAIL line per criterion in
the terminal summary.
"""

import json
import shutil
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings

from oracles import balls, brute_edt, brute_signed_distance, naive_flood
from test_config import random_configs
from volseg.augment import tta_collapse, tta_expand
from volseg.cli import main
from volseg.config import PipelineConfig, dump_config, loads_config
from volseg.dataset import RejectionSampler, random_position
from volseg.decode import DecodeParams, bc_watershed, bcd_watershed, connected_components, priority_flood
from volseg.errors import PredictorTimeout, ProtocolError
from volseg.inference import merge_chunks, run_chunked_inference, run_sliding_inference
from volseg.metrics import MetricReport, aggregate, distance_transform, instance_ap
from volseg.predictors import IdentityPredictor, PointwisePredictor, SubprocessPredictor
from volseg.targets import encode_binary, encode_contour, encode_signed_distance
from volseg.volume import VoxelVolume, make_chunk_plan, write_volume

ECHO = [sys.executable, "-m", "volseg.echo_child"]
FAULTY = [sys.executable, str(Path(__file__).with_name("faulty_child.py"))]


def detail(record_property, text):
    record_property("detail", text)
    print(text)


@pytest.mark.criterion(1, "signed distance matches brute force")
def test_c01_signed_distance_oracle(record_property):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    done = 0
    while done < 200:
        shape = tuple(int(v) for v in rng.integers(1, 9, 3))
        labels = rng.integers(1, 4, shape).astype(np.uint32)
        labels[rng.random(shape) < rng.uniform(0.2, 0.8)] = 0
        if labels.all() or not labels.any():
            continue
        res = tuple(float(v) for v in rng.uniform(1.0, 40.0, 3))
        for clamp in (True, False):
            got = encode_signed_distance(labels, 8.0, 50.0, clamp, res)
            want = brute_signed_distance(labels, 8.0, 50.0, res, clamp)
            worst = max(worst, float(np.abs(got - want).max()))
        done += 1
    elapsed = time.perf_counter() - t0
    detail(record_property, f"200 volumes, max error {worst:.2e}, {elapsed:.1f} s")
    assert worst <= 1e-4
    assert elapsed < 10


@pytest.mark.criterion(2, "distance transform matches brute force")
def test_c02_distance_transform_oracle(record_property):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    line = np.zeros((1, 1, 3), bool)
    line[0, 0, 1] = True
    assert distance_transform(line, (40, 4, 4)).ravel().tolist() == [4, 0, 4]
    worst = 0.0
    done = 0
    while done < 200:
        shape = tuple(int(v) for v in rng.integers(1, 7, 3))
        mask = rng.random(shape) < rng.uniform(0.05, 0.5)
        if not mask.any():
            continue
        res = (40.0, 4.0, 4.0) if done % 2 == 0 else tuple(float(v) for v in rng.uniform(1.0, 50.0, 3))
        worst = max(worst, float(np.abs(distance_transform(mask, res) - brute_edt(mask, res)).max()))
        done += 1
    elapsed = time.perf_counter() - t0
    detail(record_property, f"200 masks, max error {worst:.2e} nm, {elapsed:.1f} s")
    assert worst <= 1e-3
    assert elapsed < 10


@pytest.mark.criterion(3, "identity predictor through cosine stitching reproduces the input")
def test_c03_stitching_identity(record_property):
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(10):
        shape = tuple(int(v) for v in rng.integers([6, 16, 16], [20, 40, 40]))
        x = rng.random(shape).astype(np.float32)
        window = (4, 8, 8)
        stride = tuple(int(v) for v in rng.integers(1, [4, 8, 8]))  # strictly smaller: windows overlap
        out = run_sliding_inference(x, IdentityPredictor(), window, stride, "cosine")
        worst = max(worst, float(np.abs(out[0] - x).max()))
    detail(record_property, f"10 volumes, max error {worst:.2e}")
    assert worst <= 1e-6


def squash(a):
    return 0.1 + 0.8 * a * a


@pytest.mark.criterion(4, "chunked inference equals whole-volume inference")
def test_c04_chunk_whole_equivalence(tmp_path, record_property):
    rng = np.random.default_rng(404)
    x = rng.random((64, 64, 64)).astype(np.float32)
    predictor = PointwisePredictor(squash)
    window, stride = (8, 16, 16), (4, 8, 8)
    plan = make_chunk_plan(x.shape, (32, 32, 32), (8, 8, 8))
    whole = run_sliding_inference(x, predictor, window, stride)

    def loader(box):
        return x[box.slices]

    merged = {}
    for workers in (1, 8):
        res = run_chunked_inference(plan, loader, predictor, tmp_path / f"w{workers}", window, stride,
                                    workers=workers)
        assert res.ok
        merged[workers] = merge_chunks(res.files, plan)
    d_whole = max(float(np.abs(merged[w] - whole).max()) for w in merged)
    d_par = float(np.abs(merged[1] - merged[8]).max())
    detail(record_property, f"{len(plan.chunks)} chunks, chunk/whole {d_whole:.2e}, serial/parallel {d_par:.2e}")
    assert d_whole <= 1e-5 and d_par <= 1e-5


@pytest.mark.criterion(5, "TTA: 16 variants, exact collapse, every variant an involution")
def test_c05_tta(record_property):
    rng = np.random.default_rng(505)
    x = rng.random((4, 12, 12)).astype(np.float32)
    pairs = tta_expand(x)
    collapsed = tta_collapse(pairs)
    non_involutions = [v.name for v, _ in pairs if not np.array_equal(v.apply(v.apply(x)), x)]
    detail(record_property, f"{len(pairs)} variants, collapse error {float(np.abs(collapsed - x).max()):.1e}, "
                            f"non-involutions: {non_involutions or 'none'}")
    assert len(pairs) == 16
    assert np.array_equal(collapsed, x)
    assert not non_involutions, f"variants that are not involutions: {non_involutions}"


SHAPE = (32, 48, 48)


def sphere_fixture(seed, touching):
    """Four spheres; with ``touching`` the first two share a face."""
    rng = np.random.default_rng(seed)
    spheres = []
    if touching:
        r = rng.uniform(6.0, 8.5)
        c1 = np.array([16, 24, 24]) + rng.integers(-3, 4, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        c2 = c1 + d * (2 * r - 1.0)
        spheres = [(tuple(c1 - d * (r - 0.5)), r), (tuple(c2 - d * (r - 0.5)), r)]
    while len(spheres) < 4:
        r = rng.uniform(5.0, 7.0)
        c = tuple(rng.uniform([r, r, r], np.array(SHAPE) - r))
        if all(np.linalg.norm(np.subtract(c, c0)) > r + r0 + 3 for c0, r0 in spheres):
            spheres.append((c, r))
    return balls(SHAPE, spheres)


def touching_faces(labels, a, b):
    ma, mb = labels == a, labels == b
    return sum(int((ma[tuple(sl_a)] & mb[tuple(sl_b)]).sum())
               for axis in range(3)
               for sl_a, sl_b in [([slice(None)] * axis + [slice(0, -1)], [slice(None)] * axis + [slice(1, None)]),
                                  ([slice(None)] * axis + [slice(1, None)], [slice(None)] * axis + [slice(0, -1)])])


@pytest.mark.criterion(6, "encode then decode recovers synthetic spheres (AP-75 = 1)")
def test_c06_encode_decode_round_trip(record_property):
    aps_bc, aps_bcd, resolved, touching_count = [], [], 0, 0
    for seed in range(24):
        touching = seed % 2 == 0
        gt = sphere_fixture(seed, touching)
        assert gt.max() == 4
        if touching:
            assert touching_faces(gt, 1, 2) > 0
            touching_count += 1
        mask, contour, dist = encode_binary(gt), encode_contour(gt), encode_signed_distance(gt)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            bc = bc_watershed(mask, contour)
            bcd = bcd_watershed(mask, contour, dist)
        aps_bc.append(instance_ap(bc, gt, (0.75,))[0][0.75])
        aps_bcd.append(instance_ap(bcd, gt, (0.75,))[0][0.75])
        if touching:
            no_contour = np.zeros_like(contour)
            merged = bc_watershed(mask, no_contour, DecodeParams(seed_threshold=0.5))
            split = bcd_watershed(mask, no_contour, dist, DecodeParams(distance_seed_threshold=0.5))
            if merged.max() < gt.max() and instance_ap(split, gt, (0.75,))[0][0.75] == 1.0:
                resolved += 1
    detail(record_property, f"24 fixtures ({touching_count} touching): min AP-75 BC {min(aps_bc)}, "
                            f"BCD {min(aps_bcd)}; BCD splits {resolved} pairs BC merges without contour")
    assert min(aps_bc) == 1.0 and min(aps_bcd) == 1.0
    assert resolved >= 1


@pytest.mark.criterion(7, "aggregate reproduces published overall scores")
def test_c07_metric_spot_checks(record_property):
    cremi = aggregate([MetricReport(f"v{i}", cremi=v) for i, v in enumerate([64.53, 73.51, 24.66])]).cremi
    ap = aggregate([MetricReport(f"v{i}", ap={0.75: v}) for i, v in enumerate([0.816, 0.804])]).ap[0.75]
    detail(record_property, f"CREMI {cremi:.4f}, AP-75 {ap:.4f}")
    assert abs(cremi - 54.23) <= 0.01
    assert abs(ap - 0.810) <= 0.001


@pytest.mark.criterion(8, "rejection sampling statistics")
def test_c08_rejection_statistics(record_property):
    sampler = RejectionSampler(np.zeros((8, 16, 16), np.uint32), (4, 8, 8), 0.95, max_attempts=10_000)
    attempts = np.array([sampler.draw(808, i).attempts for i in range(100_000)])
    mean = float(attempts.mean())

    labels = np.zeros((8, 32, 32), np.uint32)
    labels[2:6, 4:12, 4:12] = 1
    labels[3:5, 20:28, 18:30] = 2
    mixed = RejectionSampler(labels, (4, 8, 8), 0.95, max_attempts=10_000)
    first_fg, violations = 0, 0
    for i in range(5_000):
        first = random_position(808, i, labels.shape, (4, 8, 8))
        if labels[first.slices].any():
            first_fg += 1
            violations += mixed.draw(808, i).attempts != 1
    detail(record_property, f"all-background mean attempts {mean:.2f} (target 20 +/- 2); "
                            f"{first_fg} foreground first windows, {violations} rejected")
    assert abs(mean - 20.0) <= 2.0
    assert first_fg > 0 and violations == 0


def _cli_outputs(ws, command, workers, extra=()):
    out = ws / f"out_{command}_{workers}"
    code = main([command, "--opts", "OUTPUT_PATH", str(out), "SYSTEM.NUM_WORKERS", str(workers), *extra])
    assert code == 0
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and not p.name.startswith("manifest_")}


@settings(max_examples=1000, deadline=None, database=None)
@given(random_configs)
def _roundtrip(values):
    c = PipelineConfig({k: PipelineConfig().replace(**{k.replace(".", "__"): v})[k] for k, v in values.items()})
    assert loads_config(dump_config(c)) == c


@pytest.mark.criterion(9, "determinism of sample/encode and config round trip")
def test_c09_determinism(tmp_path, record_property):
    gt = balls((16, 32, 32), [((8, 9, 9), 6), ((8, 22, 22), 6), ((4, 25, 6), 3)])
    image = np.where(gt > 0, 190, 50).astype(np.uint8)
    write_volume(VoxelVolume(image, (40, 4, 4)), tmp_path / "image")
    write_volume(VoxelVolume(gt, (40, 4, 4)), tmp_path / "label")
    data = ["DATASET.IMAGE_PATH", f"[{tmp_path / 'image'}]", "DATASET.LABEL_PATH", f"[{tmp_path / 'label'}]",
            "DATASET.WINDOW_SIZE", "[4, 16, 16]", "DATASET.REJECT_PROB", "0.95", "SYSTEM.SEED", "9",
            "AUGMENTOR.GRAYSCALE.PROB", "1.0", "AUGMENTOR.MISALIGNMENT.PROB", "1.0",
            "MODEL.TARGET_OPT", "[binary, contour, signed_distance, affinity]"]
    runs = {}
    for workers in (1, 8, 1):
        for command, extra in (("sample", ["--count", "24"]), ("encode", [])):
            files = _cli_outputs(tmp_path, command, workers, [*data, *extra])
            runs.setdefault(command, []).append(files)
            shutil.rmtree(tmp_path / f"out_{command}_{workers}")
    identical = {cmd: all(r == outs[0] for r in outs) for cmd, outs in runs.items()}
    _roundtrip()
    detail(record_property, f"sample files {len(runs['sample'][0])}, encode files {len(runs['encode'][0])}, "
                            f"byte-identical across runs and 1/8 workers: {identical}; 1000 config round trips")
    assert len(runs["sample"][0]) == 24 * 4 and len(runs["encode"][0]) == 2
    assert all(identical.values())


@pytest.mark.criterion(10, "subprocess predictor protocol")
def test_c10_subprocess_protocol(record_property):
    rng = np.random.default_rng(1010)
    exact = 0
    with SubprocessPredictor(ECHO, channels=1, timeout=60) as p:
        for _ in range(100):
            shape = (1,) + tuple(int(v) for v in rng.integers(1, 17, 3))
            arr = rng.standard_normal(shape).astype(np.float32)
            exact += p.predict(arr).tobytes() == arr.tobytes()
    t0 = time.perf_counter()
    with SubprocessPredictor(FAULTY + ["truncate"], timeout=1.0) as p:
        with pytest.raises(ProtocolError) as truncated:
            p.predict(np.zeros((1, 4, 4, 4), np.float32))
    with SubprocessPredictor(FAULTY + ["silent"], timeout=1.0) as p:
        with pytest.raises(PredictorTimeout):
            p.predict(np.zeros((1, 4, 4, 4), np.float32))
    elapsed = time.perf_counter() - t0
    detail(record_property, f"{exact}/100 echoed bit-exactly; truncated reply -> {type(truncated.value).__name__}; "
                            f"error cases took {elapsed:.1f} s with 1 s timeout")
    assert exact == 100
    assert not isinstance(truncated.value, PredictorTimeout)
    assert elapsed < 10


@pytest.mark.criterion(11, "priority flood equals naive global-argmax flood")
def test_c11_watershed_oracle(record_property):
    rng = np.random.default_rng(1111)
    agree = 0
    for k in range(100):
        while True:
            shape = tuple(int(v) for v in rng.integers(1, 11, 3))
            if np.prod(shape) <= 1000:
                break
        levels = int(rng.choice([3, 10, 1000]))
        landscape = rng.integers(0, levels, shape) / levels
        region = rng.random(shape) < rng.uniform(0.5, 1.0)
        seeds, _ = connected_components(rng.random(shape) < 0.05, 6)
        connectivity = 6 if k % 2 else 26
        got = priority_flood(landscape, seeds, region, connectivity)
        agree += np.array_equal(got, naive_flood(landscape, seeds, region, connectivity))
    detail(record_property, f"{agree}/100 volumes identical")
    assert agree == 100
