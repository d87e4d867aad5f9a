import random
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evkit.dataset import Annotation, ClassId, LabelFormatError, NormBox
from evkit.evaluation import (
    BenchmarkError,
    Detection,
    EvalConfig,
    EvaluationError,
    average_precision,
    evaluate,
    fps_bench,
    iou,
    iou_xyxy,
    match_detections,
    read_predictions,
    write_predictions,
)

from oracles import box_iou, greedy_matching_exhaustive, pr_area

CAR, PERSON = ClassId.CAR, ClassId.PERSON


def B(x0, y0, x1, y1):
    return NormBox.from_corners(x0, y0, x1, y1)


def D(cls, conf, *xyxy):
    return Detection(cls, conf, B(*xyxy))


def G(cls, *xyxy):
    return Annotation(cls, B(*xyxy))


# three images, two classes; expected AP: car 5/6, person 1/3
FIXTURE_GT = {
    "a": [G(CAR, 0.1, 0.1, 0.3, 0.3), G(CAR, 0.6, 0.6, 0.8, 0.8), G(PERSON, 0.4, 0.1, 0.5, 0.4)],
    "b": [G(CAR, 0.2, 0.5, 0.4, 0.7)],
    "c": [G(PERSON, 0.3, 0.3, 0.5, 0.7), G(PERSON, 0.6, 0.2, 0.7, 0.5)],
}
FIXTURE_PRED = {
    "a": [D(CAR, 0.9, 0.1, 0.1, 0.3, 0.3), D(CAR, 0.6, 0.62, 0.6, 0.82, 0.8), D(PERSON, 0.5, 0.7, 0.1, 0.8, 0.3)],
    "b": [D(CAR, 0.8, 0.5, 0.5, 0.6, 0.6), D(CAR, 0.3, 0.21, 0.5, 0.41, 0.7), D(PERSON, 0.7, 0.1, 0.1, 0.2, 0.3)],
    "c": [D(PERSON, 0.95, 0.3, 0.3, 0.5, 0.7), D(PERSON, 0.4, 0.31, 0.32, 0.5, 0.7), D(CAR, 0.1, 0.1, 0.1, 0.2, 0.2)],
}


def oracle_map(preds, gts, config):
    """Exhaustive per-image matching, pooled, area by interval search."""
    aps = []
    for cls in ClassId:
        ranked, n_gt = [], 0
        for image in sorted(gts):
            g = [(a.cls, a.box.corners) for a in gts[image]]
            n_gt += sum(1 for a in gts[image] if a.cls == cls)
            d = [x for x in preds.get(image, []) if x.confidence >= config.confidence_threshold]
            flags = greedy_matching_exhaustive([(x.cls, x.confidence, x.box.corners) for x in d], g, config.iou_threshold)
            ranked += [(x.confidence, image, i, f) for i, (x, f) in enumerate(zip(d, flags)) if x.cls == cls]
        ranked.sort(key=lambda e: (-e[0], e[1], e[2]))
        ap = pr_area([e[3] for e in ranked], n_gt)
        if ap is not None:
            aps.append(ap)
    return sum(aps) / len(aps) if aps else 0.0


def test_iou_examples():
    b = B(0.1, 0.1, 0.4, 0.5)
    assert iou(b, b) == 1.0
    assert iou(B(0, 0, 0.2, 0.2), B(0.5, 0.5, 0.7, 0.7)) == 0.0
    assert iou_xyxy((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)


def test_match_examples():
    gts = [G(CAR, 0.1, 0.1, 0.3, 0.3)]
    r = match_detections([], gts)
    assert (r.n_tp, r.n_fp, r.n_fn) == (0, 0, 1)
    r = match_detections([D(CAR, 0.5, 0.1, 0.1, 0.3, 0.3)], gts)
    assert (r.n_tp, r.n_fp, r.n_fn) == (1, 0, 0)
    r = match_detections([D(CAR, 0.8, 0.11, 0.1, 0.31, 0.3), D(CAR, 0.9, 0.12, 0.1, 0.32, 0.3)], gts, 0.5)
    assert r.tp == [False, True]
    # class must agree
    assert match_detections([D(PERSON, 0.9, 0.1, 0.1, 0.3, 0.3)], gts).tp == [False]


def random_box(rng):
    x0, y0 = rng.uniform(0, 0.7), rng.uniform(0, 0.7)
    return B(x0, y0, x0 + rng.uniform(0.05, 0.3), y0 + rng.uniform(0.05, 0.3))


def test_match_agrees_with_exhaustive_search():
    rng = random.Random(0)
    for _ in range(400):
        dets = [Detection(rng.choice([0, 1]), rng.random(), random_box(rng)) for _ in range(rng.randint(0, 5))]
        gts = [Annotation(rng.choice([0, 1]), random_box(rng)) for _ in range(rng.randint(0, 5))]
        thr = rng.choice([0.1, 0.2, 0.5])
        got = match_detections(dets, gts, thr).tp
        want = greedy_matching_exhaustive(
            [(d.cls, d.confidence, d.box.corners) for d in dets], [(g.cls, g.box.corners) for g in gts], thr
        )
        assert got == want


def test_ap_hand_cases():
    assert average_precision([True], 1) == 1.0
    assert average_precision([False], 1) == 0.0
    assert average_precision([True, False, True], 3) == pytest.approx(5 / 9, abs=1e-12)
    assert average_precision([], 0) is None
    assert average_precision([], 4) == 0.0


def test_ap_eleven_point():
    # envelope 1.0 up to recall 1/3, 2/3 up to recall 2/3, nothing beyond
    assert average_precision([True, False, True], 3, "11_point") == pytest.approx((4 * 1.0 + 3 * 2 / 3) / 11)


flag_lists = st.lists(st.booleans(), max_size=40)


@given(flag_lists, st.integers(0, 10))
@settings(max_examples=200)
def test_ap_matches_pr_area_oracle(flags, extra):
    n_gt = sum(flags) + extra
    got, want = average_precision(flags, n_gt), pr_area(flags, n_gt)
    if want is None:
        assert got is None
    else:
        assert got == pytest.approx(want, abs=1e-12)
        assert 0.0 <= got <= 1.0


@given(flag_lists, st.integers(1, 10))
def test_trailing_false_positive_never_helps(flags, extra):
    n_gt = sum(flags) + extra
    assert average_precision(flags + [False], n_gt) <= average_precision(flags, n_gt) + 1e-15


def test_evaluate_fixture():
    report = evaluate(FIXTURE_PRED, FIXTURE_GT, EvalConfig(0.2, 0.2))
    assert report.per_class[CAR].ap == pytest.approx(5 / 6, abs=1e-12)
    assert report.per_class[PERSON].ap == pytest.approx(1 / 3, abs=1e-12)
    assert report.per_class[ClassId.POLE].ap is None
    assert report.mAP == pytest.approx(7 / 12, abs=1e-12)
    assert report.mAP == pytest.approx(oracle_map(FIXTURE_PRED, FIXTURE_GT, EvalConfig(0.2, 0.2)), abs=1e-9)
    car = report.per_class[CAR]
    assert (car.tp, car.fp, car.fn, car.n_gt) == (3, 1, 0, 3)


def test_evaluate_perfect_and_empty():
    perfect = {k: [Detection(a.cls, 1.0, a.box) for a in v] for k, v in FIXTURE_GT.items()}
    for thr in (0.01, 0.2, 0.5, 1.0):
        assert evaluate(perfect, FIXTURE_GT, EvalConfig(thr, 0.2)).mAP == 1.0
    assert evaluate({}, FIXTURE_GT).mAP == 0.0


def test_evaluate_errors():
    with pytest.raises(EvaluationError, match="unknown image"):
        evaluate({"zz": []}, FIXTURE_GT)
    with pytest.raises(EvaluationError, match="malformed"):
        evaluate({"a": [("car", 0.5)]}, FIXTURE_GT)


def random_instance(rng, n_images=6):
    gts, preds = {}, {}
    for i in range(n_images):
        gts[f"im{i}"] = [Annotation(rng.choice([0, 1, 3]), random_box(rng)) for _ in range(rng.randint(0, 4))]
        dets = []
        for g in gts[f"im{i}"]:
            if rng.random() < 0.7:
                x0, y0, x1, y1 = g.box.corners
                j = rng.uniform(-0.03, 0.03)
                dets.append(Detection(g.cls, round(rng.random(), 2), B(x0 + j, y0 + j, x1 + j, y1)))
        dets += [Detection(rng.choice([0, 1, 3]), round(rng.random(), 2), random_box(rng)) for _ in range(rng.randint(0, 3))]
        preds[f"im{i}"] = dets
    return preds, gts


def test_evaluate_matches_oracle_on_random_instances():
    rng = random.Random(4)
    for _ in range(60):
        preds, gts = random_instance(rng)
        cfg = EvalConfig(rng.choice([0.2, 0.5]), rng.choice([0.0, 0.2]))
        assert evaluate(preds, gts, cfg).mAP == pytest.approx(oracle_map(preds, gts, cfg), abs=1e-9)


def test_evaluate_order_free():
    rng = random.Random(9)
    preds, gts = random_instance(rng, 10)
    base = evaluate(preds, gts).to_json()
    keys = list(gts)
    for _ in range(5):
        rng.shuffle(keys)
        assert evaluate({k: preds[k] for k in reversed(keys)}, {k: gts[k] for k in keys}).to_json() == base


def test_ap_invariant_to_monotone_rescaling():
    rng = random.Random(2)
    preds, gts = random_instance(rng, 8)
    rescaled = {k: [Detection(d.cls, d.confidence**3, d.box) for d in v] for k, v in preds.items()}
    cfg = EvalConfig(0.5, 0.0)
    assert evaluate(rescaled, gts, cfg).mAP == evaluate(preds, gts, cfg).mAP


def test_report_outputs():
    report = evaluate(FIXTURE_PRED, FIXTURE_GT)
    import json

    d = json.loads(report.to_json(include_pr=True))
    assert d["schema_version"] == 1 and d["mode"] == "SMT"
    assert d["config"]["iou_threshold"] == 0.2 and d["config"]["confidence_threshold"] == 0.2
    assert d["classes"]["car"]["pr_points"][0] == [pytest.approx(1 / 3), 1.0]
    assert "mAP@0.2" in report.table()
    assert report.pr_csv().splitlines()[0] == "class,rank,recall,precision"


def test_prediction_files(tmp_path):
    write_predictions(FIXTURE_PRED, tmp_path)
    back = read_predictions(tmp_path)
    assert sorted(back) == ["a", "b", "c"]
    for k, v in FIXTURE_PRED.items():
        for d0, d1 in zip(v, back[k]):
            assert d0.cls == d1.cls and abs(d0.confidence - d1.confidence) <= 1e-6
            assert np.allclose(d0.box.corners, d1.box.corners, atol=1e-6)
    (tmp_path / "x.txt").write_text("")
    assert read_predictions(tmp_path)["x"] == []
    (tmp_path / "y.txt").write_text("1 1.5 0.5 0.5 0.1 0.1\n")
    with pytest.raises(LabelFormatError, match="confidence"):
        read_predictions(tmp_path)
    (tmp_path / "y.txt").write_text("1 0.5 0.5 0.5 0.1\n")
    with pytest.raises(LabelFormatError, match=r"y\.txt:1"):
        read_predictions(tmp_path)


def test_fps_bench_sleep_stub():
    stats = fps_bench(lambda f: time.sleep(0.01), list(range(25)), warmup=3)
    assert stats.n_frames == 22
    assert 90 <= stats.fps <= 110
    assert stats.p50_latency_s <= stats.p99_latency_s


def test_fps_bench_extra_delay_never_faster():
    ticks = iter(range(10**6))
    clock = lambda: next(ticks) * 1e-3  # noqa: E731
    fast = fps_bench(lambda f: None, list(range(10)), 0, clock=clock)
    slow = fps_bench(lambda f: clock(), list(range(10)), 0, clock=clock)
    assert slow.fps <= fast.fps


def test_fps_bench_errors():
    with pytest.raises(ValueError):
        fps_bench(lambda f: None, [1, 2], warmup=2)

    def bad(f):
        if f == 3:
            raise RuntimeError("boom")

    with pytest.raises(BenchmarkError) as exc:
        fps_bench(bad, list(range(6)), warmup=1)
    assert exc.value.frame_index == 3
