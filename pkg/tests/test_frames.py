import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from evkit.events import EventStream, slice_events
from evkit.frames import (
    FrameMode,
    accumulate,
    export_counts,
    frame_sequence,
    import_counts,
    overlay_boxes,
    render_png,
    total_counts,
    tri_level_from_counts,
    window_starts,
)
from evkit.dataset import Annotation, ClassId, NormBox


def ev(width, height, rows):
    return EventStream.from_events(width, height, rows)


@st.composite
def sorted_streams(draw):
    n = draw(st.integers(0, 300))
    ts = sorted(draw(st.lists(st.integers(0, 50_000), min_size=n, max_size=n)))
    xs = draw(st.lists(st.integers(0, 7), min_size=n, max_size=n))
    ys = draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    ps = draw(st.lists(st.sampled_from([1, -1]), min_size=n, max_size=n))
    return EventStream.from_events(8, 6, zip(ts, xs, ys, ps))


def test_empty_window_is_background():
    s = EventStream.empty(5, 4)
    tri = accumulate(s, 0, 100, FrameMode.TRI_LEVEL)
    assert np.all(tri.payload == 128) and tri.is_background()
    cnt = accumulate(s, 0, 100, FrameMode.COUNT_2CH)
    assert not cnt.counts.any()


def test_single_on_event():
    s = ev(8, 8, [(10, 3, 4, 1)])
    tri = accumulate(s, 0, 100, "tri")
    assert tri.payload[4, 3] == 255
    assert np.count_nonzero(tri.payload != 128) == 1
    cnt = accumulate(s, 0, 100, "count")
    assert tuple(cnt.counts[:, 4, 3]) == (1, 0)


def test_majority_rule():
    s = ev(4, 4, [(1, 1, 1, 1), (2, 1, 1, 1), (3, 1, 1, -1), (4, 1, 1, -1), (5, 1, 1, -1)])
    assert tuple(accumulate(s, 0, 10, "count").counts[:, 1, 1]) == (2, 3)
    assert accumulate(s, 0, 10, "tri").payload[1, 1] == 0


def test_tie_goes_to_last_event():
    s = ev(4, 4, [(1, 0, 0, 1), (2, 0, 0, -1), (3, 2, 2, -1), (4, 2, 2, 1)])
    tri = accumulate(s, 0, 10, "tri").payload
    assert tri[0, 0] == 0 and tri[2, 2] == 255


def test_invalid_window():
    with pytest.raises(ValueError):
        accumulate(EventStream.empty(2, 2), 5, 1)
    with pytest.raises(ValueError):
        frame_sequence(EventStream.empty(2, 2), 0, 1)
    with pytest.raises(ValueError):
        frame_sequence(EventStream.empty(2, 2), 10, -1)


def test_sequence_of_empty_stream():
    assert frame_sequence(EventStream.empty(4, 4), 10, 10) == []


def test_overlapping_window_count():
    s = ev(4, 4, [(0, 0, 0, 1), (99_999, 1, 1, -1)])
    frames = frame_sequence(s, 10_000, 5_000)
    # k * 5 + 10 <= 100 ms gives k = 0..18
    assert len(frames) == 19
    assert frames[-1].window == (90_000, 100_000)
    assert window_starts(0, 100_000, 10_000, 5_000) == [5_000 * k for k in range(19)]


def test_partial_window_kept_or_dropped():
    assert window_starts(0, 25, 10, 10) == [0, 10, 20]
    assert window_starts(0, 25, 10, 10, drop_partial=True) == [0, 10]
    assert window_starts(0, 5, 10, 10) == [0]


@given(sorted_streams(), st.integers(1, 20_000), st.sampled_from(list(FrameMode)))
@settings(max_examples=60, deadline=None)
def test_tiling_conserves_events(s, window, mode):
    frames = frame_sequence(s, window, window, FrameMode.COUNT_2CH)
    assert total_counts(frames) == len(s)
    # TRI_LEVEL frames are the count frames' majority image
    for f in frames:
        tri = accumulate(s, *f.window, FrameMode.TRI_LEVEL)
        assert np.array_equal(tri.payload, tri_level_from_counts(f.counts, f.last_polarity))
        assert np.array_equal(f.to_tri_level().payload, tri.payload)
        assert set(np.unique(tri.payload)) <= {0, 128, 255}


@given(sorted_streams(), st.integers(0, 50_000), st.integers(0, 50_000))
@settings(max_examples=60, deadline=None)
def test_accumulate_equals_accumulate_of_slice(s, a, b):
    t0, t1 = sorted((a, b))
    full = accumulate(s, t0, t1, FrameMode.COUNT_2CH)
    part = accumulate(slice_events(s, t0, t1), t0, t1, FrameMode.COUNT_2CH)
    assert np.array_equal(full.counts, part.counts)
    assert np.array_equal(full.last_polarity, part.last_polarity)


def test_render_background(tmp_path):
    f = accumulate(EventStream.empty(6, 3), 0, 1)
    render_png(f, tmp_path / "a.png")
    img = np.asarray(Image.open(tmp_path / "a.png"))
    assert img.shape == (3, 6) and np.all(img == 128)


def test_render_roundtrip_4x4(tmp_path):
    f = accumulate(ev(4, 4, [(1, 2, 1, 1)]), 0, 5, FrameMode.COUNT_2CH)
    render_png(f, tmp_path / "a.png")
    img = np.asarray(Image.open(tmp_path / "a.png"))
    expected = np.full((4, 4), 128, np.uint8)
    expected[1, 2] = 255
    assert np.array_equal(img, expected)


def test_overlay_without_boxes_matches_render(tmp_path):
    f = accumulate(ev(16, 16, [(1, 2, 1, 1), (2, 9, 9, -1)]), 0, 5)
    render_png(f, tmp_path / "a.png")
    overlay_boxes(f, [], tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_overlay_draws_boxes(tmp_path):
    f = accumulate(EventStream.empty(32, 32), 0, 5)
    boxes = [Annotation(ClassId.CAR, NormBox(0.5, 0.5, 0.5, 0.5))]
    overlay_boxes(f, boxes, tmp_path / "o.png", class_names=["person", "car", "pole", "other"])
    img = np.asarray(Image.open(tmp_path / "o.png"))
    assert img.ndim == 3
    assert tuple(img[16, 8]) != (128, 128, 128)


def test_count_export(tmp_path):
    f = accumulate(ev(3, 2, [(1, 0, 0, 1), (2, 2, 1, -1), (3, 2, 1, -1)]), 0, 10, FrameMode.COUNT_2CH)
    sidecar = export_counts(f, tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    assert len(raw) == 2 * 2 * 3 * 2
    planes = np.frombuffer(raw, dtype="<u2").reshape(2, 2, 3)
    assert planes[0, 0, 0] == 1 and planes[1, 1, 2] == 2
    meta = json.loads(sidecar.read_text())
    assert meta["width"] == 3 and meta["height"] == 2 and meta["window"] == [0, 10]
    assert np.array_equal(import_counts(tmp_path / "c.bin").counts, f.counts)
