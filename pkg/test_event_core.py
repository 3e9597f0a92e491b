import numpy as np
import pytest
from PIL import Image

from conftest import frame_from, random_frame, random_sequence
from event_core import (
    Event,
    EventFrame,
    FrameSequence,
    Geometry,
    bin_events,
    dump_frames,
    frame_event_count,
    inject_noise,
    inject_noise_sequence,
    read_aer,
    read_aer_geometry,
    sequence_to_events,
    write_aer,
    write_pgm,
)
from pipeline_errors import AerParseError, DimensionError, GeometryError, TimestampRangeError

GEOM = Geometry(8, 6)


def test_single_event_lands_in_its_cell():
    seq = bin_events([Event(3, 4, 10, 1)], 0, 100, GEOM)
    assert len(seq) == 1
    expected = np.zeros((6, 8), dtype=np.int8)
    expected[4, 3] = 1
    assert np.array_equal(seq[0].cells, expected)


def test_collision_takes_net_sign():
    events = [Event(3, 4, 10, 1), Event(3, 4, 20, -1), Event(3, 4, 30, -1)]
    assert bin_events(events, 0, 100, GEOM)[0].cells[4, 3] == -1


def test_tie_cancels_to_zero():
    events = [Event(1, 1, 5, 1), Event(1, 1, 6, -1)]
    assert bin_events(events, 0, 100, GEOM)[0].cells[1, 1] == 0


def test_empty_events_with_horizon_gives_zero_frames():
    seq = bin_events([], 0, 100, GEOM, t_end=300)
    assert len(seq) == 3
    assert all(frame_event_count(f) == 0 for f in seq)


def test_boundary_event_goes_to_later_bin():
    seq = bin_events([Event(0, 0, 100, 1)], 0, 100, GEOM)
    assert len(seq) == 2
    assert seq[0].cells[0, 0] == 0
    assert seq[1].cells[0, 0] == 1


def test_binning_is_permutation_invariant():
    rng = np.random.default_rng(5)
    events = [Event(int(rng.integers(8)), int(rng.integers(6)), int(rng.integers(1000)), int(rng.choice([1, -1])))
              for _ in range(300)]
    shuffled = [events[i] for i in rng.permutation(len(events))]
    a = bin_events(events, 0, 100, GEOM, t_end=1000)
    b = bin_events(shuffled, 0, 100, GEOM, t_end=1000)
    assert np.array_equal(a.as_array(), b.as_array())


def test_binning_matches_recount():
    rng = np.random.default_rng(11)
    events = [Event(int(rng.integers(8)), int(rng.integers(6)), int(rng.integers(500)), int(rng.choice([1, -1])))
              for _ in range(400)]
    cells = bin_events(events, 0, 100, GEOM, t_end=500).as_array()
    net = np.zeros((5, 6, 8), dtype=int)
    for e in events:
        net[e.t // 100, e.y, e.x] += e.p
    assert np.array_equal(cells, np.sign(net))


def test_binning_rejects_early_and_out_of_geometry_events():
    with pytest.raises(TimestampRangeError):
        bin_events([Event(0, 0, 5, 1)], 10, 100, GEOM)
    with pytest.raises(GeometryError):
        bin_events([Event(8, 0, 5, 1)], 0, 100, GEOM)
    with pytest.raises(TimestampRangeError):
        bin_events([Event(0, 0, 300, 1)], 0, 100, GEOM, t_end=300)


def test_sequence_to_events_bins_back():
    seq = random_sequence(2, 5, height=6, width=8)
    again = bin_events(sequence_to_events(seq), 0, seq.dt, seq.geometry, t_end=5 * seq.dt)
    assert np.array_equal(again.as_array(), seq.as_array())


def test_frame_rejects_non_ternary_cells():
    with pytest.raises(ValueError):
        EventFrame(np.array([[0, 2]]))


def test_sequence_checks_geometry_and_indices():
    a = EventFrame.zeros(Geometry(4, 4), 0)
    b = EventFrame.zeros(Geometry(5, 4), 1)
    with pytest.raises(DimensionError):
        FrameSequence((a, b), 10, Geometry(4, 4))
    with pytest.raises(ValueError):
        FrameSequence((a, a), 10, Geometry(4, 4))


def test_sequence_slice_is_reindexed():
    seq = random_sequence(0, 6)
    tail = seq[2:]
    assert [f.frame_index for f in tail] == [0, 1, 2, 3]
    assert np.array_equal(tail[0].cells, seq[2].cells)


def test_noise_level_zero_is_identity():
    frame = random_frame(np.random.default_rng(0), 10, 10)
    result = inject_noise(frame, 0.0, 1)
    assert result.frame == frame
    assert result.n_added == 0


def test_noise_adds_exact_count_without_flipping_events():
    cells = np.zeros((20, 20), dtype=np.int8)
    cells.ravel()[:100] = 1
    frame = frame_from(cells)
    result = inject_noise(frame, 0.5, 42)
    assert result.n_added == 50
    assert not result.saturated
    assert frame_event_count(result.frame) == 150
    original = frame.cells != 0
    assert np.array_equal(result.frame.cells[original], frame.cells[original])


def test_noise_count_uses_ceiling():
    cells = np.zeros((10, 10), dtype=np.int8)
    cells.ravel()[:30] = -1
    assert inject_noise(frame_from(cells), 0.1, 0).n_added == 3
    assert inject_noise(frame_from(cells), 0.11, 0).n_added == 4


def test_noise_saturates_on_full_frame():
    frame = frame_from(np.ones((4, 4), dtype=np.int8))
    result = inject_noise(frame, 0.1, 0)
    assert result.saturated
    assert result.n_added == 0
    assert result.frame == frame


def test_noise_is_deterministic_per_seed():
    frame = random_frame(np.random.default_rng(3), 16, 16)
    assert inject_noise(frame, 0.4, 9).frame == inject_noise(frame, 0.4, 9).frame
    seq = random_sequence(1, 4)
    a = inject_noise_sequence(seq, 0.3, 5)
    b = inject_noise_sequence(seq, 0.3, 5)
    assert np.array_equal(a.as_array(), b.as_array())


def test_aer_write_read_identity(tmp_path):
    rng = np.random.default_rng(0)
    geometry = Geometry(32, 24)
    events = [Event(int(rng.integers(32)), int(rng.integers(24)), int(rng.integers(10_000)), int(rng.choice([1, -1])))
              for _ in range(1000)]
    path = tmp_path / "seq.aer"
    write_aer(events, str(path), geometry)
    assert read_aer(str(path)) == events
    assert read_aer_geometry(str(path)) == geometry


def test_aer_line_parses(tmp_path):
    path = tmp_path / "one.aer"
    path.write_text("# aer v1 W=8 H=8\n# comment\n10,3,4,1\n")
    assert read_aer(str(path)) == [Event(x=3, y=4, t=10, p=1)]


@pytest.mark.parametrize(
    "line",
    [b"10,3,4,2", b"10,3,4,0", b"10,3,4", b"a,3,4,1", b"10,9,4,1",
     b"1_0,3,4,1", b"10,3,4,+1", b"10, 3,4,1", "1\u00e9,3,4,1".encode("utf-8")],
)
def test_aer_bad_line_reports_line_number(tmp_path, line):
    path = tmp_path / "bad.aer"
    path.write_bytes(b"# aer v1 W=8 H=8\n1,1,1,1\n" + line + b"\n")
    with pytest.raises(AerParseError) as err:
        read_aer(str(path))
    assert err.value.line_no == 3


def test_aer_requires_header(tmp_path):
    path = tmp_path / "noheader.aer"
    path.write_text("10,3,4,1\n")
    with pytest.raises(AerParseError) as err:
        read_aer(str(path))
    assert err.value.line_no == 1


@pytest.mark.parametrize("header", [b"# aer v1 W=+8 H=8", b"# aer v1 W=8 H=0", b"# aer v1 W=8 D=8", b"# aer v1 W=\xff H=8"])
def test_aer_bad_header_reports_first_line(tmp_path, header):
    path = tmp_path / "badheader.aer"
    path.write_bytes(header + b"\n1,1,1,1\n")
    with pytest.raises(AerParseError) as err:
        read_aer(str(path))
    assert err.value.line_no == 1
    with pytest.raises(AerParseError):
        read_aer_geometry(str(path))


def test_pgm_levels(tmp_path):
    frame = frame_from([[-1, 0], [1, 0]])
    path = tmp_path / "f.pgm"
    write_pgm(frame, str(path))
    assert path.read_bytes().startswith(b"P5")
    with Image.open(path) as img:
        assert np.array_equal(np.asarray(img), np.array([[0, 128], [255, 128]], dtype=np.uint8))


def test_dump_frames_names(tmp_path):
    seq = random_sequence(0, 3, height=4, width=4)
    paths = dump_frames(seq, str(tmp_path / "frames"), prefix="seq")
    assert [p.rsplit("/", 1)[-1] for p in paths] == ["seq_00000.pgm", "seq_00001.pgm", "seq_00002.pgm"]
