import struct
from dataclasses import replace

import numpy as np
import pytest

from config import SynthSpec
from errors import DatasetFormatError, DomainError
from synth import (
    DATASET_MAGIC,
    HEADER_BYTES,
    SequenceDataset,
    VideoSequence,
    class_balance,
    class_glyph,
    distractor_choices,
    distractor_path,
    generate_sample,
    generate_split,
    read_dataset,
    render_trace,
    shuffle_outside_window,
    split_indices,
    write_dataset,
)
from tensor import RngStream


def test_sample_is_a_pure_function_of_its_key(tiny_spec):
    a = generate_sample(tiny_spec, 2, 17)
    b = generate_sample(tiny_spec, 2, 17)
    c = generate_sample(tiny_spec, 2, 18)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.window == b.window
    assert not np.array_equal(a.frames, c.frames)


def test_sample_layout_and_window_bounds(tiny_spec):
    for index in range(20):
        s = generate_sample(tiny_spec, index % 3, index)
        assert s.frames.shape == (4, 1, 16, 16)
        assert s.frames.dtype == np.float32
        assert s.frames.min() >= 0.0 and s.frames.max() <= 1.0
        length = s.end - s.start
        assert tiny_spec.window_min <= length <= tiny_spec.window_max
        assert 0 <= s.start and s.end <= tiny_spec.frames


def test_invalid_class_or_index_is_a_domain_error(tiny_spec):
    with pytest.raises(DomainError):
        generate_sample(tiny_spec, 3, 0)
    with pytest.raises(DomainError):
        generate_sample(tiny_spec, 0, -1)


def test_parallel_generation_matches_serial(tiny_spec):
    serial = generate_split(tiny_spec, "test", workers=1)
    parallel = generate_split(tiny_spec, "test", workers=3)
    np.testing.assert_array_equal(serial.frames, parallel.frames)
    np.testing.assert_array_equal(serial.labels, parallel.labels)
    np.testing.assert_array_equal(serial.windows, parallel.windows)


def test_splits_are_class_balanced_and_disjoint(tiny_spec, tiny_train_set):
    np.testing.assert_array_equal(class_balance(tiny_train_set), [4, 4, 4])
    train_keys = set(split_indices(tiny_spec, "train"))
    test_keys = set(split_indices(tiny_spec, "test"))
    assert not train_keys & test_keys
    with pytest.raises(DomainError):
        split_indices(tiny_spec, "val")


def test_class_balance_of_a_sample_list(tiny_spec):
    samples = [generate_sample(tiny_spec, c, i) for i, c in enumerate([0, 0, 2])]
    np.testing.assert_array_equal(class_balance(samples, 3), [2, 0, 1])
    with pytest.raises(DomainError):
        class_balance(samples)


def test_confusable_partners_differ_only_in_the_last_stroke():
    spec = SynthSpec(seed=3)
    for a, b in spec.confusable_pairs:
        ga, gb = class_glyph(spec, a), class_glyph(spec, b)
        np.testing.assert_array_equal(ga[:-1], gb[:-1])
        assert np.linalg.norm(ga[-1] - gb[-1]) > 0.05


def test_confusable_pair_drawings_overlap_more_than_unrelated_classes():
    spec = SynthSpec(seed=3)
    S = 64

    def ink(cls):
        return render_trace(class_glyph(spec, cls), 1.0, S, head=False) > 0.5

    def difference(x, y):
        return np.logical_xor(ink(x), ink(y)).sum() / max(np.logical_or(ink(x), ink(y)).sum(), 1)

    pair_diff = np.mean([difference(a, b) for a, b in spec.confusable_pairs])
    other_diff = np.mean([difference(6, 7), difference(7, 8), difference(8, 9)])
    assert pair_diff < 0.25
    assert pair_diff < other_diff


def test_distractors_never_draw_the_own_class_glyph(tiny_spec):
    assert distractor_choices(tiny_spec) == 2 + 2
    for cls in range(3):
        drawn = [distractor_path(tiny_spec, k, cls) for k in range(2)]
        others = [class_glyph(tiny_spec, c) for c in range(3) if c != cls]
        for got, want in zip(drawn, others):
            np.testing.assert_array_equal(got, want)
    with pytest.raises(DomainError):
        distractor_path(tiny_spec, 4, 0)
    assert distractor_choices(replace(tiny_spec, glyph_distractors=False)) == 2


def test_outside_frames_are_dimmed_by_the_distractor_gain(tiny_spec):
    spec = replace(tiny_spec, noise_std=0.0, brightness_jitter=0.0, translation=0)
    dim = generate_sample(spec, 1, 3)
    off = generate_sample(replace(spec, distractor_gain=0.0), 1, 3)
    inside = np.zeros(spec.frames, dtype=bool)
    inside[dim.start:dim.end] = True
    np.testing.assert_array_equal(dim.frames[inside], off.frames[inside])
    assert off.frames[~inside].max() == 0.0
    assert 0.0 < dim.frames[~inside].max() <= spec.distractor_gain + 1e-6


def test_render_trace_progress_grows_the_ink():
    pts = np.array([[0.2, 0.2], [0.8, 0.2], [0.8, 0.8]])
    empty = render_trace(pts, 0.0, 32, head=False).sum()
    half = render_trace(pts, 0.5, 32, head=False).sum()
    full = render_trace(pts, 1.0, 32, head=False).sum()
    assert empty < half < full
    canvas = render_trace(pts, 1.0, 32)
    assert canvas.min() >= 0.0 and canvas.max() <= 1.0


def test_batches_drop_a_trailing_singleton(tiny_train_set):
    assert [len(b) for b in tiny_train_set.batches(5)] == [5, 5, 2]
    assert [len(b) for b in tiny_train_set.batches(11)] == [11]
    shuffled = np.concatenate(list(tiny_train_set.batches(4, RngStream(0, 1))))
    assert sorted(shuffled) == list(range(12))


def test_outside_window_shuffle_keeps_window_frames(tiny_train_set):
    shuffled = shuffle_outside_window(tiny_train_set, RngStream(0, 9))
    np.testing.assert_array_equal(shuffled.labels, tiny_train_set.labels)
    moved = False
    for i, (start, end) in enumerate(tiny_train_set.windows):
        np.testing.assert_array_equal(shuffled.frames[i, start:end], tiny_train_set.frames[i, start:end])
        moved |= not np.array_equal(shuffled.frames[i], tiny_train_set.frames[i])
    assert moved
    for t in range(tiny_train_set.frames_per_sample):
        np.testing.assert_allclose(np.sort(shuffled.frames[:, t].sum(axis=(1, 2, 3))), np.sort(tiny_train_set.frames[:, t].sum(axis=(1, 2, 3))))


def test_item_access_and_subset(tiny_train_set):
    item = tiny_train_set[1]
    assert isinstance(item, VideoSequence)
    assert item.label == int(tiny_train_set.labels[1])
    sub = tiny_train_set.subset([0, 2])
    assert len(sub) == 2
    np.testing.assert_array_equal(sub.frames[1], tiny_train_set.frames[2])


def test_from_samples_rejects_empty_and_ragged_input(tiny_spec):
    with pytest.raises(DatasetFormatError):
        SequenceDataset.from_samples([], 3)
    big = generate_sample(replace(tiny_spec, image_size=20), 0, 0)
    with pytest.raises(DatasetFormatError, match="inconsistent"):
        SequenceDataset.from_samples([generate_sample(tiny_spec, 0, 0), big], 3)


# -----------------------------
# Dataset files
# -----------------------------
def test_dataset_file_round_trip(tmp_path, tiny_test_set):
    path = write_dataset(tiny_test_set, tmp_path / "test.mimseq")
    back = read_dataset(path)
    np.testing.assert_array_equal(back.frames, tiny_test_set.frames)
    np.testing.assert_array_equal(back.labels, tiny_test_set.labels)
    np.testing.assert_array_equal(back.windows, tiny_test_set.windows)
    assert back.num_classes == 3


def test_header_layout(tmp_path, tiny_test_set):
    path = write_dataset(tiny_test_set, tmp_path / "test.mimseq")
    blob = path.read_bytes()
    assert blob[:8] == DATASET_MAGIC
    version, n, T, S, C = struct.unpack("<5I", blob[8:HEADER_BYTES])
    assert (version, n, T, S, C) == (1, 6, 4, 16, 3)
    assert len(blob) == HEADER_BYTES + n * (12 + 4 * T * S * S)


def test_sequence_without_window_is_stored_as_zero(tmp_path):
    seq = VideoSequence(np.zeros((3, 1, 8, 8), dtype=np.float32), 1)
    path = write_dataset([seq, seq], tmp_path / "plain.mimseq", num_classes=2)
    back = read_dataset(path)
    np.testing.assert_array_equal(back.windows, [[0, 0], [0, 0]])
    assert back[0].window is None


def test_bad_magic_fails_at_offset_zero(tmp_path):
    path = tmp_path / "bad.mimseq"
    path.write_bytes(b"GARBAGE!" + bytes(100))
    with pytest.raises(DatasetFormatError) as err:
        read_dataset(path)
    assert err.value.offset == 0


def test_truncation_names_the_record(tmp_path, tiny_test_set):
    path = write_dataset(tiny_test_set, tmp_path / "t.mimseq")
    record = 12 + 4 * 4 * 16 * 16
    path.write_bytes(path.read_bytes()[: HEADER_BYTES + 2 * record + 7])
    with pytest.raises(DatasetFormatError, match="record 2") as err:
        read_dataset(path)
    assert err.value.offset == HEADER_BYTES + 2 * record


def test_out_of_range_label_is_rejected(tmp_path, tiny_test_set):
    path = write_dataset(tiny_test_set, tmp_path / "t.mimseq")
    blob = bytearray(path.read_bytes())
    record = 12 + 4 * 4 * 16 * 16
    blob[HEADER_BYTES + record:HEADER_BYTES + record + 4] = struct.pack("<I", 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(DatasetFormatError, match="record 1") as err:
        read_dataset(path)
    assert err.value.offset == HEADER_BYTES + record


def test_window_with_start_but_no_end_is_rejected(tmp_path, tiny_test_set):
    path = write_dataset(tiny_test_set, tmp_path / "t.mimseq")
    blob = bytearray(path.read_bytes())
    record = 12 + 4 * 4 * 16 * 16
    at = HEADER_BYTES + 3 * record
    blob[at + 4:at + 12] = struct.pack("<II", 2, 0)
    path.write_bytes(bytes(blob))
    with pytest.raises(DatasetFormatError, match="record 3") as err:
        read_dataset(path)
    assert err.value.offset == at


def test_zero_extent_header_is_rejected(tmp_path):
    path = tmp_path / "z.mimseq"
    path.write_bytes(DATASET_MAGIC + struct.pack("<5I", 1, 0, 0, 8, 2))
    with pytest.raises(DatasetFormatError, match="zero extent"):
        read_dataset(path)


def test_oversized_records_are_rejected_before_reading(tmp_path):
    path = tmp_path / "huge.mimseq"
    path.write_bytes(DATASET_MAGIC + struct.pack("<5I", 1, 1, 1000, 1000, 2))
    with pytest.raises(DatasetFormatError, match="overflow"):
        read_dataset(path)
