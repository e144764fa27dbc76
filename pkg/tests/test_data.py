import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from seqprog.data.manifest import load_manifest, write_manifest
from seqprog.data.preprocess import IMAGENET_MEAN, load_image, preprocess_image
from seqprog.data.records import (PatientSequence, VisitRecord, drop_terminal_visit, fixed_length_filter,
                                  leakage_filter)
from seqprog.data.splits import _allocate, kfold_plan, stratified_split
from seqprog.data.store import read_store, write_store
from seqprog.data.synth import SynthConfig, bayes_auc, cohort_summary, draw_latents, generate_synthetic_cohort
from seqprog.errors import CorruptFileError, DataError, ManifestError

HEADER = "patient_id,eye,visit_time,image_path,frame_label,sequence_label\n"


def seq(pid, labels, label=0, eye="left"):
    visits = [VisitRecord(pid, eye, i, float(i), f"{pid}_{i}.png", fl) for i, fl in enumerate(labels)]
    return PatientSequence(pid, eye, visits, label)


def cohort_of(n_per_class, eyes=1):
    out = []
    for c in (0, 1):
        for i in range(n_per_class):
            pid = f"C{c}P{i:03d}"
            for e in ("left", "right")[:eyes]:
                out.append(seq(pid, [0, 0], c, e))
    return out


# -- manifests ------------------------------------------------------------------------


def test_empty_manifest_warns(tmp_path, caplog):
    (tmp_path / "m.csv").write_text("")
    with caplog.at_level(logging.WARNING):
        assert load_manifest(tmp_path / "m.csv") == []
    assert "empty" in caplog.text


def test_manifest_dedup_and_sorting(tmp_path, caplog):
    (tmp_path / "m.csv").write_text(HEADER + "P1,left,2.0,c.png,0,1\nP1,left,0.0,a.png,0,1\n"
                                    "P1,left,2.0,dup.png,1,1\nP1,left,1.0,b.png,,1\n")
    with caplog.at_level(logging.WARNING):
        (s,) = load_manifest(tmp_path / "m.csv")
    assert [v.visit_time for v in s.visits] == [0.0, 1.0, 2.0]
    assert [v.image_ref for v in s.visits] == ["a.png", "b.png", "c.png"]
    assert s.visits[1].frame_label is None
    assert caplog.text.count("duplicate") == 1


def test_manifest_errors(tmp_path):
    (tmp_path / "a.csv").write_text("patient_id,eye\nP1,left\n")
    with pytest.raises(ManifestError, match="missing columns"):
        load_manifest(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text(HEADER + "P1,left,zero,a.png,0,1\nP1,left,1,a.png,0,x\n")
    with pytest.raises(ManifestError, match=r"line 2.*\n.*line 3"):
        load_manifest(tmp_path / "b.csv")
    (tmp_path / "c.csv").write_text(HEADER + "P1,left,0,a.png,0,1\nP1,left,1,b.png,0,0\n")
    with pytest.raises(ManifestError, match="conflicting"):
        load_manifest(tmp_path / "c.csv")


def test_manifest_round_trip_and_path_resolution(tmp_path):
    (tmp_path / "img").mkdir()
    (tmp_path / "img" / "x.png").write_bytes(b"")
    cohort = [seq("P1", [0, 1], 1), seq("P2", [0], 0, "right")]
    cohort[0].visits[0].image_ref = "img/x.png"
    write_manifest(tmp_path / "m.csv", cohort)
    back = load_manifest(tmp_path / "m.csv")
    assert [s.key for s in back] == ["P1/left", "P2/right"]
    assert back[0].visits[0].image_ref == str(tmp_path / "img" / "x.png")
    assert back[0].frame_labels == [0, 1] and back[0].visits[1].visit_id == cohort[0].visits[1].visit_id


def test_drop_terminal_visit(tmp_path):
    assert len(drop_terminal_visit(seq("P", [0, 0, 0]))) == 2
    assert drop_terminal_visit(seq("P", [0])) is None
    write_manifest(tmp_path / "m.csv", [seq("P1", [0, 0, 0]), seq("P2", [0])])
    assert [len(s) for s in load_manifest(tmp_path / "m.csv", drop_terminal=True)] == [2]


# -- filters ------------------------------------------------------------------------


def test_leakage_filter_examples(caplog):
    assert len(leakage_filter(seq("P", [0, 0, 1, 1], 1))) == 2
    assert leakage_filter(seq("P", [0, 0, 1, 1], 1)).sequence_label == 1
    assert len(leakage_filter(seq("P", [0, 0, 0]))) == 3
    with caplog.at_level(logging.WARNING):
        assert leakage_filter(seq("P", [1, 0], 1)) is None
    assert "excluded" in caplog.text


@given(st.lists(st.integers(0, 1), min_size=1, max_size=10))
def test_leakage_output_has_no_positive_frame(labels):
    out = leakage_filter(seq("P", labels, 1))
    assert out is None or all(v.frame_label == 0 for v in out.visits)


def test_fixed_length_filter_examples():
    cohort = [seq(f"P{i}", [0] * m) for i, m in enumerate([1, 2, 2, 3, 5])]
    kept, dropped = fixed_length_filter(cohort, 3)
    assert (len(kept), dropped) == (2, 3)
    assert [v.visit_index for v in kept[1].visits] == [2, 3, 4]
    assert fixed_length_filter(cohort, 1)[1] == 0
    with pytest.raises(ValueError):
        fixed_length_filter(cohort, 0)


@given(st.lists(st.integers(1, 8), min_size=1, max_size=30))
def test_fixed_length_counts_are_monotone(lengths):
    cohort = [seq(f"P{i}", [0] * m) for i, m in enumerate(lengths)]
    kept = []
    for dt in range(1, 10):
        k, d = fixed_length_filter(cohort, dt)
        assert len(k) + d == len(cohort)
        kept.append(len(k))
    assert kept == sorted(kept, reverse=True)


# -- preprocessing -----------------------------------------------------------------


def test_mean_gray_image_normalises_to_zero():
    img = np.broadcast_to(IMAGENET_MEAN, (40, 40, 3)).astype(np.float32)
    out = preprocess_image(img)
    assert out.shape == (32, 32, 3)
    np.testing.assert_allclose(out, 0.0, atol=1e-5)


def test_preprocess_determinism(rng):
    img = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
    np.testing.assert_array_equal(preprocess_image(img), preprocess_image(img))
    a = preprocess_image(img, train_mode=True, rng=3)
    b = preprocess_image(img, train_mode=True, rng=3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, preprocess_image(img))


def test_load_image(tmp_path, rng):
    arr = rng.integers(0, 255, (10, 12, 3), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "x.png")
    np.testing.assert_allclose(load_image(tmp_path / "x.png"), arr / 255.0, atol=1e-7)
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(DataError):
        load_image(tmp_path / "bad.png")


# -- splits ----------------------------------------------------------------------------


def test_stratified_split_example():
    cohort = cohort_of(5)
    split = stratified_split(cohort, seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (7, 1, 2)
    assert not (set(split.train) & set(split.val) or set(split.train) & set(split.test)
                or set(split.val) & set(split.test))
    assert split == stratified_split(cohort, seed=0)


def test_split_keeps_both_eyes_together():
    cohort = cohort_of(10, eyes=2)
    split = stratified_split(cohort, seed=4)
    for part in ("train", "val", "test"):
        sel = split.select(cohort, part)
        assert len(sel) == 2 * len(getattr(split, part))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 60), st.integers(3, 60), st.integers(0, 1000))
def test_split_class_proportions(n0, n1, seed):
    table = _allocate([n0, n1], (0.7, 0.1, 0.2), np.random.default_rng(seed))
    assert table.sum(axis=1).tolist() == [n0, n1]
    quotas = np.array([[n * f for f in (0.7, 0.1, 0.2)] for n in (n0, n1)])
    assert np.all(np.abs(table - quotas) <= 1.0 + 1e-9)


def test_kfold_plan_partitions_patients():
    cohort = cohort_of(13)
    plan = kfold_plan(cohort, 5, seed=1)
    tests = [set(s.test) for s in plan]
    all_ids = {s.patient_id for s in cohort}
    assert set().union(*tests) == all_ids
    assert sum(len(t) for t in tests) == len(all_ids)
    for c in ("C0", "C1"):
        sizes = [sum(p.startswith(c) for p in t) for t in tests]
        assert max(sizes) - min(sizes) <= 1
    for s in plan:
        assert set(s.train) | set(s.val) == all_ids - set(s.test)
        assert not set(s.train) & set(s.val)
    with pytest.raises(DataError):
        kfold_plan(cohort_of(3), 5, seed=0)


# -- store --------------------------------------------------------------------------


def test_store_round_trip_sorted(tmp_path, rng):
    vecs = {f"id{int(i):04d}": rng.standard_normal(16).astype(np.float32) for i in rng.permutation(100)}
    write_store(tmp_path / "s.tsdf", vecs)
    back = read_store(tmp_path / "s.tsdf")
    assert back.ids == sorted(vecs)
    for k, v in vecs.items():
        assert back[k].tobytes() == v.tobytes()


def test_store_rejections(tmp_path):
    with pytest.raises(DataError):
        write_store(tmp_path / "a", [("x", np.zeros(2)), ("x", np.zeros(2))])
    with pytest.raises(DataError):
        write_store(tmp_path / "a", {"x": np.zeros(2), "y": np.zeros(3)})
    write_store(tmp_path / "ok", {"x": np.ones(4)})
    raw = (tmp_path / "ok").read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-2])
    with pytest.raises(CorruptFileError):
        read_store(tmp_path / "trunc")
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptFileError):
        read_store(tmp_path / "magic")


# -- synthetic cohorts ---------------------------------------------------------------


def test_uninformative_limit():
    cfg = SynthConfig(n_patients=50, drift=0.0, noise=0.0, mode="embedding", seed=2)
    lat = draw_latents(cfg, np.random.default_rng(0))
    assert all((z == 0).all() for z in lat.observed)
    assert bayes_auc(cfg, 2000, seed=1) == 0.5


def test_separable_limit():
    assert bayes_auc(SynthConfig(noise=0.0), 2000, seed=1) == 1.0


def test_default_cohort_is_calibrated():
    auc = bayes_auc(SynthConfig(), 10_000, seed=123)
    assert 0.97 <= auc <= 0.99


def test_generator_is_seed_deterministic():
    a = generate_synthetic_cohort(SynthConfig(n_patients=20, seed=5))
    b = generate_synthetic_cohort(SynthConfig(n_patients=20, seed=5))
    assert [s.key for s in a.sequences] == [s.key for s in b.sequences]
    assert all(a.images[k].tobytes() == b.images[k].tobytes() for k in a.images)
    e1 = generate_synthetic_cohort(SynthConfig(n_patients=20, seed=5, mode="embedding"))
    e2 = generate_synthetic_cohort(SynthConfig(n_patients=20, seed=5, mode="embedding"))
    assert all(e1.embeddings[k].tobytes() == e2.embeddings[k].tobytes() for k in e1.embeddings)


def test_generator_contract():
    cfg = SynthConfig(n_patients=100, positive_fraction=0.2, seed=1)
    c = generate_synthetic_cohort(cfg)
    summary = cohort_summary(c.sequences)
    assert abs(summary["per_class"][1] - 20) <= 1
    assert set(summary["length_histogram"]) <= set(range(1, 7))
    assert summary["visits"] == len(c.images)
    for s in c.sequences:
        times = [v.visit_time for v in s.visits]
        assert times == sorted(times)
        if s.sequence_label == 0:
            assert all(v.frame_label == 0 for v in s.visits)
    with pytest.raises(DataError):
        SynthConfig(length_probs=(0.5, 0.2)).validate()


def test_progression_is_visible_in_images():
    c = generate_synthetic_cohort(SynthConfig(n_patients=200, seed=0, noise=0.0))
    bright = {0: [], 1: []}
    for s in c.sequences:
        last = c.images[s.visits[-1].visit_id].astype(float).mean()
        bright[s.sequence_label].append(last)
    assert np.mean(bright[1]) > np.mean(bright[0])
