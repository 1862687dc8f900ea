import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitdyad import strides as sp
from gaitdyad import synth


def make_stride(hip, knee=None, **kw):
    knee = np.zeros(100) if knee is None else knee
    return sp.Stride(hip, knee, kw.pop("owner", "patient"), kw.pop("side", "left"), kw.pop("dyad_id", 0), kw.pop("stride_index", 0), **kw)


# --- heel strikes ------------------------------------------------------------------


def test_rising_edges():
    F, T = False, True
    np.testing.assert_array_equal(sp.detect_heel_strikes([F, F, T, T, F, T]), [2, 5])


def test_constant_contact_is_insufficient():
    with pytest.raises(sp.InsufficientStridesError, match="insufficient strides"):
        sp.detect_heel_strikes([True] * 20)


def test_refractory_debounce():
    c = np.zeros(40, bool)
    c[5:9] = True
    c[10:12] = True  # bounce
    c[30:35] = True
    np.testing.assert_array_equal(sp.detect_heel_strikes(c, refractory=10), [5, 30])


def test_cadence_one_strike_gaps():
    w = synth.generate_gait(synth.random_profile(np.random.default_rng(0), cadence=1.0), 30.0, seed=1)
    gaps = np.diff(sp.detect_heel_strikes(w.contact[:, 0], refractory=100))
    assert np.all(np.abs(gaps - 333) <= 1)


# --- segmentation --------------------------------------------------------------------


def test_identity_resample():
    q = np.random.default_rng(0).standard_normal((300, 4))
    out, _ = sp.segment_and_resample(q, [50, 150], "left", rate=100.0)
    np.testing.assert_array_equal(out[0].hip, q[50:150, 0])
    np.testing.assert_array_equal(out[0].knee, q[50:150, 1])


def test_ramp_resample_keeps_endpoints():
    ramp = np.arange(400, dtype=float)
    q = np.column_stack([ramp, 2 * ramp, ramp, ramp])
    out, _ = sp.segment_and_resample(q, [100, 300], "left", rate=333.0)
    s = out[0]
    assert s.hip[0] == 100.0 and s.hip[-1] == 299.0
    np.testing.assert_allclose(np.diff(s.hip), 199.0 / 99.0)
    np.testing.assert_allclose(s.knee, 2 * s.hip)


def test_sinusoid_resample_against_analytic():
    rate = 333.0
    n = 1000
    t = np.arange(n) / rate
    f = 0.9
    q = np.zeros((n, 4))
    q[:, 2] = 30 * np.sin(2 * np.pi * f * t)
    a, b = 100, 100 + 370
    out, _ = sp.segment_and_resample(q, [a, b], "right", rate=rate)
    pos = np.linspace(a, b - 1, 100) / rate
    expected = 30 * np.sin(2 * np.pi * f * pos)
    assert np.max(np.abs(out[0].hip - expected)) < 0.1


def test_duration_limits_discard():
    q = np.zeros((2000, 4))
    out, discarded = sp.segment_and_resample(q, [0, 50, 400, 1500], "left", rate=333.0)
    # 50 frames = 0.15 s (too short), 350 ok, 1100 frames = 3.3 s (too long)
    assert len(out) == 1 and discarded == 2
    assert out[0].stride_index == 1


# --- outliers ---------------------------------------------------------------------------


def test_identical_strides_mostly_kept():
    s = [make_stride(np.sin(np.linspace(0, 6, 100)), stride_index=i) for i in range(10)]
    kept, _ = sp.remove_outliers(s)
    assert len(kept) >= 9


def test_injected_offsets_removed():
    rng = np.random.default_rng(1)
    base = 20 * np.sin(np.linspace(0, 2 * np.pi, 100))
    s = []
    for i in range(100):
        hip = base + rng.normal(0, 1.0, 100)
        if i % 12 == 0 and len([x for x in s if x.start == 1]) < 8:
            hip = hip + 30.0
            s.append(make_stride(hip, stride_index=i, start=1))
        else:
            s.append(make_stride(hip, stride_index=i))
    assert sum(x.start == 1 for x in s) == 8
    _, removed = sp.remove_outliers(s)
    assert {x.stride_index for x in s if x.start == 1} <= {x.stride_index for x in removed}


def test_removal_fraction_near_ten_percent():
    rng = np.random.default_rng(2)
    s = [make_stride(rng.normal(0, 1, 100), rng.normal(0, 1, 100), stride_index=i) for i in range(1000)]
    _, removed = sp.remove_outliers(s)
    assert abs(len(removed) / 1000 - 0.10) <= 0.02


def test_outliers_need_ten():
    with pytest.raises(ValueError):
        sp.remove_outliers([make_stride(np.zeros(100))] * 5)


# --- normalisation -------------------------------------------------------------------------


def test_normalize_own_stats():
    X = np.random.default_rng(3).normal(5, 3, (200, 2, 100))
    stats = sp.fit_stats(X)
    Z = sp.normalize(X, stats)
    assert np.max(np.abs(Z.mean(axis=0))) < 1e-9
    np.testing.assert_allclose(Z.std(axis=0), 1.0, atol=1e-9)


def test_denormalize_round_trip():
    rng = np.random.default_rng(4)
    X = rng.normal(0, 10, (50, 2, 100))
    stats = sp.fit_stats(X[:30])
    np.testing.assert_allclose(sp.denormalize(sp.normalize(X, stats), stats), X, atol=1e-12, rtol=0)


def test_validation_uses_training_stats():
    rng = np.random.default_rng(5)
    train = rng.normal(0, 1, (100, 2, 100))
    val = rng.normal(0, 3, (100, 2, 100))
    Z = sp.normalize(val, sp.fit_stats(train))
    assert abs(Z.std() - 1.0) > 0.5


def test_std_floor_counts():
    X = np.ones((10, 1, 100))
    stats = sp.fit_stats(X)
    assert stats.floored == 100
    assert np.all(stats.std == sp.STD_FLOOR)


def test_single_joint_stats():
    X = np.random.default_rng(6).normal(0, 2, (40, 2, 100))
    stats = sp.fit_stats(X)
    knee = sp.normalize(X[:, 1], stats.joint(1))
    np.testing.assert_allclose(knee, sp.normalize(X, stats)[:, 1])


def test_stats_json_round_trip(tmp_path):
    stats = sp.fit_stats(np.random.default_rng(7).normal(0, 2, (40, 2, 100)))
    stats.save(tmp_path / "s.json")
    back = sp.NormStats.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.mean, stats.mean)
    np.testing.assert_array_equal(back.std, stats.std)


# --- splits ----------------------------------------------------------------------------


def test_split_sizes():
    assert [len(p) for p in sp.split(10, [0.7, 0.3], seed=0)] == [7, 3]
    parts = sp.split(100, [0.7, 0.2, 0.1], contiguous=True)
    assert [len(p) for p in parts] == [70, 20, 10]
    assert parts[0].max() < parts[1].min() and parts[1].max() < parts[2].min()


def test_split_errors():
    with pytest.raises(ValueError):
        sp.split(10, [0.5, 0.4])
    with pytest.raises(ValueError):
        sp.split(3, [0.9, 0.05, 0.05])


@given(n=st.integers(10, 500), seed=st.integers(0, 2**31), contiguous=st.booleans())
@settings(max_examples=60, deadline=None)
def test_split_disjoint_exhaustive_deterministic(n, seed, contiguous):
    parts = sp.split(n, [0.7, 0.2, 0.1], seed=seed, contiguous=contiguous)
    allidx = np.concatenate(parts)
    assert sorted(allidx.tolist()) == list(range(n))
    again = sp.split(n, [0.7, 0.2, 0.1], seed=seed, contiguous=contiguous)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))


# --- whole pipeline -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def recordings():
    profiles = synth.patient_cohort(2, seed=3)
    return [
        synth.couple_dyad(p, synth.GaitProfile(), synth.CouplingParams(), 40.0, seed=i, dyad_id=i)
        for i, p in enumerate(profiles)
    ]


def test_pipeline_pairs_are_bijective(recordings):
    ds = sp.build_stride_dataset(recordings)
    assert ds.pairs
    keys = [pr.patient.key for pr in ds.pairs]
    assert len(keys) == len(set(keys))
    for pr in ds.pairs:
        assert pr.therapist.side == sp.MIRROR_SIDE[pr.patient.side]
        assert pr.therapist.owner == "therapist" and pr.patient.owner == "patient"
        assert (pr.patient.start, pr.patient.end) == (pr.therapist.start, pr.therapist.end)
    per_side = sum(sum(1 for pr in ds.pairs if pr.patient.side == s) for s in ("left", "right"))
    assert per_side == len(ds.pairs)
    assert len(ds.strides()) == 2 * len(ds.pairs)
    assert ds.removed_outliers > 0


def test_pipeline_deterministic(recordings):
    a = sp.build_stride_dataset(recordings)
    b = sp.build_stride_dataset(recordings)
    assert sp.stack(a.strides()).tobytes() == sp.stack(b.strides()).tobytes()


def test_stride_csv_round_trip(tmp_path, recordings):
    ds = sp.build_stride_dataset(recordings[:1])
    sp.write_strides(tmp_path / "s.csv", ds.strides())
    back = sp.read_strides(tmp_path / "s.csv")
    assert len(back) == len(ds.strides())
    assert sp.stack(back).tobytes() == sp.stack(ds.strides()).tobytes()
    assert back[1].owner == "therapist" and back[1].k_t == ds.strides()[1].k_t
