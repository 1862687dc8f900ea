import numpy as np
import pytest

from gaitdyad import nn, synth
from gaitdyad import therapist as th


def unit_stats():
    return th.FeatureStats(np.zeros(8), np.ones(8), np.zeros(8), np.ones(8))


# --- windows -------------------------------------------------------------------------


def test_window_count_boundaries():
    assert th.window_count(75) == 1
    assert th.window_count(74) == 0
    assert th.window_count(105) == 4


def test_windows_starts_and_shift():
    P = np.arange(105 * 8, dtype=float).reshape(105, 8)
    T = -P
    w = th.build_windows(P, T)
    assert len(w) == 4
    np.testing.assert_array_equal(w.t, [0, 10, 20, 30])
    for k, s in enumerate(w.t):
        np.testing.assert_array_equal(w.X[k], P[s : s + 50])
        np.testing.assert_array_equal(w.Y[k, 0], T[s + 25])


def test_short_series_warns(caplog):
    w = th.build_windows(np.zeros((60, 8)), np.zeros((60, 8)))
    assert len(w) == 0 and "too short" in caplog.text


@pytest.fixture(scope="module")
def dyads():
    profiles = synth.patient_cohort(3, seed=1)
    return [synth.lagged_dyad(p, 12.0, seed=i, dyad_id=i) for i, p in enumerate(profiles)]


def test_split_has_no_leakage(dyads):
    tr, va, te = th.split_dyad(dyads[0])
    assert len(tr) and len(va) and len(te)
    # the last frame any train window touches precedes every validation frame
    assert tr.t.max() + th.SHIFT + th.WIN <= va.t.min()
    assert va.t.max() + th.SHIFT + th.WIN <= te.t.min()


def test_window_offsets_index_the_series(dyads):
    _, va, _ = th.split_dyad(dyads[1])
    P, T = th.dyad_features(dyads[1])
    np.testing.assert_array_equal(va.X[3], P[va.t[3] : va.t[3] + 50])
    np.testing.assert_array_equal(va.Y[3], T[va.t[3] + 25 : va.t[3] + 75])


# --- model ---------------------------------------------------------------------------


def test_predict_shapes_and_errors():
    m = th.StModel(hidden=8, stats=unit_stats())
    assert th.predict(m, np.zeros((50, 8))).shape == (50, 8)
    assert th.predict(m, np.zeros((3, 50, 8))).shape == (3, 50, 8)
    with pytest.raises(nn.ShapeError):
        th.predict(m, np.zeros((50, 7)))


def test_predict_deterministic_and_matches_training_forward():
    rng = np.random.default_rng(0)
    st = th.FeatureStats(rng.normal(size=8), rng.uniform(1, 2, 8), rng.normal(size=8), rng.uniform(1, 2, 8))
    m = th.StModel(hidden=16, seed=4, stats=st)
    X = rng.normal(size=(5, 50, 8))
    a = th.predict(m, X)
    assert a.tobytes() == th.predict(m, X).tobytes()
    y, _ = m.forward_normalized(m.normalize_x(X))
    ref = np.moveaxis(y, 0, -1) * st.y_std + st.y_mean
    np.testing.assert_allclose(a, ref, atol=1e-5 * np.abs(ref).max())


def test_head_column_equals_single_head():
    rng = np.random.default_rng(1)
    st = unit_stats()
    full = th.StModel(hidden=16, seed=2, stats=st)
    X = rng.normal(size=(50, 8))
    for h in (0, 5):
        alone = th.StModel((h,), hidden=16, seed=2, stats=st)
        np.testing.assert_array_equal(th.predict(alone, X)[:, 0], th.predict(full, X)[:, h])


def test_kernel_cache_follows_parameter_changes():
    m = th.StModel(hidden=8, stats=unit_stats())
    X = np.random.default_rng(2).normal(size=(50, 8))
    before = th.predict(m, X)
    p = m.head_params(3)
    p["br"] = p["br"] + 1.0
    m.set_head(3, p)
    after = th.predict(m, X)
    np.testing.assert_allclose(after[:, 3] - before[:, 3], 1.0, atol=1e-6)
    np.testing.assert_array_equal(np.delete(after, 3, axis=1), np.delete(before, 3, axis=1))


@pytest.mark.parametrize("seed", range(20))
def test_end_to_end_gradients(seed):
    rng = np.random.default_rng(seed)
    m = th.StModel(hidden=4, seed=seed, stats=unit_stats())
    Xn = rng.normal(size=(2, 5, 8))
    Yn = rng.normal(size=(2, 5, 8))

    _, grads = th.loss_and_grads(m, Xn, Yn)
    for name, p in m.params.items():
        for g in range(m.n_heads):
            # head g's parameters only reach head g's loss term
            num = nn.numerical_gradient(lambda: th.loss_and_grads(m, Xn, Yn)[0][g], p[g])
            # floor sits above the difference quotient's roundoff (~1e-11 at h=1e-5)
            assert nn.max_relative_error(grads[name][g], num, floor=1e-6) < 1e-4, (name, g)


# --- training -------------------------------------------------------------------------


def _identity_windows(seed, n_frames=1500):
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / 333.0
    q = np.column_stack([20 * np.sin(2 * np.pi * 0.9 * t + ph) for ph in rng.uniform(0, 6, 4)])
    qd = np.gradient(q, axis=0) * 333.0
    P = np.hstack([q, qd])
    return th.build_windows(P, P)


def test_constant_target_learned():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(120, 50, 8))
    w = th.Windows(X, np.full((120, 50, 8), 5.0) + 0.01 * rng.normal(size=(120, 50, 8)), np.zeros(120, int), np.arange(120))
    m, _ = th.train_heads(w.select(np.arange(100)), w.select(np.arange(100, 120)), th.StConfig(epochs=30, batch_size=20, lr=1e-2, hidden=4), features=(0,))
    pred = th.predict(m, w.X[100:])[..., 0]
    assert np.sqrt(np.mean((pred - 5.0) ** 2)) < 0.05


def test_identity_mapping_learnable():
    w = _identity_windows(4)
    n = len(w)
    tr, va = w.select(np.arange(0, int(0.8 * n))), w.select(np.arange(int(0.8 * n), n))
    m, hist = th.train_heads(tr, va, th.StConfig(epochs=15, batch_size=16, lr=1e-2, hidden=8))
    # target is the series 25 frames after the input row: still learnable from the window
    rm = th.evaluate_rmse(m, va)
    assert rm["position_mean"] < 1.0


def test_training_deterministic_and_heads_independent():
    w = _identity_windows(5, 900)
    tr, va = w.select(np.arange(60)), w.select(np.arange(60, len(w)))
    cfg = th.StConfig(epochs=2, batch_size=16, lr=1e-3, hidden=4, seed=7)
    a, ha = th.train_heads(tr, va, cfg)
    b, hb = th.train_heads(tr, va, cfg)
    assert ha.val_rmse.tobytes() == hb.val_rmse.tobytes()
    single, _ = th.train_feature_model(tr, va, 6, cfg)
    np.testing.assert_allclose(single.params["Wh"][0], a.params["Wh"][6], rtol=1e-10, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_aborts():
    w = _identity_windows(6, 600)
    w.X[2, 3, 1] = np.inf
    with pytest.raises((nn.NonFiniteError, FloatingPointError)):
        th.train_heads(w.select(np.arange(10)), w.select(np.arange(10, 20)), th.StConfig(epochs=1, batch_size=8, hidden=4, lr=1e-3))


# --- evaluation -----------------------------------------------------------------------


def test_rmse_perfect_and_offset():
    Y = np.random.default_rng(7).normal(size=(10, 50, 8))
    r0 = th.summarize_rmse(th.window_rmse(Y, Y))
    assert r0["position_mean"] == 0.0 and r0["position_std"] == 0.0
    r1 = th.summarize_rmse(th.window_rmse(Y + 1.0, Y))
    assert r1["position_mean"] == pytest.approx(1.0)


def test_patient_copy_mirrors_columns():
    X = np.arange(8.0)[None, None].repeat(50, axis=1)
    np.testing.assert_array_equal(th.patient_copy(X)[0, 0], [2, 3, 0, 1, 6, 7, 4, 5])


def test_zero_order_hold(dyads):
    rec = dyads[0]
    w = th.all_windows(rec)
    _, T = th.dyad_features(rec)
    zoh = th.zero_order_hold(T, w)
    np.testing.assert_array_equal(zoh[4, 17], T[w.t[4] + 49])


def test_leave_one_out_structure(dyads, tmp_path):
    cfg = th.StConfig(epochs=1, batch_size=64, lr=1e-3, hidden=4)
    rows, models = th.leave_one_out(dyads, cfg)
    assert len(rows) == len(dyads) + 1 and rows[-1].label == "pooled"
    th.write_loo(tmp_path / "loo.csv", rows)
    lines = (tmp_path / "loo.csv").read_text().splitlines()
    assert len(lines) == len(dyads) + 2
    with pytest.raises(ValueError):
        th.leave_one_out(dyads[:1], cfg)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    st = th.FeatureStats(rng.normal(size=8), rng.uniform(1, 2, 8), rng.normal(size=8), rng.uniform(1, 2, 8))
    m = th.StModel(hidden=6, seed=1, stats=st)
    th.save_model(tmp_path / "st", m, th.StConfig())
    assert len(list((tmp_path / "st").glob("head_*.dyfw"))) == 8
    back = th.load_model(tmp_path / "st")
    X = rng.normal(size=(50, 8))
    assert th.predict(back, X).tobytes() == th.predict(m, X).tobytes()
