import numpy as np
import pytest

from obmreg import OBMNet, RunConfig
from obmreg.config import ConfigError
from obmreg.data import generate_dataset, read_manifest
from obmreg.diffmath import Tensor
from obmreg.model import load_checkpoint
from obmreg.train import (
    LOG_COLUMNS,
    STANDARD_ABLATIONS,
    OptimizerState,
    TrainingDiverged,
    ablate,
    adam_step,
    clip_gradients,
    lr_schedule,
    parse_toggles,
    train,
)
import obmreg.train as train_mod

TINY = dict(edge_widths=(8, 8), feat_dim=16, mix_hidden_width=8, bias_hidden_width=8, k_feat=8, k_match=4,
            topk_pairs=16, train_iters=1, n_iter=1)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    return read_manifest(generate_dataset(d, pairs=4, val_pairs=1, test_pairs=2, overlap=0.8, noise=0.01,
                                          seed=3, n_points=64))


def test_adam_zero_gradient():
    params = {"x": Tensor(np.array([1.0, -2.0]))}
    st = OptimizerState.for_params(params)
    st.m["x"][:] = 0.5
    st.v["x"][:] = 0.25
    adam_step(params, {"x": np.zeros(2)}, st)
    assert np.allclose(st.m["x"], 0.45) and np.allclose(st.v["x"], 0.24975)
    params = {"x": Tensor(np.array([1.0, -2.0]))}
    st = OptimizerState.for_params(params)
    adam_step(params, {"x": np.zeros(2)}, st)
    assert np.array_equal(params["x"].data, [1.0, -2.0])


def run_quadratic(lr, steps=100):
    params = {"x": Tensor(np.array([1.0]))}
    st = OptimizerState.for_params(params, lr=lr)
    xs = [1.0]
    for _ in range(steps):
        adam_step(params, {"x": 2 * params["x"].data}, st)
        xs.append(params["x"].data[0])
    return np.array(xs)


def test_adam_first_step_and_descent():
    params = {"x": Tensor(np.array([1.0]))}
    st = OptimizerState.for_params(params, lr=0.001)
    adam_step(params, {"x": np.array([1.0])}, st)
    assert abs((1.0 - params["x"].data[0]) - 0.001) < 1e-10
    xs = run_quadratic(0.01)
    assert abs(xs[-1]) < 0.9 and np.all(np.diff(xs) < 0)


def test_adam_step_never_exceeds_lr():
    # |m_hat| <= sqrt(v_hat), so each step moves at most lr: at lr 0.001
    # 100 steps cannot take x = 1 below 0.9
    xs = run_quadratic(0.001)
    assert np.all(np.abs(np.diff(xs)) <= 0.001 + 1e-15)
    assert 0.9 < xs[-1] < 0.91


def test_adam_rejects_bad_gradients():
    params = {"x": Tensor(np.zeros(2))}
    st = OptimizerState.for_params(params)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        adam_step(params, {"x": np.array([np.nan, 0.0])}, st)
    with pytest.raises(ValueError):
        adam_step(params, {"x": np.zeros(3)}, st)
    assert st.step == 0


def test_lr_schedule():
    cfg = RunConfig()
    assert lr_schedule(0, cfg) == 0.001
    assert lr_schedule(24, cfg) == 0.001
    assert abs(lr_schedule(25, cfg) - 0.0007) < 1e-15
    long = RunConfig(lr_decay_epochs=(25, 50, 75))
    assert abs(lr_schedule(75, long) - 0.000343) < 1e-15
    assert abs(lr_schedule(99, long) - 0.000343) < 1e-15
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_clip_gradients():
    g = {"a": np.array([3.0]), "b": np.array([4.0]), "c": None}
    assert clip_gradients(g, 0) is g
    out = clip_gradients(g, 1.0)
    assert np.allclose([out["a"][0], out["b"][0]], [0.6, 0.8]) and out["c"] is None


def test_smoke_and_determinism(manifest, tmp_path):
    cfg = RunConfig(**TINY, epochs=1, seed=1)
    a = train(manifest, cfg, tmp_path / "a")
    b = train(manifest, cfg, tmp_path / "b")
    assert len(a.history) == 1 and np.isfinite(a.history[0]["total"])
    assert (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0] == ",".join(LOG_COLUMNS)
    for name in ("metrics.csv", "best.npz", "last.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted(manifest, tmp_path, monkeypatch):
    cfg = RunConfig(**TINY, epochs=3, seed=2)
    full = train(manifest, cfg, tmp_path / "full")

    real = train_mod.train_pair
    calls = {"n": 0}

    def crash_in_epoch_two(*args, **kw):
        calls["n"] += 1
        if calls["n"] > 4 * 2:
            raise KeyboardInterrupt
        return real(*args, **kw)

    monkeypatch.setattr(train_mod, "train_pair", crash_in_epoch_two)
    with pytest.raises(KeyboardInterrupt):
        train(manifest, cfg, tmp_path / "part")
    monkeypatch.setattr(train_mod, "train_pair", real)
    resumed = train(manifest, cfg, tmp_path / "part", resume=True)
    assert resumed.history == full.history
    for k, p in full.model.params.items():
        assert np.array_equal(p.data, resumed.model.params[k].data)
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = OBMNet(RunConfig(**TINY), seed=4)
    model.save(tmp_path / "m.npz", meta={"note": "x"})
    back = OBMNet.load(tmp_path / "m.npz")
    assert back.cfg == model.cfg
    for k, p in model.params.items():
        assert np.array_equal(p.data, back.params[k].data)
    cfg, params, extra, meta = load_checkpoint(tmp_path / "m.npz")
    assert meta["note"] == "x" and extra == {}


def test_diverged_pair_reports_seed(manifest, tmp_path, monkeypatch):
    def boom(*args, **kw):
        raise FloatingPointError("nan loss")

    monkeypatch.setattr(train_mod, "train_pair", boom)
    with pytest.raises(TrainingDiverged, match="pair seed"):
        train(manifest, RunConfig(**TINY, epochs=1), tmp_path / "x")


def test_toggles_and_ablation(manifest, tmp_path):
    assert parse_toggles("full") == STANDARD_ABLATIONS["full"]
    assert parse_toggles("OS, L_g") == {"OS", "L_g"}
    with pytest.raises(ConfigError):
        parse_toggles("OS,FOO")
    cfg = RunConfig(**TINY, epochs=1)
    with pytest.raises(ConfigError):
        ablate(cfg, {"bad": frozenset({"OS", "NMM"})}, manifest, tmp_path / "ab")  # no loss enabled
    with pytest.raises(ConfigError):
        cfg.with_toggles({"BP", "L_g"})  # bias prediction needs overlap sampling
    rows = ablate(cfg, {"loss_g": STANDARD_ABLATIONS["loss_g"]}, manifest, tmp_path / "ab")
    assert [r["name"] for r in rows] == ["full", "loss_g"]
    assert rows[0]["toggles"] == "OS+BP+NMM+L_g+L_n+L_s"
    assert all(np.isfinite(r["median_mie_r"]) for r in rows)
