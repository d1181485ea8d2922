import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoroute import storage
from autoroute.cli import main
from autoroute.errors import ConfigError
from autoroute.harness import (
    GRID,
    ExperimentConfig,
    ablate_ops,
    apply_overrides,
    dump_config,
    gen_sinc,
    gen_sine,
    load_config,
    load_source,
    make_target_data,
    parse_fractions,
    parse_pairs,
    pretrain_source,
    register_task,
    run_experiment,
    sinc,
    subsample_index,
    sweep_samples,
)


def tiny(tmp_path, **kw):
    base = dict(
        source_hidden=8, target_hidden=4, source_train=300, source_test=100,
        target_train=120, target_test=60, epochs=3, source_epochs=3, batch_size=16,
        out_dir=str(tmp_path),
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    root = tmp_path_factory.mktemp("src")
    cfg = tiny(root)
    net, mse = pretrain_source(cfg)
    return cfg, net, mse


# -- data ------------------------------------------------------------------------


def test_sinc_values():
    assert sinc(0.0) == 1.0
    assert sinc(np.pi) == pytest.approx(0.0, abs=1e-16)
    assert sinc(np.pi / 2) == pytest.approx(2 / np.pi)


def test_generators_are_seeded_and_correct():
    a = gen_sine(50, np.random.default_rng(3))
    b = gen_sine(50, np.random.default_rng(3))
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, np.sin(a.x))
    c = gen_sinc(50, np.random.default_rng(3))
    np.testing.assert_array_equal(c.y, sinc(c.x))
    with pytest.raises(ValueError):
        gen_sine(0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        gen_sine(5, np.random.default_rng(0), sigma=0.0)


def test_input_distribution():
    x = gen_sinc(10_000, np.random.default_rng(1)).x
    assert abs(x.mean()) < 4 * 3.0 / math.sqrt(10_000)
    assert x.std() == pytest.approx(3.0, rel=0.03)


def test_register_task(tmp_path):
    register_task("cube", lambda x: x**3)
    cfg = tiny(tmp_path, target_task="cube")
    data = make_target_data(cfg)
    np.testing.assert_array_equal(data.train.y, data.train.x**3)
    with pytest.raises(ConfigError):
        ExperimentConfig(target_task="nope")


def test_split_sizes(tmp_path):
    data = make_target_data(tiny(tmp_path))
    assert (len(data.train), len(data.holdout), len(data.test)) == (96, 24, 60)
    train_x = set(data.train.x[:, 0])
    assert not train_x & set(data.holdout.x[:, 0])


def test_subsample_nested():
    small, big = subsample_index(800, 0.1, 4), subsample_index(800, 0.5, 4)
    assert len(small) == 80 and len(big) == 400
    assert set(small) <= set(big)
    np.testing.assert_array_equal(subsample_index(800, 1.0, 4), np.arange(800))


def test_holdout_fixed_across_fractions(tmp_path):
    a = make_target_data(tiny(tmp_path, train_fraction=0.3))
    b = make_target_data(tiny(tmp_path))
    np.testing.assert_array_equal(a.holdout.x, b.holdout.x)
    np.testing.assert_array_equal(a.test.x, b.test.x)


# -- config ------------------------------------------------------------------------


def test_config_file_round_trip(tmp_path):
    cfg = tiny(tmp_path, mode="full", auto_scale=True, gamma=0.25)
    path = tmp_path / "cfg.txt"
    path.write_text("# comment\n" + dump_config(cfg))
    assert load_config(path) == cfg
    assert load_config(path, seed="7").seed == 7


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), {"bogus": "1"})
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), {"auto_scale": "maybe"})
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="teleport")
    with pytest.raises(ConfigError):
        ExperimentConfig(train_fraction=0.0)
    bad = tmp_path / "bad.txt"
    bad.write_text("seed 3\n")
    with pytest.raises(ConfigError, match="bad.txt:1"):
        load_config(bad)


def test_config_hash_ignores_paths():
    a, b = ExperimentConfig(out_dir="x"), ExperimentConfig(out_dir="y")
    assert a.hash() == b.hash()
    assert a.hash() != ExperimentConfig(seed=2).hash()


def test_output_root_env(monkeypatch):
    monkeypatch.setenv("AUTOROUTE_OUT", "/tmp/elsewhere")
    assert str(ExperimentConfig().output_root) == "/tmp/elsewhere"
    assert str(ExperimentConfig(out_dir="here").run_dir) == "here/route_seed1"


def test_parse_helpers():
    assert parse_pairs("0:0, 2:1") == [(0, 0), (2, 1)]
    assert parse_pairs("") == []
    fr = parse_fractions("0.1..1.0")
    assert len(fr) == 10 and fr[0] == 0.1 and fr[-1] == 1.0
    assert parse_fractions("0.5,1") == [0.5, 1.0]


# -- storage ------------------------------------------------------------------------


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10**6), finite, finite), min_size=1, max_size=20))
def test_csv_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "m.csv"
    recs = [{"epoch": e, "train_loss": a, "test_mse": b} for e, a, b in rows]
    storage.write_rows(path, ["epoch", "train_loss", "test_mse"], recs)
    assert storage.read_rows(path) == recs


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(1, 1)), "blob": b"\x00\x01raw"}
    storage.write_checkpoint(tmp_path / "c.ckpt", recs, {"k": [1, 2]})
    back, meta = storage.read_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"k": [1, 2]}
    assert back["blob"] == recs["blob"]
    for k in ("a", "b"):
        assert back[k].tobytes() == recs[k].tobytes()
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(ValueError):
        storage.read_checkpoint(tmp_path / "junk")


# -- pretraining and runs ------------------------------------------------------------


def test_pretrain_writes_frozen_source(pretrained):
    cfg, net, mse = pretrained
    assert not net.trainable and math.isfinite(mse)
    loaded, meta = load_source(cfg.source_path)
    assert loaded.checksum() == net.checksum() and not loaded.trainable
    assert meta["task"] == "sine"
    rows = storage.read_rows(cfg.source_path.parent / "predictions.csv")
    assert len(rows) == 401


def test_pretrain_is_deterministic(pretrained):
    cfg, net, _ = pretrained
    again, _ = pretrain_source(cfg, save=False)
    assert again.checksum() == net.checksum()


def test_missing_source(tmp_path):
    with pytest.raises(ConfigError, match="pretrain"):
        run_experiment(tiny(tmp_path, mode="route"))


@pytest.mark.parametrize("mode", ["scratch", "fixed", "route", "full"])
def test_run_outputs(pretrained, tmp_path, mode):
    _, net, _ = pretrained
    cfg = tiny(tmp_path, mode=mode)
    m = run_experiment(cfg, None if mode == "scratch" else net)
    out = cfg.run_dir
    for name in ("metrics.csv", "predictions.csv", "target.ckpt", "manifest.json"):
        assert (out / name).exists()
    rows = storage.read_rows(out / "metrics.csv")
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert rows[-1]["test_mse"] == m["final_test_mse"]
    preds = storage.read_rows(out / "predictions.csv")
    np.testing.assert_array_equal([p["x"] for p in preds], GRID)
    assert json.loads((out / "manifest.json").read_text())["mode"] == mode
    if mode in ("route", "full"):
        assert "pi_L0_0" in rows[0]
        records, meta = storage.read_checkpoint(out / "target.ckpt")
        assert "bandit.L0" in records


def test_full_fraction_matches_default_run(pretrained, tmp_path):
    _, net, _ = pretrained
    a = run_experiment(tiny(tmp_path, run_name="a"), net)
    b = run_experiment(tiny(tmp_path, run_name="b", train_fraction=1.0), net)
    assert a["final_test_mse"] == b["final_test_mse"]


def test_small_fraction_reduces_batch(pretrained, tmp_path):
    _, net, _ = pretrained
    m = run_experiment(tiny(tmp_path, train_fraction=0.1, batch_size=64), net)
    assert m["n_train"] == 10 and m["batch_size"] == 5


def test_sweep(pretrained, tmp_path):
    _, net, _ = pretrained
    ms = sweep_samples(tiny(tmp_path), [0.5, 1.0], net)
    assert [m["n_train"] for m in ms] == [48, 96]
    rows = storage.read_rows(tmp_path / "sweep_route_seed1.csv")
    assert [r["fraction"] for r in rows] == [0.5, 1.0]
    with pytest.raises(ConfigError):
        sweep_samples(tiny(tmp_path), [1.5], net)


def test_ablate(pretrained, tmp_path):
    _, net, _ = pretrained
    ms = ablate_ops(tiny(tmp_path), source=net)
    assert [m["op"] for m in ms] == ["Iden", "sAdd", "wAdd", "LinComb", "FactRed"]
    assert all(m["status"] in ("ok", "diverged") for m in ms)
    rows = storage.read_rows(tmp_path / "ablate_seed1.csv")
    assert len(rows) == 5


def test_cli_end_to_end(tmp_path, capsys):
    args = ["--out-dir", str(tmp_path)]
    for kv in ("source_hidden=8", "target_hidden=4", "source_train=200", "source_test=50",
               "target_train=100", "target_test=40", "epochs=2", "source_epochs=2"):
        args += ["--set", kv]
    assert main(["pretrain"] + args) == 0
    assert main(["run", "--mode", "route", "--seed", "3"] + args) == 0
    assert (tmp_path / "route_seed3" / "metrics.csv").exists()
    assert main(["sweep", "--mode", "scratch", "--fractions", "0.5,1.0"] + args) == 0
    assert main(["ablate", "--seed", "2"] + args) == 0
    out = capsys.readouterr().out
    assert '"op": "FactRed"' in out and "final_test_mse" in out


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == len(out.strip().splitlines())
