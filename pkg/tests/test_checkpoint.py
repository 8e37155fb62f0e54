import numpy as np
import pytest

from regionckge.checkpoint import (
    FORMAT_VERSION,
    CheckpointError,
    config_from_items,
    config_to_items,
    load_checkpoint,
    read_kv,
    save_checkpoint,
    write_kv,
)
from regionckge.continual import advance_snapshot
from regionckge.training import ModelState, train_snapshot
from support import benchmark, prepared_model, small_config


def assert_same_state(a: ModelState, b: ModelState):
    for name in a.params():
        assert a.params()[name].dtype == b.params()[name].dtype
        assert np.array_equal(a.params()[name], b.params()[name])
    assert a.neighbors == b.neighbors
    assert a.optimizer.t == b.optimizer.t
    assert sorted(a.optimizer.m) == sorted(b.optimizer.m)
    for name in a.optimizer.m:
        assert np.array_equal(a.optimizer.m[name], b.optimizer.m[name])
        assert np.array_equal(a.optimizer.v[name], b.optimizer.v[name])
    assert (a.snapshot, a.epoch, a.n_old_entities, a.bad_evals, a.stopped) == \
        (b.snapshot, b.epoch, b.n_old_entities, b.bad_evals, b.stopped)
    assert a.config == b.config
    assert np.array_equal(a.reservoir, b.reservoir)


def test_round_trip_bit_identical(tmp_path):
    snaps, vocab = benchmark(0)
    model = prepared_model(small_config(epochs=2), snaps, 1)
    train_snapshot(model, snaps[1].train, snaps[1].n_entities)
    save_checkpoint(model, tmp_path, vocab)
    loaded, loaded_vocab = load_checkpoint(tmp_path)
    assert_same_state(model, loaded)
    assert loaded_vocab == vocab
    assert loaded.rng.bit_generator.state == model.rng.bit_generator.state


def test_round_trip_float64(tmp_path):
    snaps, _ = benchmark(0)
    model = prepared_model(small_config(dtype="float64"), snaps, 1)
    save_checkpoint(model, tmp_path)
    loaded, vocab = load_checkpoint(tmp_path)
    assert vocab is None
    assert_same_state(model, loaded)


def test_parameter_files_are_raw_little_endian_float32(tmp_path):
    snaps, _ = benchmark(0)
    model = prepared_model(small_config(), snaps, 0)
    save_checkpoint(model, tmp_path)
    raw = np.fromfile(tmp_path / "entities.base", dtype="<f4").reshape(model.n_entities, model.dim)
    assert np.array_equal(raw, model.ent_base)
    meta = read_kv(tmp_path / "meta")
    assert meta["format_version"] == FORMAT_VERSION
    assert int(meta["dim"]) == model.dim and int(meta["n_entities"]) == model.n_entities


def test_mid_run_resume_matches_uninterrupted(tmp_path):
    snaps, _ = benchmark(2)
    config = small_config(epochs=6, seed=2)

    def run(interrupt: bool):
        model = ModelState(config)
        for i, snap in enumerate(snaps):
            advance_snapshot(model, snap, snaps[:i])
            if interrupt and i == 1:
                train_snapshot(model, snap.train, snap.n_entities, stop_after=3)
                save_checkpoint(model, tmp_path / "mid")
                model, _ = load_checkpoint(tmp_path / "mid")
            train_snapshot(model, snap.train, snap.n_entities)
        return model

    assert_same_state(run(False), run(True))


def test_version_mismatch(tmp_path):
    snaps, _ = benchmark(0)
    save_checkpoint(prepared_model(small_config(), snaps, 0), tmp_path)
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(tmp_path, expect_version="regionckge-checkpoint/0")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="missing meta"):
        load_checkpoint(tmp_path / "nope")


def test_truncated_parameter_file(tmp_path):
    snaps, _ = benchmark(0)
    save_checkpoint(prepared_model(small_config(), snaps, 0), tmp_path)
    data = (tmp_path / "relations.base").read_bytes()
    (tmp_path / "relations.base").write_bytes(data[:-4])
    with pytest.raises(CheckpointError, match="relations.base"):
        load_checkpoint(tmp_path)


def test_config_items_round_trip():
    config = small_config(ablations={"be"}, update_scope="Sbo", aggregate="mean", degree_cap=7)
    assert config_from_items(config_to_items(config)) == config


def test_kv_round_trip(tmp_path):
    items = {"a": "1", "b": "x=y", "c": ""}
    write_kv(tmp_path / "kv", items)
    assert read_kv(tmp_path / "kv") == items
