import numpy as np
import orjson

from run_store import RunStore, config_hash, read_csv


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": {"c": 2, "d": 3}}) == config_hash({"b": {"d": 3, "c": 2}, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 64


def test_csv_starts_with_provenance(tmp_path):
    store = RunStore(str(tmp_path / "out"), 42, {"lr": 3e-4})
    path = store.write_csv("table.csv", ["a", "b"], [[1, 2.5]])
    first = path.read_text().splitlines()[0]
    assert first == f"# seed=42 git={store.git} config_hash={config_hash({'lr': 3e-4})}"
    assert read_csv(path) == [{"a": "1", "b": "2.5"}]


def test_floats_survive_exactly(tmp_path):
    store = RunStore(str(tmp_path), 0, {})
    values = [0.1 + 0.2, 1e-300, -2.0 / 3.0, np.float64(np.pi)]
    path = store.write_csv("floats.csv", ["x"], [[v] for v in values])
    assert [float(row["x"]) for row in read_csv(path)] == [float(v) for v in values]


def test_missing_values_are_blank(tmp_path):
    store = RunStore(str(tmp_path), 0, {})
    path = store.write_csv("gaps.csv", ["x", "y"], [[None, np.int64(3)]])
    assert read_csv(path) == [{"x": "", "y": "3"}]


def test_appender_fills_absent_columns(tmp_path):
    store = RunStore(str(tmp_path), 1, {})
    with store.open_csv("metrics.csv", ["iteration", "loss"]) as metrics:
        metrics.append({"iteration": 0, "loss": 0.5})
        metrics.append({"iteration": 1})
    assert read_csv(tmp_path / "metrics.csv") == [{"iteration": "0", "loss": "0.5"}, {"iteration": "1", "loss": ""}]
    assert store.get_stats()["csv_files"] == 1


def test_checkpoint_names_and_json(tmp_path):
    store = RunStore(str(tmp_path), 0, {})
    assert store.checkpoint_path(7).name == "checkpoint_000007.json"
    assert store.checkpoint_path().name == "checkpoint_final.json"
    path = store.write_json("summary.json", {"mean": np.float64(1.5)})
    assert orjson.loads(path.read_bytes()) == {"mean": 1.5}
    assert store.get_stats() == {"csv_files": 0, "json_files": 1, "checkpoints": 2}
