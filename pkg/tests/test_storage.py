import json

import numpy as np
import pytest
import torch

from errors import ContractError, LoadError
from field import init_params
from models import EvalRow, EvalTable, FieldSpec, HistoryRecord, PathSpec, TrainHistory
from pathmodel import init_path_params
from storage import RunStorage, load_checkpoint, read_bundle, read_history
from transport_eval import TrajectoryBundle

FIELD = FieldSpec(input_dim=2, hidden_widths=[6, 4], time_embedding="sinusoidal", frequencies=2)
PATH = PathSpec(input_dim=2, hidden_widths=[5])


@pytest.fixture
def storage(tmp_path):
    return RunStorage().initialize(tmp_path / "run")


def _bundle(status="ok"):
    rng = np.random.default_rng(0)
    return TrajectoryBundle(times=np.linspace(0, 1, 4), states=rng.normal(size=(3, 4, 2)),
                            log_weights=rng.normal(size=(3, 4)), mode="ode", status=status)


class TestCheckpoints:
    def test_round_trip(self, storage):
        field, path = init_params(FIELD, 1), init_path_params(PATH, 2)
        target = storage.save_checkpoint(40, field, path)
        assert target.name == "checkpoint_40.wlf"
        loaded_field, loaded_path, step = load_checkpoint(target)
        assert step == 40
        assert loaded_field.spec == FIELD
        assert torch.equal(loaded_field.theta, field.theta)
        assert torch.equal(loaded_path.eta, path.eta)

    def test_field_only(self, storage):
        _, path, _ = load_checkpoint(storage.save_checkpoint(0, init_params(FIELD, 0)))
        assert path is None

    def test_latest_is_numeric(self, storage):
        field = init_params(FIELD, 0)
        for step in (9, 100, 20):
            storage.save_checkpoint(step, field)
        assert storage.latest_checkpoint().name == "checkpoint_100.wlf"

    def test_bad_magic(self, tmp_path):
        bad = tmp_path / "bad.wlf"
        bad.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(LoadError):
            load_checkpoint(bad)

    def test_truncated_payload(self, storage):
        target = storage.save_checkpoint(1, init_params(FIELD, 0))
        target.write_bytes(target.read_bytes()[:-8])
        with pytest.raises(LoadError):
            load_checkpoint(target)

    def test_missing_file(self, tmp_path):
        with pytest.raises(LoadError):
            load_checkpoint(tmp_path / "none.wlf")

    def test_uninitialized_storage(self):
        with pytest.raises(ContractError):
            RunStorage().path("x")


class TestRunFiles:
    def test_history_round_trip(self, storage):
        history = TrainHistory()
        for step in (10, 20):
            history.append(HistoryRecord(step=step, dual=0.1 * step, boundary=1.0 / 3.0, integrand=-0.25,
                                         grad_norm_field=1.5, grad_norm_path=0.0, seconds=0.01))
        assert read_history(storage.write_history(history)) == history

    def test_eval_table(self, storage):
        table = EvalTable(label="plain", rows=[EvalRow(held_out_index=1, held_out_time=0.5, seed=0,
                                                       w1_path=0.2, w1_simulated=0.3, w1_baseline=0.4)],
                          mean=0.2)
        target = storage.write_eval_table(table)
        lines = target.read_text().splitlines()
        assert lines[0].startswith("label,held_out_index")
        assert lines[1].startswith("plain,1,0.5,0")
        summary = json.loads(storage.path("eval_summary.json").read_text())
        assert summary["mean"] == 0.2
        assert "rows" not in summary

    def test_manifest(self, storage):
        target = storage.write_manifest("train", '{"a": 1}', seed=7, extra={"note": "x"})
        manifest = json.loads(target.read_text())
        assert manifest["seed"] == 7
        assert len(manifest["config_sha256"]) == 64
        assert manifest["note"] == "x"
        assert set(manifest["versions"]) >= {"numpy", "torch"}
        assert "previous" not in manifest

    def test_manifest_keeps_earlier_commands(self, storage):
        storage.write_manifest("train", "{}", seed=1)
        storage.write_manifest("simulate", "{}", seed=1)
        manifest = json.loads(storage.write_manifest("plot", "{}", seed=2).read_text())
        assert manifest["command"] == "plot"
        assert [m["command"] for m in manifest["previous"]] == ["train", "simulate"]
        assert all("previous" not in m for m in manifest["previous"])

    def test_bundle_binary_round_trip(self, storage):
        bundle = _bundle(status="blowup at step 3 (t=1.0000)")
        loaded = read_bundle(storage.write_bundle_binary(bundle))
        np.testing.assert_array_equal(loaded.states, bundle.states)
        np.testing.assert_array_equal(loaded.log_weights, bundle.log_weights)
        assert loaded.status == bundle.status

    def test_bundle_csv(self, storage):
        lines = storage.write_bundle(_bundle()).read_text().splitlines()
        assert lines[0] == "# mode=ode status=ok"
        assert lines[1] == "particle,step,t,x0,x1,log_weight"
        assert len(lines) == 2 + 3 * 4
