import hashlib
import os

import pytest
import torch

from run_recorder import MissingCheckpointError, RunRecorder, weights_hash


@pytest.fixture
def recorder(tmp_path):
    return RunRecorder(experiment_root=str(tmp_path), run_name="unit")


def test_checkpoint_file_named_by_content_hash(recorder):
    torch.manual_seed(0)
    path = recorder.save_checkpoint("vae", torch.nn.Linear(3, 2), {"latent_dim": 2})
    with open(path, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()[:12]
    assert os.path.basename(path) == f"vae-{digest}.pt"
    assert recorder.checkpoint_hashes() == {"vae": digest}


def test_checkpoint_round_trip(recorder):
    module = torch.nn.Linear(3, 2)
    recorder.save_checkpoint("rvq", module, {"levels": 6}, extra={"normalizer": {"mean": [0.0]}})
    payload = recorder.load_checkpoint("rvq")
    assert payload["kind"] == "rvq" and payload["config"] == {"levels": 6}
    assert payload["normalizer"] == {"mean": [0.0]}
    restored = torch.nn.Linear(3, 2)
    restored.load_state_dict(payload["state_dict"])
    assert weights_hash(restored) == weights_hash(module)


def test_missing_checkpoint_names_the_command(recorder):
    assert not recorder.has_checkpoint("stage1")
    with pytest.raises(MissingCheckpointError, match="train-stage1"):
        recorder.load_checkpoint("stage1")


def test_weights_hash_tracks_values():
    torch.manual_seed(0)
    module = torch.nn.Linear(4, 4)
    before = weights_hash(module)
    assert before == weights_hash(module)
    with torch.no_grad():
        module.bias[0] += 1e-3
    assert weights_hash(module) != before


def test_artifacts(recorder):
    assert recorder.load_artifact("report.json") is None
    recorder.save_artifact("report.json", {"fid": 1.0})
    assert recorder.load_artifact("report.json") == {"fid": 1.0}


def test_run_records(recorder, tmp_path):
    first = recorder.save_run({"paradigm": "ar", "vlm_mode": "two_stage", "report": {"fid": 2.0}, "latency_ms": 3})
    other = RunRecorder(experiment_root=str(tmp_path), run_name="other")
    second = other.save_run({"paradigm": "masked", "vlm_mode": "joint"})
    assert first and second
    assert recorder.get_run_by_id(first)["report"] == {"fid": 2.0}
    assert [r["id"] for r in recorder.get_all_runs(paradigm="masked")] == [second]
    assert len(recorder.get_all_runs(name="unit")) == 1
    stats = recorder.get_statistics()
    assert stats["total_runs"] == 2
    assert stats["by_vlm_mode"] == {"two_stage": 1, "joint": 1}
    assert recorder.delete_run(first)
    assert not recorder.delete_run(first)
    assert recorder.get_run_by_id(first) is None
