"""Experiment directory, content-hashed checkpoints and run records."""

import hashlib
import io
import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, List, Optional

import pytz
import torch
import torch.nn as nn

import config

logger = logging.getLogger(__name__)

# checkpoint kind -> CLI command that produces it
STAGE_COMMANDS = {
    "rvq": "train-rvq",
    "vae": "train-vae",
    "stage1": "train-stage1",
    "stage2": "train-stage2",
    "stage2_reasoner": "train-stage2",
    "evaluator": "train-evaluator",
}


class MissingCheckpointError(RuntimeError):
    """A stage needs a checkpoint that has not been produced yet."""

    def __init__(self, kind: str, directory: str):
        command = STAGE_COMMANDS.get(kind, kind)
        super().__init__(f"Missing '{kind}' checkpoint in {directory}; run '{command}' first")
        self.kind = kind


def weights_hash(module: nn.Module) -> str:
    """sha256 over parameter and buffer bytes in state_dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class RunRecorder:
    """Store checkpoints per run and run records per experiment root."""

    def __init__(self, experiment_root: Optional[str] = None, run_name: str = "default"):
        self.experiment_root = experiment_root or config.EXPERIMENT_ROOT
        self.run_name = run_name
        self.run_dir = os.path.join(self.experiment_root, "runs", run_name)
        self.checkpoint_dir = os.path.join(self.run_dir, "checkpoints")
        self.index_file = os.path.join(self.checkpoint_dir, "index.json")
        self.records_file = os.path.join(self.experiment_root, "run_records.json")
        self.writable = False
        self._init_local_storage()
        logger.info(f"RunRecorder initialized at {os.path.abspath(self.run_dir)}, writable: {self.writable}")

    def _init_local_storage(self):
        try:
            os.makedirs(self.checkpoint_dir, exist_ok=True)
            self.writable = True
        except Exception as e:
            logger.error(f"Experiment directory initialization failed: {e}")
            self.writable = False

    def artifact_path(self, filename: str) -> str:
        return os.path.join(self.run_dir, filename)

    # --- checkpoints ---

    def _load_index(self) -> Dict[str, Dict]:
        if os.path.exists(self.index_file):
            try:
                with open(self.index_file, 'r', encoding='utf-8') as f:
                    return json.load(f)
            except Exception as e:
                logger.error(f"Failed to read checkpoint index: {e}")
        return {}

    def _save_index(self, index: Dict[str, Dict]):
        with open(self.index_file, 'w', encoding='utf-8') as f:
            json.dump(index, f, indent=2, sort_keys=True)

    def save_checkpoint(self, kind: str, module: nn.Module, module_config: Dict,
                        extra: Optional[Dict[str, Any]] = None) -> str:
        """Serialize a module; the file name carries the first 12 hex digits of its sha256."""
        payload = {
            "format_version": config.CHECKPOINT_FORMAT_VERSION,
            "kind": kind,
            "config": module_config,
            "state_dict": module.state_dict(),
        }
        payload.update(extra or {})
        buffer = io.BytesIO()
        torch.save(payload, buffer)
        data = buffer.getvalue()
        digest = hashlib.sha256(data).hexdigest()[:12]
        filename = f"{kind}-{digest}.pt"
        path = os.path.join(self.checkpoint_dir, filename)
        with open(path, 'wb') as f:
            f.write(data)

        index = self._load_index()
        index[kind] = {
            "file": filename,
            "hash": digest,
            "saved_at": datetime.now(pytz.timezone(config.TIMEZONE)).isoformat(),
        }
        self._save_index(index)
        logger.info(f"Saved {kind} checkpoint {filename}")
        return path

    def has_checkpoint(self, kind: str) -> bool:
        entry = self._load_index().get(kind)
        return bool(entry) and os.path.exists(os.path.join(self.checkpoint_dir, entry["file"]))

    def load_checkpoint(self, kind: str, map_location: str = "cpu") -> Dict[str, Any]:
        """Load the latest checkpoint of a kind; raises MissingCheckpointError naming the stage."""
        if not self.has_checkpoint(kind):
            raise MissingCheckpointError(kind, self.checkpoint_dir)
        path = os.path.join(self.checkpoint_dir, self._load_index()[kind]["file"])
        payload = torch.load(path, map_location=map_location, weights_only=False)
        if payload.get("format_version") != config.CHECKPOINT_FORMAT_VERSION:
            logger.error(f"{path}: format version {payload.get('format_version')} is not "
                         f"{config.CHECKPOINT_FORMAT_VERSION}")
            raise MissingCheckpointError(kind, self.checkpoint_dir)
        return payload

    def checkpoint_hashes(self) -> Dict[str, str]:
        return {kind: entry["hash"] for kind, entry in self._load_index().items()}

    def save_artifact(self, filename: str, data: Dict) -> Optional[str]:
        """Best-effort JSON artifact next to the checkpoints."""
        path = self.artifact_path(filename)
        try:
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=2)
            return path
        except Exception as e:
            logger.error(f"Failed to write artifact {filename}: {e}")
            return None

    def load_artifact(self, filename: str) -> Optional[Dict]:
        path = self.artifact_path(filename)
        if not os.path.exists(path):
            return None
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)

    # --- run records ---

    def save_run(self, run_data: Dict) -> Optional[str]:
        """Append a completed run record. Returns its id or None if failed."""
        if not self.writable:
            logger.error("Cannot save run: storage is not writable")
            return None
        try:
            now = datetime.now(pytz.timezone(config.TIMEZONE))
            run_id = f"{now.strftime('%Y%m%d_%H%M%S_%f')}_{self.run_name}"
            record = {
                'id': run_id,
                'timestamp': now.isoformat(),
                'name': self.run_name,
                'paradigm': run_data.get('paradigm', ''),
                'vlm_mode': run_data.get('vlm_mode', ''),
                'condition_mode': run_data.get('condition_mode', 'full'),
                'seed': run_data.get('seed'),
                'config': run_data.get('config', {}),
                'checkpoints': self.checkpoint_hashes(),
                'report': run_data.get('report', {}),
                'latency_ms': float(run_data.get('latency_ms', 0.0)),
                'training_seconds': run_data.get('training_seconds', {}),
                'extra': run_data.get('extra', {}),
            }
            records = self._load_local_records()
            records.append(record)
            self._save_local_records(records)
            logger.info(f"Run recorded: {run_id}")
            return run_id
        except Exception as e:
            logger.error(f"Failed to save run: {e}")
            return None

    def get_all_runs(self, name: Optional[str] = None, paradigm: Optional[str] = None,
                     vlm_mode: Optional[str] = None, limit: Optional[int] = None) -> List[Dict]:
        """Get runs with optional filtering, newest first."""
        records = self._load_local_records()
        if name:
            records = [r for r in records if r.get('name') == name]
        if paradigm:
            records = [r for r in records if r.get('paradigm') == paradigm]
        if vlm_mode:
            records = [r for r in records if r.get('vlm_mode') == vlm_mode]
        records.sort(key=lambda x: x.get('timestamp', ''), reverse=True)
        if limit:
            records = records[:limit]
        return records

    def get_run_by_id(self, run_id: str) -> Optional[Dict]:
        for record in self._load_local_records():
            if record.get('id') == run_id:
                return record
        return None

    def delete_run(self, run_id: str) -> bool:
        records = self._load_local_records()
        remaining = [r for r in records if r.get('id') != run_id]
        if len(remaining) == len(records):
            return False
        self._save_local_records(remaining)
        logger.info(f"Deleted run record: {run_id}")
        return True

    def get_statistics(self) -> Dict:
        records = self.get_all_runs()
        stats = {
            'total_runs': len(records),
            'by_paradigm': {},
            'by_vlm_mode': {},
        }
        if not records:
            return stats
        stats['date_range'] = {'oldest': records[-1].get('timestamp'), 'newest': records[0].get('timestamp')}
        for record in records:
            paradigm = record.get('paradigm', 'Unknown')
            stats['by_paradigm'][paradigm] = stats['by_paradigm'].get(paradigm, 0) + 1
            mode = record.get('vlm_mode', 'Unknown')
            stats['by_vlm_mode'][mode] = stats['by_vlm_mode'].get(mode, 0) + 1
        return stats

    def _load_local_records(self) -> List[Dict]:
        if os.path.exists(self.records_file):
            try:
                with open(self.records_file, 'r', encoding='utf-8') as f:
                    return json.load(f)
            except Exception as e:
                logger.error(f"Failed to load run records: {e}")
                return []
        return []

    def _save_local_records(self, records: List[Dict]):
        try:
            os.makedirs(self.experiment_root, exist_ok=True)
            with open(self.records_file, 'w', encoding='utf-8') as f:
                json.dump(records, f, indent=2, ensure_ascii=False)
        except Exception as e:
            logger.error(f"Failed to save run records: {e}")
