# per-output-directory record of training loss curves
import json
from pathlib import Path
from typing import Any, Dict, Optional

from filelock import FileLock

from datamodels import StepReport
from storage import atomic_write_bytes

LEDGER_FILE = "run_ledger.json"


class RunLedger:
    """
    Locked JSON ledger next to a command's outputs.

    Entries depend only on what was computed, so repeating a run leaves the
    file byte-identical.
    """

    def __init__(self, out_dir: Path):
        """
        Initialize ledger.

        Args:
            out_dir: Directory holding the command outputs
        """
        self.json_file = Path(out_dir) / LEDGER_FILE
        # atomic_write_bytes holds <file>.lock itself
        self.lock_file = Path(out_dir) / "run_ledger.update.lock"

    def _read(self) -> Dict[str, Any]:
        """Read JSON file safely."""
        try:
            data = json.loads(self.json_file.read_text())
        except (json.JSONDecodeError, FileNotFoundError):
            data = {}
        if not isinstance(data, dict):
            data = {}
        data.setdefault("runs", {})
        return data

    def _write(self, data: Dict[str, Any]) -> None:
        atomic_write_bytes(self.json_file, json.dumps(data, indent=2, sort_keys=True).encode("utf-8"))

    def record_curve(self, run: str, reports: list[StepReport], summary: Optional[Dict[str, Any]] = None) -> None:
        """
        Store the logged loss curve of a training run.

        Args:
            run: Run name (the checkpoint file name)
            reports: Logged step reports, in step order
            summary: Extra fields (seed, steps, attachment)
        """
        self.json_file.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(self.lock_file), timeout=10):
            data = self._read()
            data["runs"][run] = {
                "curve": [r.model_dump() for r in reports],
                "summary": summary or {},
            }
            self._write(data)

    def get_run(self, run: str) -> Optional[Dict[str, Any]]:
        if not self.json_file.exists():
            return None
        with FileLock(str(self.lock_file), timeout=10):
            return self._read()["runs"].get(run)
