"""Structured run log for training and evaluation commands."""

import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional


class RunLogger:
    """Appends one JSON object per training event to a JSONL file."""

    def __init__(self, log_path: str, max_size_mb: int = 5):
        """
        Initialize run logger.

        Args:
            log_path: Path to the run log file
            max_size_mb: Maximum log file size in MB before rotation
        """
        self.log_path = Path(log_path).expanduser()
        self.max_size_bytes = max_size_mb * 1024 * 1024

        try:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            print(f"Warning: Could not create run log directory: {e}", file=sys.stderr)

    def log_epoch(self, repeat: int, epoch: int, lr: float, losses: Dict[str, float]) -> None:
        """
        Log the mean loss components of one epoch.

        Args:
            repeat: Protocol repeat index
            epoch: Epoch index within the repeat
            lr: Learning rate used for the epoch
            losses: Mean of each loss component over the epoch's batches
        """
        self._write({"event": "epoch", "repeat": repeat, "epoch": epoch, "lr": lr, **losses})

    def log_repeat(self, repeat: int, srcc: float, plcc: float) -> None:
        self._write({"event": "repeat", "repeat": repeat, "srcc": srcc, "plcc": plcc})

    def log_protocol(self, median_srcc: float, median_plcc: float, repeats: int) -> None:
        self._write(
            {
                "event": "protocol",
                "median_srcc": median_srcc,
                "median_plcc": median_plcc,
                "repeats": repeats,
            }
        )

    def log_error(self, command: str, message: str) -> None:
        self._write({"event": "error", "command": command, "message": message})

    def _write(self, entry: Dict[str, Any]) -> None:
        entry = {"timestamp": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"), **entry}
        self._append_entry(entry)
        self._rotate_if_needed()

    def _append_entry(self, entry: Dict[str, Any]) -> None:
        """Append an entry to the run log."""
        try:
            with open(self.log_path, "a", encoding="utf-8") as f:
                json.dump(entry, f, separators=(",", ":"))
                f.write("\n")
        except OSError as e:
            # A broken log must never stop training.
            print(f"Warning: Could not write to run log: {e}", file=sys.stderr)

    def _rotate_if_needed(self) -> None:
        """Rotate log file if it exceeds maximum size."""
        try:
            if self.log_path.exists() and self.log_path.stat().st_size > self.max_size_bytes:
                backup_path = self.log_path.with_suffix(self.log_path.suffix + ".1")
                if backup_path.exists():
                    backup_path.unlink()
                self.log_path.rename(backup_path)
        except OSError:
            pass

    def get_recent_entries(self, limit: int = 10, event: Optional[str] = None) -> List[Dict[str, Any]]:
        """
        Get recent run log entries.

        Args:
            limit: Maximum number of entries to return
            event: Only return entries of this event type

        Returns:
            List of recent log entries, oldest first
        """
        entries: List[Dict[str, Any]] = []
        try:
            if not self.log_path.exists():
                return entries
            with open(self.log_path, "r", encoding="utf-8") as f:
                lines = f.readlines()
        except OSError:
            return entries

        for line in lines:
            try:
                entry = json.loads(line.strip())
            except json.JSONDecodeError:
                continue
            if event is None or entry.get("event") == event:
                entries.append(entry)
        return entries[-limit:]
