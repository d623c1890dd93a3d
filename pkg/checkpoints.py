# checkpoints.py
"""Checkpoint directories and CSV loss logs.

Layout under a run's checkpoint root::

    epoch_0001/
        generator.bin ...   torch state_dicts, one per network
        optim.bin           optimizer + RNG state for exact resume
        state.txt           key=value header
"""
from __future__ import annotations

import logging
import os
import re
import shutil
import tempfile
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import pandas as pd
import torch
import torch.nn as nn

from errors import CheckpointError

logger = logging.getLogger(__name__)

STATE_FILE = "state.txt"
EXTRA_FILE = "optim.bin"
_EPOCH_DIR = re.compile(r"^epoch_(\d{4,})$")
LOG_COLUMNS = ["epoch", "phase", "loss_name", "value"]


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}"


def write_state(path, entries: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key, value in entries.items():
            f.write(f"{key}={value}\n")


def read_header(directory) -> Dict[str, str]:
    path = Path(directory) / STATE_FILE
    if not path.is_file():
        raise CheckpointError(f"{directory} has no {STATE_FILE}")
    header = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointError(f"malformed line in {path}: {line!r}")
            header[key] = value
    return header


def write_checkpoint(
    root,
    epoch: int,
    networks: Mapping[str, nn.Module],
    header: Mapping[str, object],
    extra: Optional[dict] = None,
) -> Path:
    """Write every network plus the header atomically (temp dir, then rename)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    final = root / checkpoint_name(epoch)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=root))
    try:
        for name, net in networks.items():
            torch.save(net.state_dict(), tmp / f"{name}.bin")
        if extra is not None:
            torch.save(extra, tmp / EXTRA_FILE)
        write_state(tmp / STATE_FILE, {**header, "epoch": epoch})
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except Exception as e:
        shutil.rmtree(tmp, ignore_errors=True)
        raise CheckpointError(f"writing checkpoint {final} failed: {e}") from e
    logger.info("wrote checkpoint %s", final)
    return final


def check_network_hash(directory, expected: str, key: str = "network_hash") -> Dict[str, str]:
    header = read_header(directory)
    found = header.get(key)
    if found != expected:
        raise CheckpointError(
            f"checkpoint {directory} was written for {key} {found}, config has {expected}"
        )
    return header


def load_networks(directory, networks: Mapping[str, nn.Module], expected_hash: Optional[str] = None) -> Dict[str, str]:
    """Load state_dicts into ``networks`` in place and return the header."""
    directory = Path(directory)
    header = check_network_hash(directory, expected_hash) if expected_hash else read_header(directory)
    for name, net in networks.items():
        path = directory / f"{name}.bin"
        if not path.is_file():
            raise CheckpointError(f"checkpoint {directory} has no {name}.bin")
        try:
            net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        except Exception as e:
            raise CheckpointError(f"loading {path} failed: {e}") from e
    return header


def load_extra(directory) -> Optional[dict]:
    path = Path(directory) / EXTRA_FILE
    if not path.is_file():
        return None
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"loading {path} failed: {e}") from e


def list_checkpoints(root) -> List[Path]:
    root = Path(root)
    if not root.is_dir():
        return []
    dirs = [p for p in root.iterdir() if p.is_dir() and _EPOCH_DIR.match(p.name)]
    return sorted(dirs, key=lambda p: int(_EPOCH_DIR.match(p.name).group(1)))


def latest_checkpoint(root) -> Optional[Path]:
    found = list_checkpoints(root)
    return found[-1] if found else None


class LossLog:
    """Append-only CSV of (epoch, phase, loss_name, value) rows."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, epoch: int, phase: int, losses) -> pd.DataFrame:
        values = losses.scalars() if hasattr(losses, "scalars") else {k: float(v) for k, v in losses.items()}
        rows = pd.DataFrame(
            [(epoch, phase, name, value) for name, value in sorted(values.items())], columns=LOG_COLUMNS
        )
        rows.to_csv(self.path, mode="a", header=not self.path.exists(), index=False)
        return rows

    def read(self) -> pd.DataFrame:
        if not self.path.exists():
            return pd.DataFrame(columns=LOG_COLUMNS)
        return pd.read_csv(self.path)

    def truncate_after(self, epoch: int) -> None:
        """Drop rows past ``epoch``, used when a run resumes from that epoch."""
        if not self.path.exists():
            return
        df = self.read()
        df[df["epoch"] <= epoch].to_csv(self.path, index=False)
