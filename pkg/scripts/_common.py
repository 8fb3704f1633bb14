"""Shared argument handling for the experiment scripts."""
from __future__ import annotations

import argparse
import csv
from pathlib import Path

from safe_fl.config import load_config

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "default.json"


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", default=str(DEFAULT_CONFIG))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", required=True, help="CSV file to write")
    return p


def base_config(args):
    return load_config(args.config, args.set)


def write_csv(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
