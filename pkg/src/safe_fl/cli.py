"""Command line: ``safe run``, ``safe partition`` and ``safe compare``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, Toggles, load_config
from .data import partition_pipeline
from .federated import RoundError, run_training

log = logging.getLogger("safe_fl")

BASE_COLUMNS = ["round", "eps_plus", "eps_minus", "tau", "cloud_c_acc", "cloud_s_acc",
                "mean_client_c_acc", "mean_client_s_acc", "ratio_cosine"]


def csv_columns(num_clients: int) -> list[str]:
    return BASE_COLUMNS + [f"d_cka_{i}" for i in range(num_clients)]


def record_row(rec: dict) -> list:
    return [rec[c] for c in BASE_COLUMNS] + list(rec["d_cka"])


def write_rounds_csv(report: dict, path) -> None:
    k = report["config"]["clients"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(csv_columns(k))
        for rec in report["rounds"]:
            w.writerow([repr(v) if isinstance(v, float) else v for v in record_row(rec)])


def read_rounds_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "round" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_training(cfg)
    _write_json(report, out / "report.json")
    write_rounds_csv(report, out / "rounds.csv")
    last = report["rounds"][-1]
    print(f"rounds={cfg.rounds} cloud_c_acc={last['cloud_c_acc']:.4f} cloud_s_acc={last['cloud_s_acc']:.4f} "
          f"-> {out}")
    return 0


def partition_summary(cfg: RunConfig) -> dict:
    ses, imbalanced, parts = partition_pipeline(cfg.data_config())
    counts = np.stack([p.dis for p in parts])
    totals = imbalanced.histogram()
    return {
        "clients": cfg.clients,
        "classes": cfg.data.classes,
        "per_client_counts": counts.tolist(),
        "class_totals": totals.tolist(),
        "config_class_totals": counts.sum(axis=0).tolist(),
        "achieved_imbalance_ratio": float(totals.max() / totals.min()),
        "ses_per_class": ses.per_class,
    }


def cmd_partition(args) -> int:
    cfg = load_config(args.config, args.set)
    summary = partition_summary(cfg)
    counts = np.asarray(summary["per_client_counts"])
    header = "class " + " ".join(f"c{k:>5d}" for k in range(cfg.clients)) + "  total"
    print(header)
    for j in range(cfg.data.classes):
        print(f"{j:5d} " + " ".join(f"{v:6d}" for v in counts[:, j]) + f" {counts[:, j].sum():6d}")
    print(f"achieved imbalance ratio {summary['achieved_imbalance_ratio']:.3f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(summary, out / "partition.json")
    return 0


FINAL_KEYS = ("cloud_c_acc", "cloud_s_acc", "mean_client_c_acc", "mean_client_s_acc")


def compare(cfg: RunConfig, seeds: int) -> dict:
    arms = {"fedavg": Toggles.off(), "safe": Toggles()}
    result = {"seeds": [cfg.seed + i for i in range(seeds)], "arms": {}}
    for name, toggles in arms.items():
        per_seed = []
        for s in result["seeds"]:
            report = run_training(cfg.replace(seed=s, toggles=toggles))
            final = report["rounds"][-1]
            per_seed.append({"seed": s, **{k: final[k] for k in FINAL_KEYS},
                             "train_class_counts": report["train_class_counts"]})
        summary = {}
        for k in FINAL_KEYS:
            vals = np.array([r[k] for r in per_seed])
            summary[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
        result["arms"][name] = {"per_seed": per_seed, "summary": summary}
    return result


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seeds < 1:
        raise ConfigError("--seeds", "must be >= 1")
    result = compare(cfg, args.seeds)
    print(f"{'arm':8s} " + " ".join(f"{k:>22s}" for k in FINAL_KEYS))
    for name, arm in result["arms"].items():
        cells = [f"{arm['summary'][k]['mean']:.4f} ± {arm['summary'][k]['std']:.4f}" for k in FINAL_KEYS]
        print(f"{name:8s} " + " ".join(f"{c:>22s}" for c in cells))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(result, out / "compare.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safe", description="Self-adjusting federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (("run", cmd_run, "run one experiment"),
                            ("partition", cmd_partition, "preview the client partition"),
                            ("compare", cmd_compare, "FedAvg vs SAFE over several seeds")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", default=".")
        if name == "compare":
            p.add_argument("--seeds", type=int, default=1)
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return 2
    except RoundError as e:
        print(f"run failed at {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
