"""Final cloud accuracy of the full method as the FAU period varies."""
from _common import base_config, parser, write_csv

from safe_fl.federated import run_training


def main():
    p = parser(__doc__)
    p.add_argument("--periods", type=int, nargs="+", default=[1, 2, 3, 5, 10])
    args = p.parse_args()
    cfg = base_config(args)
    rows = []
    for period in args.periods:
        for s in range(args.seeds):
            last = run_training(cfg.replace(seed=cfg.seed + s, fau_period=period))["rounds"][-1]
            rows.append([period, cfg.seed + s, last["cloud_c_acc"], last["cloud_s_acc"]])
            print(*rows[-1])
    write_csv(args.out, ["fau_period", "seed", "cloud_c_acc", "cloud_s_acc"], rows)


if __name__ == "__main__":
    main()
