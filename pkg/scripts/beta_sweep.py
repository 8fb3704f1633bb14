"""Final cloud accuracy of the full method as the rectification coefficient beta varies."""
from _common import base_config, parser, write_csv

from safe_fl.config import CroSection
from safe_fl.federated import run_training


def main():
    p = parser(__doc__)
    p.add_argument("--betas", type=float, nargs="+", default=[0.0, 0.4, 0.6, 0.8, 1.0, 2.0])
    args = p.parse_args()
    cfg = base_config(args)
    rows = []
    for beta in args.betas:
        for s in range(args.seeds):
            last = run_training(cfg.replace(seed=cfg.seed + s, cro=CroSection(beta)))["rounds"][-1]
            rows.append([beta, cfg.seed + s, last["cloud_c_acc"], last["cloud_s_acc"]])
            print(*rows[-1])
    write_csv(args.out, ["beta", "seed", "cloud_c_acc", "cloud_s_acc"], rows)


if __name__ == "__main__":
    main()
