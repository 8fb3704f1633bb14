"""Per-round cosine between the measured CR vector and the true inverse class frequency."""
from _common import base_config, parser, write_csv

from safe_fl.federated import run_training


def main():
    args = parser(__doc__).parse_args()
    cfg = base_config(args)
    rows = []
    for s in range(args.seeds):
        for rec in run_training(cfg.replace(seed=cfg.seed + s))["rounds"]:
            rows.append([cfg.seed + s, rec["round"], rec["ratio_cosine"]] + rec["cr_tilde"])
        print(f"seed {cfg.seed + s}: round 2 {rows[-cfg.rounds + 1][2]:.3f}, final {rows[-1][2]:.3f}")
    header = ["seed", "round", "ratio_cosine"] + [f"cr_{j}" for j in range(cfg.data.classes)]
    write_csv(args.out, header, rows)


if __name__ == "__main__":
    main()
