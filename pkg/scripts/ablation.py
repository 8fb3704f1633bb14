"""Final cloud accuracies for each mechanism combination, one row per (arm, seed)."""
from _common import base_config, parser, write_csv

from safe_fl.config import Toggles
from safe_fl.federated import run_training

ARMS = {
    "base": Toggles.off(),
    "base+fau": Toggles(cro=False, fau=True, dmr=False, ace=False),
    "base+fau+cro": Toggles(cro=True, fau=True, dmr=False, ace=False),
    "base+fau+cro+dmr": Toggles(cro=True, fau=True, dmr=True, ace=False),
    "full": Toggles(),
}


def main():
    args = parser(__doc__).parse_args()
    cfg = base_config(args)
    rows = []
    for arm, toggles in ARMS.items():
        for s in range(args.seeds):
            last = run_training(cfg.replace(seed=cfg.seed + s, toggles=toggles))["rounds"][-1]
            rows.append([arm, cfg.seed + s, last["cloud_c_acc"], last["cloud_s_acc"]])
            print(*rows[-1])
    write_csv(args.out, ["arm", "seed", "cloud_c_acc", "cloud_s_acc"], rows)


if __name__ == "__main__":
    main()
