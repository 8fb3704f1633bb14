"""First two principal components of the global and client parameter vectors, per round."""
from _common import base_config, parser, write_csv

from safe_fl.federated import run_training


def main():
    args = parser(__doc__).parse_args()
    cfg = base_config(args).replace(track_trajectory=True)
    rep = run_training(cfg)
    rows = []
    for rnd, points in enumerate(rep["trajectory"]):
        for m, (pc1, pc2) in enumerate(points):
            rows.append([rnd, "global" if m == 0 else f"client_{m - 1}", pc1, pc2])
    write_csv(args.out, ["round", "model", "pc1", "pc2"], rows)
    print(f"{len(rows)} points written to {args.out}")


if __name__ == "__main__":
    main()
