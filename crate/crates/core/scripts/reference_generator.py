#!/usr/bin/env python3
"""Example external generator for valsynth.

Writes an (N, 4, 17) tensor of weekly study minutes as tensor-json to
--save_path. The label being generated and the noised per-window zero
proportions arrive in SYNTH_LABEL and SYNTH_ZERO_PROPS; feedback lines from
the previous cycle arrive in SYNTH_FEEDBACK and are ignored here.
"""

import argparse
import json
import os
import random

CAPS = [300, 420, 300, 420]
WEEKS = 17
# (shape, scale) per window for each label
PARAMS = {
    "low": [(1.2, 20.0), (1.5, 25.0), (1.5, 22.0), (1.6, 30.0)],
    "average": [(1.2, 22.0), (1.5, 32.0), (1.5, 25.0), (1.8, 40.0)],
    "high": [(1.3, 25.0), (1.6, 40.0), (1.6, 27.0), (2.0, 52.0)],
}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--save_path", required=True)
    parser.add_argument("--num_samples", type=int, required=True)
    parser.add_argument("--seed", type=int, required=True)
    args = parser.parse_args()

    label = os.environ.get("SYNTH_LABEL", "average")
    zero = [float(x) for x in os.environ.get("SYNTH_ZERO_PROPS", "0.5,0.5,0.5,0.5").split(",")]
    rng = random.Random(args.seed)
    data = []
    for _ in range(args.num_samples):
        activity = rng.gammavariate(3.0, 1.0 / 3.0)
        for w in range(4):
            shape, scale = PARAMS[label][w]
            for _ in range(WEEKS):
                if rng.random() < zero[w]:
                    data.append(0)
                else:
                    minutes = round(rng.gammavariate(shape, scale) * activity)
                    data.append(min(max(minutes, 1), CAPS[w]))
    with open(args.save_path, "w") as f:
        json.dump({"shape": [args.num_samples, 4, WEEKS], "data": data}, f)


if __name__ == "__main__":
    main()
