"""Single-vehicle learnability: signature visible to the ego vehicle."""

import argparse
import json
import logging

from motionq.experiments import learnability

if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--count", type=int, default=2000)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    print(json.dumps(learnability(args.seed, args.count), indent=1))
