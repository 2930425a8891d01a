"""Cooperative gain: the signature is only visible to the other vehicle."""

import argparse
import json
import logging

from motionq.experiments import cooperative

if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--count", type=int, default=2000)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    print(json.dumps(cooperative(args.seed, args.count), indent=1))
