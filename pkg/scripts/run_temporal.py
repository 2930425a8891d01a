"""Temporal necessity: signature only in frame 1, compared with a frame-5-only model."""

import argparse
import json
import logging

from motionq.experiments import temporal

if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=2)
    parser.add_argument("--count", type=int, default=2000)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    print(json.dumps(temporal(args.seed, args.count), indent=1))
