"""Audit sampled parameters against the randomization table.

Generates samples on a tiny grid, collects every logged parameter from the
traces and compares ranges and gate firing rates with the configured values.

    python3 demos/audit_ranges.py --count 2000
"""

import argparse

from groupseg.audit import summarize
from groupseg.config import EngineConfig
from groupseg.core import GridSpec
from groupseg.engine import generate_sample
from groupseg.phantom import phantom_session


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--count", type=int, default=1000)
    args = parser.parse_args()

    config = EngineConfig.default().with_grid(GridSpec((12, 12, 12), (12.0, 12.0, 12.0), "LIA"))
    session = phantom_session(seed=0, shape=(32, 32, 32), spacing=(5.0, 5.0, 5.0))
    traces = [generate_sample(session, config, s).trace for s in range(args.count)]
    for name, row in summarize(traces, config).items():
        rng = f"[{row['min']:.3g}, {row['max']:.3g}] within {row['bounds']}" if "bounds" in row and row["count"] else ""
        gate = row.get("gate")
        rate = f"fired {gate['rate']:.3f} (p={gate['p']})" if gate else ""
        print(f"{name:28s} n={row['count']:6d} {rng:40s} {rate}")


if __name__ == "__main__":
    main()
