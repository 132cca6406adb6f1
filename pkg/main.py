"""
Off-Policy Average-Reward Estimation - Main Entry Point

This script dispatches the command-line workflow for estimating the long-run average
reward of target policies from batch trajectory data.

WORKFLOW:
1. Module 0: Load / validate trajectory CSVs, resolve policies, load estimator config
2. Module 1: Build the delta-action Gaussian kernel (median-heuristic bandwidth)
3. Module 2: Fit the coupled projected-Bellman-error estimator (eta_hat, Q_hat)
4. Module 3: Select (lambda, mu) by validation Bellman error
5. Module 4: Fit direction functions, build Sigma_hat, CIs and contrasts
6. Module 5: Simulate the benchmark model or finite MDPs; compute oracle values
7. Module 6: Run the Monte-Carlo coverage study
8. Module 7: Command-line parsing and exit codes

DATA FLOW:
simulate → CSV (id, t, s_1..s_d, a, r, sp_1..sp_d)
         ↓
evaluate → Module 0 → Module 1 → Module 3 → Module 2 (refit) → Module 4 → JSON
         ↓
coverage → Module 5 (simulate) → evaluate pipeline per replication → Module 6 → JSON / CSV / TXT

USAGE:
    python main.py simulate --model luckett --n 25 --t 50 --seed 7 --out output/data.csv
    python main.py evaluate --data output/data.csv --policy always --policy never --seed 1 --out output/result.json
    python main.py coverage --config data/config/config_coverage_smoke.json --out output/coverage
"""

import sys

from modules.module7_cli import main


if __name__ == '__main__':
    sys.exit(main())
