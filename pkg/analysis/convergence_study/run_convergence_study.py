#!/usr/bin/env python3
"""
Step-size sweep of the dual learning algorithm.

This script:
1. Loads a scenario and solves it exactly for reference
2. Runs the learning algorithm once per step size in a grid
3. Fits the slope of log distance-to-optimum against the iteration count
4. Exports a summary CSV (and optionally every trace) for plotting
"""

import argparse
import sys
import warnings
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from mechanism.errors import MechanismError, StepSizeTooLarge  # noqa: E402
from mechanism.learning import LearningConfig, build_price_set, learn, step_size_bounds  # noqa: E402
from mechanism.oracle import OracleConfig, solve_centralized  # noqa: E402
from mechanism.scenario import load_scenario  # noqa: E402
from mechanism.utils import logger  # noqa: E402

DEFAULT_SCENARIO = Path(__file__).parent.parent.parent / 'fixtures' / 'paper_example.json'


class ConvergenceStudy:
    """Run the learning algorithm over a grid of step sizes."""

    def __init__(self, scenario_path, iters=100, save_intermediates=True, output_dir='.'):
        self.scenario = load_scenario(scenario_path)
        self.inst = self.scenario.instance
        self.iters = iters
        self.save_intermediates = save_intermediates
        self.output_dir = Path(output_dir)
        self.timestamp = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
        self.results_df = None

        # Per-alpha traces for inspection
        self.intermediates = {}

        settings = self.scenario.learning
        self.prices = build_price_set(self.inst, settings.r_lo, settings.r_hi)
        self.reference = solve_centralized(self.inst, OracleConfig(tol=1e-11))
        self.strict, self.loose = step_size_bounds(self.inst, self.prices)
        logger.info(f"Step-size bounds: strict {self.strict:.4g}, loose {self.loose:.4g}")

    def default_grid(self):
        """Safe bounds plus a logarithmic grid up to the scenario's step size."""
        top = self.scenario.learning.config.alpha or 100 * self.strict
        grid = np.geomspace(self.strict, top, 8)
        return sorted(set(np.round(np.concatenate([[self.strict, self.loose], grid]), 12)))

    @staticmethod
    def _log_slope(dist):
        dist = np.asarray(dist, dtype=float)
        keep = dist > 1e-14
        if keep.sum() < 2:
            return np.nan
        return float(np.polyfit(np.flatnonzero(keep), np.log(dist[keep]), 1)[0])

    def run_one(self, alpha):
        """Learn with one step size and return its summary row."""
        cfg = LearningConfig(alpha=float(alpha), max_iters=self.iters)
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', StepSizeTooLarge)
            profile, trace = learn(self.inst, self.prices, cfg, reference=self.reference)

        frame = trace.to_frame()
        self.intermediates[f'trace_alpha_{alpha:.6g}'] = frame
        if self.save_intermediates:
            filename = self.output_dir / f"intermediate_trace_alpha_{alpha:.6g}_{self.timestamp}.csv"
            frame.to_csv(filename, index=False, float_format='%.12g')
            logger.info(f"Saved intermediate trace: {filename}")

        return {
            'alpha': float(alpha),
            'alpha_over_strict': float(alpha) / self.strict,
            'above_loose_bound': bool(alpha > self.loose),
            'iterations': len(trace) - 1,
            'initial_distance': trace.dist_to_opt[0],
            'final_distance': trace.dist_to_opt[-1],
            'log_distance_slope': self._log_slope(trace.dist_to_opt),
            'max_demand_gap': float(np.abs(profile.y - self.reference.x).max()),
            'final_dual_value': trace.dual_value[-1],
        }

    def run_sweep(self, alphas=None):
        alphas = self.default_grid() if alphas is None else alphas
        rows = []
        for alpha in alphas:
            logger.info(f"Running alpha = {alpha:.6g}")
            try:
                rows.append(self.run_one(alpha))
            except MechanismError as e:
                logger.error(f"alpha = {alpha:.6g} failed: {e}")
                rows.append({'alpha': float(alpha), 'error': str(e)})
        self.results_df = pd.DataFrame(rows)
        return self.results_df

    def validate_results(self):
        """Log which step sizes reached the optimum."""
        df = self.results_df
        if df is None or df.empty:
            logger.warning("No results to validate")
            return
        if 'final_distance' not in df:
            logger.warning("Every run failed")
            return
        converged = df['final_distance'] < 1e-3 * df['initial_distance']
        logger.info(f"{int(converged.sum())} of {len(df)} step sizes reduced the distance by 1000x")
        for _, row in df[~converged].iterrows():
            logger.warning(f"alpha = {row['alpha']:.6g}: final distance {row['final_distance']:.3e}")

    def export_to_csv(self, filename=None):
        if filename is None:
            filename = f"convergence_study_{datetime.now().strftime('%Y-%m-%d')}.csv"
        filepath = self.output_dir / filename
        self.results_df.to_csv(filepath, index=False, float_format='%.12g')
        logger.info(f"Exported {len(self.results_df)} rows to {filepath}")
        return filepath


def main():
    parser = argparse.ArgumentParser(description='Step-size sweep of the learning algorithm')
    parser.add_argument('scenario', nargs='?', default=str(DEFAULT_SCENARIO), help='Scenario JSON file')
    parser.add_argument('--alphas', type=float, nargs='+', help='Step sizes (default: generated grid)')
    parser.add_argument('--iters', type=int, default=100, help='Iterations per run (default: 100)')
    parser.add_argument('--output-dir', default='.', help='Directory for the CSV files')
    parser.add_argument('--no-intermediates', action='store_true', help='Skip per-alpha trace files')
    args = parser.parse_args()

    study = ConvergenceStudy(args.scenario, iters=args.iters,
                             save_intermediates=not args.no_intermediates, output_dir=args.output_dir)
    results = study.run_sweep(args.alphas)
    study.validate_results()
    csv_file = study.export_to_csv()

    print("\n" + "=" * 80)
    print("CONVERGENCE STUDY COMPLETE")
    print("=" * 80)
    print(f"\nResults exported to: {csv_file}")
    print(f"   Step sizes: {len(results)}")
    print(results.to_string(index=False, float_format=lambda v: f"{v:.4g}"))
    return study


if __name__ == "__main__":
    main()
