"""
Command-line entry point.

    python -m mechanism.cli solve fixtures/paper_example.json
    python -m mechanism.cli ne fixtures/paper_example.json --profile-out ne.json
    python -m mechanism.cli verify fixtures/paper_example.json ne.json
    python -m mechanism.cli dist-ne fixtures/paper_example.json
    python -m mechanism.cli learn fixtures/paper_example.json --alpha 0.1 --iters 100 --trace trace.csv

Exit codes: 0 when every check passes, 1 on a failed verification or a
numerical failure, 2 on invalid input.
"""

import argparse
import sys
import warnings
from dataclasses import replace
from typing import List, Optional, Sequence, TextIO, Tuple

import numpy as np
import pandas as pd

from mechanism import __version__
from mechanism.errors import InputError, MechanismError, ScenarioError
from mechanism.learning import LearningConfig, build_price_set, learn
from mechanism.mech_central import (
    NeConfig,
    budget_report,
    check_ir,
    construct_ne,
    price_decomposition,
    tax_breakdown,
    verify_ne,
)
from mechanism.mech_dist import (
    budget_report_dist,
    check_ir_dist,
    check_summary_consistency,
    construct_ne_dist,
    neighborhood_slice,
    tax_dist,
    verify_ne_dist,
)
from mechanism.messages import CentralMessageProfile
from mechanism.oracle import OracleConfig, solve_centralized
from mechanism.scenario import Scenario, load_profile, load_scenario, save_profile
from mechanism.utils import get_settings, logger, set_log_level

Section = Tuple[str, pd.DataFrame]

# Rebated balance is (N-1) times the complementary slackness residual of the oracle
BUDGET_TOL = 1e-6
# Largest demand gap to the oracle optimum for a learning run to pass
LEARN_GAP_TOL = 1e-3


def _render(sections: Sequence[Section], fmt: str, out: TextIO) -> None:
    for k, (title, frame) in enumerate(sections):
        if fmt == 'csv':
            out.write(f"# {title}\n")
            frame.to_csv(out, index=False, float_format='%.12g')
        else:
            if k:
                out.write("\n")
            out.write(f"== {title} ==\n")
            out.write(frame.to_string(index=False, float_format=lambda v: f"{v:.10g}"))
            out.write("\n")


def _status(name: str, passed: bool, detail: str) -> dict:
    return {'check': name, 'passed': bool(passed), 'detail': detail}


def _oracle(scenario: Scenario):
    return solve_centralized(scenario.instance, OracleConfig.from_settings())


def _ne_config(args) -> NeConfig:
    cfg = replace(NeConfig.from_settings(), seed=args.seed)
    if args.samples is not None:
        cfg = replace(cfg, deviation_samples=args.samples)
    return cfg


def _deviation_frame(report) -> pd.DataFrame:
    worst = report.worst
    rows = [{'user': worst.user + 1, 'coordinate': worst.label, 'current': worst.current,
             'best_response': worst.best_response, 'improvement': worst.improvement}]
    for u in report.users:
        if u.max_sample_improvement > report.tol and u.worst_sample is not None:
            rows.append({'user': u.user + 1, 'coordinate': 'joint_random', 'current': np.nan,
                         'best_response': np.nan, 'improvement': u.max_sample_improvement})
    return pd.DataFrame(rows)


def cmd_solve(args, scenario: Scenario) -> Tuple[List[Section], bool]:
    sol = _oracle(scenario)
    return [('solution', sol.to_frame()), ('kkt', sol.report.to_frame())], sol.report.passed


def cmd_ne(args, scenario: Scenario) -> Tuple[List[Section], bool]:
    inst = scenario.instance
    sol = _oracle(scenario)
    m = construct_ne(inst, sol)
    if args.profile_out:
        save_profile(args.profile_out, m)
    ne = verify_ne(inst, m, _ne_config(args))
    budget = budget_report(inst, m)
    ir = check_ir(inst, m)
    taxes = pd.DataFrame([tax_breakdown(inst, m, i).as_row() for i in range(inst.n_users)])
    summary = pd.DataFrame([
        _status('nash_equilibrium', ne.passed, f"max improvement {ne.max_improvement:.3e}"),
        _status('budget_balance', abs(budget.rebated) <= BUDGET_TOL, f"rebated balance {budget.rebated:.3e}"),
        _status('individual_rationality', ir.passed,
                f"min margin {min(r.margin for r in ir.records):.6g}"),
    ])
    sections = [('prices', price_decomposition(inst, m)), ('taxes', taxes),
                ('budget', budget.to_frame()), ('individual_rationality', ir.to_frame()),
                ('summary', summary)]
    return sections, bool(summary['passed'].all())


def cmd_verify(args, scenario: Scenario) -> Tuple[List[Section], bool]:
    inst = scenario.instance
    m = load_profile(args.profile, inst)
    if isinstance(m, CentralMessageProfile):
        report = verify_ne(inst, m, _ne_config(args))
    else:
        if scenario.network is None:
            raise ScenarioError("A distributed profile needs a scenario with a network block")
        report = verify_ne_dist(inst, scenario.network, m, _ne_config(args))
    summary = pd.DataFrame([_status('nash_equilibrium', report.passed,
                                    f"max improvement {report.max_improvement:.3e} (tol {report.tol:g})")])
    sections = [('summary', summary)]
    if not report.passed:
        sections.insert(0, ('improving_deviation', _deviation_frame(report)))
    return sections, report.passed


def cmd_dist_ne(args, scenario: Scenario) -> Tuple[List[Section], bool]:
    inst, net = scenario.instance, scenario.network
    if net is None:
        raise ScenarioError("dist-ne needs a scenario with a network block")
    sol = _oracle(scenario)
    m = construct_ne_dist(inst, net, sol)
    if args.profile_out:
        save_profile(args.profile_out, m)
    taxes = pd.DataFrame([tax_dist(inst, net, neighborhood_slice(net, m, i)).as_row()
                          for i in range(inst.n_users)])
    consistency = check_summary_consistency(inst, net, m, sol.x)
    ne = verify_ne_dist(inst, net, m, _ne_config(args))
    budget = budget_report_dist(inst, net, m)
    ir = check_ir_dist(inst, net, m)
    summary = pd.DataFrame([
        _status('nash_equilibrium', ne.passed, f"max improvement {ne.max_improvement:.3e}"),
        _status('summary_consistency', consistency.passed, f"max residual {consistency.max_residual:.3e}"),
        _status('budget_balance', abs(budget.rebated) <= BUDGET_TOL, f"rebated balance {budget.rebated:.3e}"),
        _status('individual_rationality', ir.passed,
                f"min margin {min(r.margin for r in ir.records):.6g}"),
    ])
    sections = [('taxes', taxes), ('summary_consistency', consistency.to_frame()),
                ('budget', budget.to_frame()), ('individual_rationality', ir.to_frame()),
                ('summary', summary)]
    return sections, bool(summary['passed'].all())


def cmd_learn(args, scenario: Scenario) -> Tuple[List[Section], bool]:
    inst = scenario.instance
    settings = scenario.learning
    cfg = settings.config
    cfg = LearningConfig(
        alpha=args.alpha if args.alpha is not None else cfg.alpha,
        max_iters=args.iters if args.iters is not None else cfg.max_iters,
        stop_tol=args.stop_tol if args.stop_tol is not None else cfg.stop_tol,
    )
    P = build_price_set(inst, settings.r_lo, settings.r_hi)
    reference = _oracle(scenario)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always')
        profile, trace = learn(inst, P, cfg, reference=reference)
    for w in caught:
        logger.warning(str(w.message))
    frame = trace.to_frame()
    if args.trace:
        frame.to_csv(args.trace, index=False, float_format='%.12g')
        logger.info(f"Wrote {len(frame)} trace rows to {args.trace}")
    gap = float(np.abs(profile.y - reference.x).max())
    passed = gap <= args.gap_tol
    final = pd.DataFrame([{'alpha': trace.alpha, 'iterations': len(trace) - 1,
                           'stop_reason': trace.stop_reason, 'dist_to_opt': trace.dist_to_opt[-1],
                           'max_demand_gap': gap, 'passed': passed}])
    return [('learning', final)], passed


COMMANDS = {
    'solve': cmd_solve,
    'ne': cmd_ne,
    'verify': cmd_verify,
    'dist-ne': cmd_dist_ne,
    'learn': cmd_learn,
}


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(
        prog='mechanism',
        description='Demand-management mechanisms for energy communities'
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument(
        '--seed',
        type=int,
        default=settings.seed,
        help=f'Seed for randomized checks (default: {settings.seed})'
    )
    parser.add_argument(
        '--format',
        choices=['text', 'csv'],
        default='text',
        help='Report format (default: text)'
    )
    parser.add_argument('--output', help='Write the report to this file instead of stdout')
    parser.add_argument('--log-level', help='Override MECHANISM_LOG_LEVEL')

    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('solve', help='Solve the community problem and check KKT')
    p.add_argument('scenario', help='Scenario JSON file')

    p = sub.add_parser('ne', help='Construct and verify the centralized equilibrium')
    p.add_argument('scenario', help='Scenario JSON file')
    p.add_argument('--profile-out', help='Save the equilibrium profile as JSON')
    p.add_argument('--samples', type=int, help='Random joint deviations per user')

    p = sub.add_parser('verify', help='Check a saved message profile for profitable deviations')
    p.add_argument('scenario', help='Scenario JSON file')
    p.add_argument('profile', help='Message profile JSON file')
    p.add_argument('--samples', type=int, help='Random joint deviations per user')

    p = sub.add_parser('dist-ne', help='Construct and verify the distributed equilibrium')
    p.add_argument('scenario', help='Scenario JSON file with a network block')
    p.add_argument('--profile-out', help='Save the equilibrium profile as JSON')
    p.add_argument('--samples', type=int, help='Random joint deviations per user')

    p = sub.add_parser('learn', help='Run the dual learning algorithm')
    p.add_argument('scenario', help='Scenario JSON file')
    p.add_argument('--alpha', type=float, help='Step size (default: scenario, then the safe bound)')
    p.add_argument('--iters', type=int, help='Iteration count (default: scenario, then 100)')
    p.add_argument('--stop-tol', type=float, help='Stop when an iteration moves less than this')
    p.add_argument('--trace', help='Write the per-iteration trace as CSV')
    p.add_argument(
        '--gap-tol',
        type=float,
        default=LEARN_GAP_TOL,
        help=f'Largest demand gap to the optimum that passes (default: {LEARN_GAP_TOL:g})'
    )
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.log_level:
        set_log_level(args.log_level)

    try:
        scenario = load_scenario(args.scenario)
        sections, passed = COMMANDS[args.command](args, scenario)
        if args.output:
            with open(args.output, 'w', encoding='utf-8') as f:
                _render(sections, args.format, f)
            logger.info(f"Wrote report to {args.output}")
        else:
            _render(sections, args.format, sys.stdout)
    except InputError as e:
        logger.error(f"Invalid input: {e}")
        return 2
    except OSError as e:
        logger.error(f"File error: {e}")
        return 2
    except MechanismError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1

    if not passed:
        logger.error(f"{args.command}: verification failed")
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(run())
