"""Command line front end.

    mhis run        --config cfg.json [--output-dir DIR]
    mhis calibrate  --config cfg.json [--output-dir DIR]
    mhis verify     [--models N] [--seed S]
    mhis chain-dump --config cfg.json [--out chain.csv]

Exit codes: 0 success, 1 bad configuration, 2 numerical failure,
3 verification failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .calibration import write_calibration_csv
from .core import ConfigError, NumericalError, RngStream
from .estimators import identity_functional
from .experiments import (
    ExperimentConfig,
    _calibrated_stepsize,
    _make_proposal,
    _problem_specs,
    run_experiment,
)
from .finite_verify import (
    random_finite_model,
    reversibility_asymmetry,
    two_state_uniform_model,
    verify_model,
)
from .sampler import run_ensemble, write_chain_csv

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_VERIFY = 3


def cmd_run(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    if args.output_dir is not None:
        config = dataclasses.replace(config, output_dir=args.output_dir)
    if config.output_dir is None:
        raise ConfigError("run needs output_dir (config field or --output-dir)")
    result = run_experiment(config)
    for label, state in result.calibration.items():
        print(f"calibrated {label}: s = {state.s_current:.6g} "
              f"(converged={state.converged})")
    for cell in result.cells:
        head = f"{cell.problem} {cell.proposal} s={cell.s:.6g}"
        print(f"{head}: acceptance {float(cell.acceptance.mean()):.3f}")
        for name in cell.values:
            agg = cell.aggregate(name)
            tail = f"var_total={agg['variance_total']:.6g}"
            if "rmse" in agg:
                tail += f", rmse={agg['rmse']:.6g}"
            print(f"  {name}: {tail}")
    print(f"wrote results to {config.output_dir}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    specs = _problem_specs(config)
    code = EXIT_OK
    for idx, spec in enumerate(specs):
        f = identity_functional(spec.target.dim)
        state = _calibrated_stepsize(config, spec, f, idx)
        print(f"{spec.label} ({config.proposal}): s = {state.s_current:.6g}, "
              f"J_f = {state.J_f_value:.6g}, J = {state.J_value:.6g}, "
              f"converged = {state.converged}")
        for it in state.history:
            print(f"  iter {it.iteration}: s={it.s:.6g} J_f={it.J_f:.6g} "
                  f"J={it.J:.6g} accept={it.acceptance_rate:.3f} g={it.g:.3g}")
        if args.output_dir is not None:
            Path(args.output_dir).mkdir(parents=True, exist_ok=True)
            path = f"{args.output_dir}/calibration_{spec.label}.csv"
            write_calibration_csv(state, path)
            print(f"  wrote {path}")
        if not state.converged:
            code = EXIT_NUMERICAL
    return code


def cmd_verify(args) -> int:
    """Structural checks on finite-state models.

    The uniform two-state model's augmented chain is genuinely not
    reversible; that single check is reported FAIL (expected) and does not
    fail the run.  A deliberately corrupted model must be caught, otherwise
    the suite itself is broken.
    """
    failures = 0

    print("== two-state uniform model ==")
    model = two_state_uniform_model()
    rng = RngStream(args.seed, 0).generator()
    for report in verify_model(model, rng):
        print(f"  {report}")
        if not report.passed:
            failures += 1
    asym = reversibility_asymmetry(model.K_aug, model.nu)
    expect_nonreversible = True  # documented: the augmented chain mixes in
    # the importance weight and detailed balance genuinely fails for it
    if asym > 0.05:
        print(f"  [FAIL (expected)] K_aug_reversibility: asymmetry={asym:.6g}"
              f" > 0.05 (expect_nonreversible={expect_nonreversible})")
    else:
        print(f"  [FAIL] K_aug unexpectedly near-reversible: "
              f"asymmetry={asym:.6g} <= 0.05")
        failures += 1

    print(f"== {args.models} random lazy models ==")
    rng = RngStream(args.seed, 1).generator()
    worst = 0.0
    for i in range(args.models):
        g = int(rng.integers(2, 9))
        m = random_finite_model(g, rng)
        for report in verify_model(m, rng):
            if not report.passed:
                failures += 1
                print(f"  model {i} (g={g}): {report}")
            for value in report.residuals.values():
                worst = max(worst, abs(value)) if value == value else worst
    print(f"  all models checked; worst |residual| tracked = {worst:.3g}")

    print("== mutant negative control ==")
    base = random_finite_model(4, RngStream(args.seed, 2).generator())
    k_bad = base.K.copy()
    k_bad[0, 0] += 1e-3
    mutant = dataclasses.replace(base, K=k_bad)
    caught = [r for r in verify_model(mutant, rng) if not r.passed]
    if caught:
        print(f"  corrupted kernel detected by {len(caught)} check(s)")
    else:
        print("  corrupted kernel NOT detected: verification suite is broken")
        failures += 1

    if failures:
        print(f"verification FAILED: {failures} unexpected failure(s)")
        return EXIT_VERIFY
    print("verification passed")
    return EXIT_OK


def cmd_chain_dump(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    if config.calibrate:
        raise ConfigError("chain-dump needs an explicit stepsize grid")
    spec = _problem_specs(config)[0]
    s = config.stepsizes[0]
    proposal = _make_proposal(config, spec, spec.target, s)
    rng = RngStream(config.seed, 0).generator()
    if spec.draw_initial:
        x0 = rng.standard_normal((1, spec.target.dim))
    else:
        x0 = spec.initial_state[None, :]
    ens = run_ensemble(spec.target, proposal, x0, config.n_steps, rng,
                       burn_in=config.burn_in)
    hist = ens.chain(0)
    Path(args.out).resolve().parent.mkdir(parents=True, exist_ok=True)
    write_chain_csv(hist, args.out)
    import numpy as np
    print(f"wrote {len(hist)} steps of {spec.label} ({config.proposal}, "
          f"s={s:.6g}) to {args.out}; acceptance "
          f"{float(np.mean(hist.accepted)):.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mhis")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured experiment grid")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--output-dir", default=None)
    p_run.set_defaults(fn=cmd_run)

    p_cal = sub.add_parser("calibrate", help="stepsize calibration only")
    p_cal.add_argument("--config", required=True)
    p_cal.add_argument("--output-dir", default=None)
    p_cal.set_defaults(fn=cmd_calibrate)

    p_ver = sub.add_parser("verify", help="finite-state structural checks")
    p_ver.add_argument("--models", type=int, default=100)
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.set_defaults(fn=cmd_verify)

    p_dump = sub.add_parser("chain-dump", help="dump one chain to CSV")
    p_dump.add_argument("--config", required=True)
    p_dump.add_argument("--out", default="chain.csv")
    p_dump.set_defaults(fn=cmd_chain_dump)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
