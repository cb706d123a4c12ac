"""Config-driven replicated experiments.

For each stepsize and each replicate chain, every requested estimator is
computed from the same chain realization, and the runner verifies that the
target density was evaluated exactly n_steps + burn_in times per chain
(one fused likelihood-plus-prior evaluation per proposal; the initial
state's evaluation is tracked separately, and the mixture estimator's
extra proposal-density evaluations involve p only).

Replicates run in lock step as vectorized blocks of at most 125 chains.
Each (cell, block) pair owns a fixed random stream, so results are byte
identical for a given config and seed no matter how many worker threads
execute the blocks.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .calibration import CalibrationConfig, CalibrationState, calibrate_stepsize
from .core import (
    ConfigError,
    NumericalError,
    ProposalKernel,
    RngStream,
    TargetDensity,
    gaussian_rw_proposal,
    mala_proposal,
)
from .estimators import (
    EstimateReport,
    Functional,
    estimate_A,
    estimate_B,
    estimate_S,
    estimate_WR,
    estimate_sigma2_A,
    identity_functional,
    subsample_indices,
)
from .problems import BvpPosterior, ProbitPosterior, load_pima, standard_gaussian_target
from .sampler import StepBatch, run_ensemble

REPLICATE_BLOCK = 125
STREAMS_PER_CELL = 4096  # stream id = cell_index * STREAMS_PER_CELL + block_index
OVERDISPERSION = 2.0  # initial-state dispersion, in units of the Laplace scale

KNOWN_ESTIMATORS = ("S", "A", "WR", "B", "B_sqrt")
KNOWN_PROBLEMS = ("gaussian_toy", "bvp", "probit")
KNOWN_PROPOSALS = ("rw", "mala")


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    proposal: str
    n_steps: int
    burn_in: int
    n_replicates: int
    estimators: Tuple[str, ...]
    seed: int
    stepsizes: Optional[Tuple[float, ...]] = None
    calibrate: bool = False
    probit_dims: Tuple[int, ...] = ()
    dim: int = 1  # gaussian_toy dimension
    output_dir: Optional[str] = None
    probit_truth: str = "none"  # or "pooled_b"
    pima_path: Optional[str] = None
    calibration: Optional[dict] = None  # CalibrationConfig overrides

    def __post_init__(self):
        if self.problem not in KNOWN_PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.proposal not in KNOWN_PROPOSALS:
            raise ConfigError(f"unknown proposal {self.proposal!r}")
        if self.n_steps < 1 or self.burn_in < 0 or self.n_replicates < 1:
            raise ConfigError("n_steps >= 1, burn_in >= 0, n_replicates >= 1 required")
        bad = [e for e in self.estimators if e not in KNOWN_ESTIMATORS]
        if bad:
            raise ConfigError(f"unknown estimators {bad}; known: {KNOWN_ESTIMATORS}")
        if not self.estimators:
            raise ConfigError("at least one estimator required")
        has_grid = bool(self.stepsizes)
        if has_grid == self.calibrate:
            raise ConfigError("exactly one of stepsizes / calibrate must be set")
        if has_grid and any(s <= 0.0 for s in self.stepsizes):
            raise ConfigError("stepsizes must be positive")
        if len(self.estimators) > 1 and self.n_replicates < 2:
            raise ConfigError("estimator comparisons need n_replicates >= 2")
        if self.problem == "probit" and not self.probit_dims:
            raise ConfigError("probit needs a non-empty probit_dims list")
        if self.probit_truth not in ("none", "pooled_b"):
            raise ConfigError("probit_truth must be 'none' or 'pooled_b'")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        steps = raw.pop("stepsizes", None)
        if isinstance(steps, dict):
            try:
                steps = np.geomspace(steps["lo"], steps["hi"], int(steps["num"]))
            except KeyError as exc:
                raise ConfigError(f"geometric stepsizes need lo/hi/num: missing {exc}")
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("estimators", "probit_dims"):
            if key in raw and raw[key] is not None:
                raw[key] = tuple(raw[key])
        try:
            return cls(
                stepsizes=tuple(float(s) for s in steps) if steps is not None else None,
                **raw,
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("estimators", "probit_dims", "stepsizes"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out


# ---------------------------------------------------------------------------
# problem catalogue

@dataclass
class ProblemSpec:
    label: str
    target: TargetDensity
    initial_state: np.ndarray  # warm start, tiled across replicates
    draw_initial: bool  # gaussian toy starts exactly in the target law
    truth: Optional[np.ndarray]
    rw_covariance: Optional[np.ndarray]
    init_jitter_chol: Optional[np.ndarray] = None
    mala_drift_target: Optional[TargetDensity] = None  # likelihood score field


def _problem_specs(config: ExperimentConfig) -> List[ProblemSpec]:
    """Expand the config into concrete targets; probit yields one per dim.

    Initialisation: the groundwater posterior sits about a hundred prior
    standard deviations from the origin, so prior draws never reach it
    inside any affordable burn-in; chains instead start overdispersed
    around the posterior mode, at twice the Laplace scale (the standard
    overdispersed-start recipe).  That keeps a genuine, realistic
    equilibration transient in every run -- slow-mixing stepsizes pay for
    it, well-chosen ones do not -- while replicates stay distinct even
    when almost every proposal is rejected.  Probit chains use the same
    recipe around their posterior mode.  The Gaussian toy draws its
    initial state from the target itself (exact stationarity).
    """
    if config.problem == "gaussian_toy":
        d = config.dim
        truth = np.zeros(d)
        return [
            ProblemSpec(
                "gaussian_toy",
                standard_gaussian_target(d),
                np.zeros(d),
                draw_initial=True,
                truth=truth,
                rw_covariance=None,
            )
        ]
    if config.problem == "bvp":
        problem = BvpPosterior()
        mode, cov = problem.laplace()
        truth = problem.posterior_mean_oracle()
        return [
            ProblemSpec(
                "bvp",
                problem.target_density(),
                mode,
                draw_initial=False,
                truth=truth,
                rw_covariance=None,
                init_jitter_chol=OVERDISPERSION * np.linalg.cholesky(cov),
                mala_drift_target=TargetDensity(
                    2,
                    problem.log_likelihood,
                    problem.grad_log_likelihood,
                    name="bvp_likelihood",
                ),
            )
        ]
    design, labels = load_pima(config.pima_path)
    specs = []
    for d in config.probit_dims:
        problem = ProbitPosterior(design, labels, active_dim=d)
        mode, cov = problem.laplace()
        specs.append(
            ProblemSpec(
                f"probit_d{d}",
                problem.target_density(),
                mode,
                draw_initial=False,
                truth=None,
                rw_covariance=problem.prior_covariance(),
                init_jitter_chol=OVERDISPERSION * np.linalg.cholesky(cov),
                mala_drift_target=TargetDensity(
                    d,
                    problem.log_likelihood,
                    problem.grad_log_likelihood,
                    name=f"probit_d{d}_likelihood",
                ),
            )
        )
    return specs


class _CountingTarget:
    """TargetDensity wrapper counting density and gradient evaluations in
    units of states (rows)."""

    def __init__(self, base: TargetDensity):
        self._base = base
        self.dim = base.dim
        self.name = base.name
        self.rho_rows = 0
        self.grad_rows = 0
        if base.grad_log_rho is None:
            self.grad_log_rho = None

    @staticmethod
    def _rows(x) -> int:
        x = np.asarray(x)
        return 1 if x.ndim == 1 else int(np.prod(x.shape[:-1]))

    def log_rho(self, x):
        self.rho_rows += self._rows(x)
        return self._base.log_rho(x)

    def grad_log_rho(self, x):
        self.grad_rows += self._rows(x)
        return self._base.grad_log_rho(x)

    def gradient(self, x):
        return self._base.gradient(x)


def _make_proposal(config: ExperimentConfig, spec: ProblemSpec, target, s: float):
    """Build the cell's proposal; `target` is the (possibly counted) chain
    target used when the problem defines no separate drift field.

    For the Bayesian problems the unnormalised density rho is the
    likelihood and the prior is the reference measure, so the Langevin
    drift field is the likelihood score while the chain itself targets
    likelihood times prior.  mala_drift_target carries that score; the toy
    problem has a flat (Lebesgue) reference and drifts along the full
    gradient.
    """
    if config.proposal == "rw":
        return gaussian_rw_proposal(spec.target.dim, s, spec.rw_covariance)
    if spec.mala_drift_target is not None:
        return mala_proposal(spec.mala_drift_target, s)
    return mala_proposal(target, s)


# ---------------------------------------------------------------------------
# streaming accumulators (used when no full-cost B estimate is requested)

class _StreamAccumulator:
    """Lock-step accumulators for S, A, WR, sigma2_A and the strided rows
    backing B_sqrt (its leading rows), in one pass over the chain.

    Log-weight sums keep a running max per chain and rescale the partial
    sums whenever it grows, the streaming form of the max-shift trick.
    Squared-weight sums for sigma2_A are centered at f of the first
    recorded proposal batch and re-centered exactly at finalisation.
    """

    def __init__(self, f: Functional, n_steps: int, m_chains: int, dim: int,
                 bsqrt_indices: Optional[np.ndarray]):
        self.f = f
        self.n = n_steps
        probe = f.apply(np.zeros((1, dim)))
        self.n_comp = probe.shape[1]
        mm = (m_chains, self.n_comp)
        self.sum_fx = np.zeros(mm)
        self.sum_wr = np.zeros(mm)
        self.accepts = np.zeros(m_chains)
        self.run_max = np.full(m_chains, -np.inf)
        self.w_sum = np.zeros(m_chains)
        self.wf_sum = np.zeros(mm)
        self.run_max2 = np.full(m_chains, -np.inf)
        self.w2_sum = np.zeros(m_chains)
        self.w2f_sum = np.zeros(mm)
        self.w2f2_sum = np.zeros(mm)
        self.center0: Optional[np.ndarray] = None
        self.bsqrt_indices = bsqrt_indices
        if bsqrt_indices is not None:
            nb = len(bsqrt_indices)
            self._bpos = {int(k): i for i, k in enumerate(bsqrt_indices)}
            self.b_x = np.empty((nb, m_chains, dim))
            self.b_y = np.empty((nb, m_chains, dim))
            self.b_log_rho_y = np.empty((nb, m_chains))

    @staticmethod
    def _rescale(run_max, lw):
        new_max = np.maximum(run_max, lw)
        with np.errstate(invalid="ignore"):
            scale = np.where(np.isneginf(run_max), 0.0, np.exp(run_max - new_max))
            contrib = np.where(np.isneginf(lw), 0.0, np.exp(lw - new_max))
        return new_max, scale, contrib

    def update(self, k: int, batch: StepBatch) -> None:
        fx = self.f.apply(batch.x)
        fy = self.f.apply(batch.y)
        if self.center0 is None:
            self.center0 = fy.copy()
        self.sum_fx += fx
        alpha = np.exp(batch.log_alpha)
        self.sum_wr += fx + alpha[:, None] * (fy - fx)
        self.accepts += batch.accepted

        lw = batch.log_weight
        self.run_max, scale, contrib = self._rescale(self.run_max, lw)
        self.w_sum = self.w_sum * scale + contrib
        self.wf_sum = self.wf_sum * scale[:, None] + contrib[:, None] * fy

        lw2 = 2.0 * lw
        self.run_max2, scale2, contrib2 = self._rescale(self.run_max2, lw2)
        centered = fy - self.center0
        self.w2_sum = self.w2_sum * scale2 + contrib2
        self.w2f_sum = self.w2f_sum * scale2[:, None] + contrib2[:, None] * centered
        self.w2f2_sum = (
            self.w2f2_sum * scale2[:, None] + contrib2[:, None] * centered**2
        )

        if self.bsqrt_indices is not None and k in self._bpos:
            i = self._bpos[k]
            self.b_x[i] = batch.x
            self.b_y[i] = batch.y
            self.b_log_rho_y[i] = batch.log_rho_y

    def finalize(self) -> dict:
        n = self.n
        if np.any(self.w_sum <= 0.0):
            raise NumericalError("degenerate weight set in at least one replicate")
        s_val = self.sum_fx / n
        a_val = self.wf_sum / self.w_sum[:, None]
        wr_val = self.sum_wr / n
        delta = s_val - self.center0  # exact re-centering of the squared sums
        num = (
            self.w2f2_sum
            - 2.0 * delta * self.w2f_sum
            + delta**2 * self.w2_sum[:, None]
        )
        factor = np.exp(self.run_max2 - 2.0 * self.run_max)
        sigma2 = n * factor[:, None] * num / self.w_sum[:, None] ** 2
        out = {
            "S": s_val,
            "A": a_val,
            "WR": wr_val,
            "sigma2_A": sigma2,
            "acceptance": self.accepts / n,
            "log_normalizer": self.run_max + np.log(self.w_sum),
        }
        return out


@dataclass
class _BRecords:
    """Just enough of a chain history for the mixture estimator."""

    x: np.ndarray
    y: np.ndarray
    log_rho_y: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


# ---------------------------------------------------------------------------
# results

@dataclass
class CellResult:
    """All replicate values for one (problem, proposal, stepsize) cell.

    values maps estimator name -> (M, n_components); sigma2_A holds the
    per-replicate asymptotic-variance estimates for A when available.
    """

    problem: str
    proposal: str
    s: float
    values: Dict[str, np.ndarray]
    acceptance: np.ndarray
    truth: Optional[np.ndarray]
    sigma2_A: Optional[np.ndarray] = None
    n_rho_evaluations: int = 0
    n_init_evaluations: int = 0
    n_grad_evaluations: int = 0
    n_pair_evaluations: int = 0

    def aggregate(self, estimator: str) -> dict:
        return aggregate_replicates(self.values[estimator], self.truth)


def aggregate_replicates(values: np.ndarray, truth: Optional[np.ndarray]) -> dict:
    """Mean, per-component variance (ddof=0 so the MSE identity is exact),
    total variance, and when truth is known bias and RMSE with
    MSE = |bias|^2 + total variance verified to 1e-10 relative."""
    values = np.asarray(values, dtype=float)
    mean = values.mean(axis=0)
    var = values.var(axis=0, ddof=0)
    out = {
        "mean": mean,
        "variance": var,
        "variance_total": float(var.sum()),
        "n_replicates": int(values.shape[0]),
    }
    if truth is not None:
        bias = mean - truth
        mse = float(np.mean(np.sum((values - truth) ** 2, axis=1)))
        bias2 = float(np.sum(bias * bias))
        ident = abs(mse - (bias2 + out["variance_total"]))
        if ident > 1e-10 * max(mse, 1e-300):
            raise NumericalError(
                f"aggregation identity violated: mse={mse}, "
                f"bias2+var={bias2 + out['variance_total']}"
            )
        out.update(
            bias=bias,
            bias2_total=bias2,
            mse_total=mse,
            rmse=math.sqrt(mse),
        )
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: List[CellResult]
    calibration: Dict[str, CalibrationState] = field(default_factory=dict)

    def find(self, problem: str, proposal: Optional[str] = None) -> List[CellResult]:
        return [
            c
            for c in self.cells
            if c.problem == problem and (proposal is None or c.proposal == proposal)
        ]

    def summary_dict(self) -> dict:
        cells = []
        for c in self.cells:
            entry = {
                "problem": c.problem,
                "proposal": c.proposal,
                "s": c.s,
                "acceptance_rate": float(c.acceptance.mean()),
                "n_rho_evaluations": c.n_rho_evaluations,
                "n_init_evaluations": c.n_init_evaluations,
                "n_grad_evaluations": c.n_grad_evaluations,
                "n_pair_evaluations": c.n_pair_evaluations,
                "estimators": {},
            }
            if c.truth is not None:
                entry["truth"] = [float(v) for v in c.truth]
            agg_s = c.aggregate("S") if "S" in c.values else None
            for name in c.values:
                agg = c.aggregate(name)
                row = {
                    "value_mean": [float(v) for v in agg["mean"]],
                    "variance": [float(v) for v in agg["variance"]],
                    "variance_total": agg["variance_total"],
                }
                if "rmse" in agg:
                    row["rmse"] = agg["rmse"]
                    row["bias2_total"] = agg["bias2_total"]
                if agg_s is not None and agg_s["variance_total"] > 0.0:
                    row["variance_ratio_vs_S"] = (
                        agg["variance_total"] / agg_s["variance_total"]
                    )
                entry["estimators"][name] = row
            if c.sigma2_A is not None:
                entry["sigma2_A_mean"] = [
                    float(v) for v in np.asarray(c.sigma2_A).mean(axis=0)
                ]
            cells.append(entry)
        out = {"config": self.config.to_dict(), "cells": cells}
        if self.calibration:
            out["calibration"] = {
                label: {
                    "s": st.s_current,
                    "J_f": st.J_f_value,
                    "J": st.J_value,
                    "converged": st.converged,
                    "brackets": [list(b) for b in st.brackets],
                }
                for label, st in self.calibration.items()
            }
        return out

    def write_outputs(self, output_dir) -> None:
        """results.csv (long), summary.json, acceptance.csv."""
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "results.csv", "w") as fh:
            fh.write("problem,proposal,s,estimator,replicate,component,value\n")
            for c in self.cells:
                for name in c.values:
                    vals = c.values[name]
                    for rep in range(vals.shape[0]):
                        for comp in range(vals.shape[1]):
                            fh.write(
                                f"{c.problem},{c.proposal},{c.s!r},{name},"
                                f"{rep},{comp},{float(vals[rep, comp])!r}\n"
                            )
        with open(out / "acceptance.csv", "w") as fh:
            fh.write("problem,proposal,s,acceptance_rate\n")
            for c in self.cells:
                fh.write(
                    f"{c.problem},{c.proposal},{c.s!r},{float(c.acceptance.mean())!r}\n"
                )
        with open(out / "summary.json", "w") as fh:
            json.dump(self.summary_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# the runner

def _thread_count() -> int:
    raw = os.environ.get("MHIS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MHIS_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def _blocks(m: int) -> List[Tuple[int, int]]:
    return [(lo, min(lo + REPLICATE_BLOCK, m)) for lo in range(0, m, REPLICATE_BLOCK)]


def _run_cell(
    config: ExperimentConfig,
    spec: ProblemSpec,
    s: float,
    cell_index: int,
    f: Functional,
) -> CellResult:
    m_total = config.n_replicates
    n = config.n_steps
    dim = spec.target.dim
    want_b = "B" in config.estimators
    want_bsqrt = "B_sqrt" in config.estimators
    bsqrt_idx = subsample_indices(n, int(math.isqrt(n))) if want_bsqrt else None

    counting = _CountingTarget(spec.target)
    target = TargetDensity(
        dim,
        counting.log_rho,
        counting.grad_log_rho if spec.target.grad_log_rho is not None else None,
        name=spec.target.name,
    )
    proposal = _make_proposal(config, spec, target, s)

    def run_block(block: Tuple[int, int]):
        lo, hi = block
        mb = hi - lo
        block_idx = lo // REPLICATE_BLOCK
        rng = RngStream(
            config.seed, cell_index * STREAMS_PER_CELL + block_idx
        ).generator()
        if spec.draw_initial:
            x0 = rng.standard_normal((mb, dim))
        else:
            x0 = np.tile(spec.initial_state, (mb, 1))
            if spec.init_jitter_chol is not None:
                x0 = x0 + rng.standard_normal((mb, dim)) @ spec.init_jitter_chol.T
        if want_b:
            ens = run_ensemble(
                target, proposal, x0, n, rng, burn_in=config.burn_in, record=True
            )
            return ("records", ens)
        acc = _StreamAccumulator(f, n, mb, dim, bsqrt_idx)
        run_ensemble(
            target,
            proposal,
            x0,
            n,
            rng,
            burn_in=config.burn_in,
            observer=acc.update,
            record=False,
        )
        return ("stream", acc)

    blocks = _blocks(m_total)
    workers = _thread_count()
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(run_block, blocks))
    else:
        outputs = [run_block(b) for b in blocks]

    values: Dict[str, List[np.ndarray]] = {name: [] for name in config.estimators}
    sigma2_rows: List[np.ndarray] = []
    acceptance: List[float] = []
    n_pairs = 0

    for kind, payload in outputs:
        if kind == "records":
            ens = payload
            for i in range(ens.n_chains):
                hist = ens.chain(i)
                acceptance.append(float(np.mean(hist.accepted)))
                reports: Dict[str, EstimateReport] = {}
                if "S" in values:
                    reports["S"] = estimate_S(hist, f)
                if "A" in values:
                    reports["A"] = estimate_A(hist, f)
                    sigma2_rows.append(estimate_sigma2_A(hist, f))
                if "WR" in values:
                    reports["WR"] = estimate_WR(hist, f)
                if want_b:
                    reports["B"] = estimate_B(hist, f, proposal)
                    n_pairs += len(hist) ** 2
                if want_bsqrt:
                    m_sub = int(math.isqrt(len(hist)))
                    reports["B_sqrt"] = estimate_B(hist, f, proposal, subsample=m_sub)
                    n_pairs += m_sub**2
                for name, rep in reports.items():
                    values[name].append(np.atleast_1d(rep.value))
        else:
            acc = payload
            final = acc.finalize()
            mb = final["S"].shape[0]
            acceptance.extend(final["acceptance"].tolist())
            for name in config.estimators:
                if name in ("S", "A", "WR"):
                    values[name].extend(final[name])
            if "A" in config.estimators:
                sigma2_rows.extend(final["sigma2_A"])
            if want_bsqrt:
                m_sub = len(bsqrt_idx)
                for i in range(mb):
                    recs = _BRecords(
                        acc.b_x[:, i], acc.b_y[:, i], acc.b_log_rho_y[:, i]
                    )
                    rep = estimate_B(recs, f, proposal, subsample=m_sub)
                    values["B_sqrt"].append(np.atleast_1d(rep.value))
                    n_pairs += m_sub**2

    expected = m_total * (n + config.burn_in) + m_total
    if counting.rho_rows != expected:
        raise NumericalError(
            f"rho evaluation accounting broken: {counting.rho_rows} rows "
            f"vs expected {expected} (= M*(n+burn_in) + M initial)"
        )

    return CellResult(
        problem=spec.label,
        proposal=config.proposal,
        s=float(s),
        values={name: np.vstack(rows) for name, rows in values.items()},
        acceptance=np.asarray(acceptance),
        truth=spec.truth,
        sigma2_A=np.vstack(sigma2_rows) if sigma2_rows else None,
        n_rho_evaluations=counting.rho_rows - m_total,
        n_init_evaluations=m_total,
        n_grad_evaluations=counting.grad_rows,
        n_pair_evaluations=n_pairs,
    )


def _calibrated_stepsize(
    config: ExperimentConfig, spec: ProblemSpec, f: Functional, label_index: int
) -> CalibrationState:
    overrides = dict(config.calibration or {})
    overrides.setdefault("s_lo", 0.05)
    overrides.setdefault("s_hi", 10.0)
    cal_config = CalibrationConfig(
        initial_state=spec.initial_state,
        **overrides,
    )

    def factory(s: float) -> ProposalKernel:
        return _make_proposal(config, spec, spec.target, s)

    rng = RngStream(config.seed, 10_000_000 + label_index)
    return calibrate_stepsize(spec.target, factory, f, cal_config, rng)


def _reference_b_truth(
    config: ExperimentConfig, spec: ProblemSpec, s_best: float,
    f: Functional, spec_idx: int,
) -> np.ndarray:
    """Reference value for targets without a closed-form mean: one long
    chain (ten times the per-replicate length) at the best stepsize, reduced
    by the mixture estimator on a sqrt-sized stride so the pair cost matches
    the extra sampling cost."""
    n_long = 10 * config.n_steps
    proposal = _make_proposal(config, spec, spec.target, s_best)
    rng = RngStream(config.seed, 20_000_000 + spec_idx).generator()
    if spec.draw_initial:
        x0 = rng.standard_normal((1, spec.target.dim))
    else:
        x0 = spec.initial_state[None, :]
    ens = run_ensemble(
        spec.target, proposal, x0, n_long, rng, burn_in=config.burn_in
    )
    hist = ens.chain(0)
    m = int(math.isqrt(n_long))
    return np.atleast_1d(estimate_B(hist, f, proposal, subsample=m).value)


def _best_stepsize(cells: List[CellResult]) -> float:
    """Stepsize whose A (or failing that S) estimate has the smallest
    replicate variance."""
    key = "A" if all("A" in c.values for c in cells) else "S"
    best = min(cells, key=lambda c: c.aggregate(key)["variance_total"])
    return best.s


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every (problem, stepsize) cell in the config and aggregate.

    Returns the in-memory result; writes results.csv / summary.json /
    acceptance.csv when config.output_dir is set.
    """
    specs = _problem_specs(config)
    cells: List[CellResult] = []
    calibrations: Dict[str, CalibrationState] = {}
    cell_index = 0
    for spec_idx, spec in enumerate(specs):
        f = identity_functional(spec.target.dim)
        if config.calibrate:
            state = _calibrated_stepsize(config, spec, f, spec_idx)
            calibrations[spec.label] = state
            stepsizes: Sequence[float] = (state.s_current,)
        else:
            stepsizes = config.stepsizes
        spec_cells = []
        for s in stepsizes:
            spec_cells.append(_run_cell(config, spec, float(s), cell_index, f))
            cell_index += 1
        if spec.truth is None and config.probit_truth == "pooled_b":
            truth = _reference_b_truth(
                config, spec, _best_stepsize(spec_cells), f, spec_idx
            )
            for c in spec_cells:
                c.truth = truth
        cells.extend(spec_cells)

    result = ExperimentResult(config=config, cells=cells, calibration=calibrations)
    if config.output_dir is not None:
        result.write_outputs(config.output_dir)
    return result
