"""Batch front-end: ``rates``, ``run`` and ``compare`` driven by an INI config.

Exit codes: 0 success, 1 configuration error, 2 degenerate screening
(rates cannot be regressed), 3 an adaptive run hit its level cap.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import logging
import math
import os
import shlex
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mlmc
from .external import ExternalScore
from .registry import Benchmark, benchmark_from_section, load_registry
from .sampler import METHODS, TruncationRule
from .schedules import ScheduleError
from .svg import Panel, write_svg

log = logging.getLogger("mlmc_diffusion")

OUT_ENV = "MLMC_DIFFUSION_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_NONCONVERGED = 0, 1, 2, 3

# keys that change where or how fast results are produced, not what they are
_UNHASHED = {"workers", "out"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    benchmark: Benchmark
    eps: tuple
    M: int = 2
    T0: int = 8
    l0: int | str = 0
    L_max: int = 12
    method: str = "discrete"
    deterministic: bool = False
    truncation: TruncationRule = field(default_factory=TruncationRule)
    n0: int = 100
    n_screen: int = 1000
    repeats: int = 20
    debias: str = "divide"
    alpha_default: float = 0.5
    seed: int = 0
    workers: int = 1
    out: Path = Path("results")
    score: str = "analytic"
    score_command: tuple = ()
    score_timeout: float = 30.0
    score_pool: int = 1
    digest: str = ""

    def header(self) -> str:
        return f"config_sha256={self.digest} seed={self.seed}"

    def make_sampler(self):
        score = None
        try:
            if self.score == "external":
                score = ExternalScore(self.score_command, timeout=self.score_timeout, pool_size=self.score_pool)
            return self.benchmark.sampler(self.T0, self.M, self.L_max, method=self.method,
                                          deterministic=self.deterministic, truncation=self.truncation,
                                          score=score)
        except (OSError, ValueError) as exc:
            if score is not None:
                score.close()
            raise ConfigError(f"cannot build the sampler: {exc}") from exc


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _digest(cp: configparser.ConfigParser) -> str:
    lines = []
    for sec in sorted(cp.sections()):
        for k in sorted(cp[sec]):
            if sec == "run" and k in _UNHASHED | {"seed"}:
                continue
            lines.append(f"{sec}.{k}={' '.join(cp[sec][k].split())}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def load_config(path, seed=None, workers=None, out=None) -> RunConfig:
    """Parse a config file; command-line values override the file.

    The output directory resolves as ``--out``, then the ``MLMC_DIFFUSION_OUT``
    environment variable, then the ``out`` key.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if "run" not in cp:
        raise ConfigError("config needs a [run] section")
    run = cp["run"]
    known = {"benchmark", "registry", "eps", "m", "t0", "l0", "l_max", "method", "deterministic",
             "truncation", "sigma1", "n0", "n_screen", "repeats", "debias", "alpha_default", "seed",
             "workers", "out", "score", "score_command", "score_timeout", "score_pool"}
    unknown = set(run) - known
    if unknown:
        raise ConfigError(f"unknown [run] keys: {sorted(unknown)}")
    try:
        bench = _benchmark(cp, run)
        eps = tuple(float(v) for v in run.get("eps", "0.01").split(","))
        if not eps or any(not e > 0 for e in eps):
            raise ConfigError("eps values must be positive")
        if list(eps) != sorted(eps, reverse=True):
            raise ConfigError("eps values must be sorted in descending order")
        l0_text = run.get("l0", "0").strip()
        l0 = "auto" if l0_text == "auto" else int(l0_text)
        cfg = RunConfig(
            benchmark=bench, eps=eps,
            M=int(run.get("M", "2")),
            T0=int(run.get("T0", str(bench.default_T0()))),
            l0=l0,
            L_max=int(run.get("L_max", "12")),
            method=run.get("method", "discrete"),
            deterministic=_bool(run.get("deterministic", "false")),
            truncation=TruncationRule(run.get("truncation", "final-gaussian"), float(run.get("sigma1", "0"))),
            n0=int(run.get("n0", "100")),
            n_screen=int(run.get("n_screen", "1000")),
            repeats=int(run.get("repeats", "20")),
            debias=run.get("debias", "divide"),
            alpha_default=float(run.get("alpha_default", "0.5")),
            seed=int(run.get("seed", "0")) if seed is None else int(seed),
            workers=int(run.get("workers", "1")) if workers is None else int(workers),
            out=Path(out or os.environ.get(OUT_ENV) or run.get("out", "results")),
            score=run.get("score", "analytic"),
            score_command=tuple(shlex.split(run.get("score_command", ""))),
            score_timeout=float(run.get("score_timeout", "30")),
            score_pool=int(run.get("score_pool", "1")),
            digest=_digest(cp),
        )
    except ConfigError:
        raise
    except (KeyError, ValueError, ScheduleError) as exc:
        raise ConfigError(str(exc)) from exc
    _validate(cfg)
    return cfg


def _benchmark(cp, run) -> Benchmark:
    if "benchmark" in run and run["benchmark"] != "inline":
        reg = load_registry(run.get("registry"))
        name = run["benchmark"]
        if name not in reg:
            raise ConfigError(f"unknown benchmark {name!r}; known: {sorted(reg)}")
        return reg[name]
    if "problem" not in cp:
        raise ConfigError("give benchmark = <name> or an inline [problem] section")
    return benchmark_from_section("inline", cp["problem"])


def _validate(cfg: RunConfig):
    if cfg.M < 2 or cfg.T0 < 1 or cfg.L_max < 0:
        raise ConfigError("need M >= 2, T0 >= 1, L_max >= 0")
    if cfg.l0 != "auto" and not 0 <= cfg.l0 <= cfg.L_max:
        raise ConfigError(f"l0 must lie in 0..L_max, got {cfg.l0}")
    if cfg.method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    if cfg.debias not in ("divide", "multiply"):
        raise ConfigError("debias must be divide or multiply")
    if cfg.n0 < 2 or cfg.n_screen < 2 or cfg.repeats < 1 or cfg.workers < 1:
        raise ConfigError("need n0 >= 2, n_screen >= 2, repeats >= 1, workers >= 1")
    if cfg.score not in ("analytic", "external"):
        raise ConfigError("score must be analytic or external")
    if cfg.score == "external" and not cfg.score_command:
        raise ConfigError("external score needs score_command")


# ---------------------------------------------------------------- output helpers

def _csv(path: Path, header: str, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in r])


def _truth(cfg: RunConfig):
    return None if cfg.benchmark.truth is None else np.asarray(cfg.benchmark.truth)


def _start_level(cfg, sampler, qoi) -> int:
    if cfg.l0 != "auto":
        return cfg.l0
    l0 = mlmc.select_start_level(sampler, qoi, 0, cfg.n_screen, seed=cfg.seed,
                                 max_l0=max(cfg.L_max - 2, 0), workers=cfg.workers)
    log.info("start level chosen by the coupling check: l0=%d", l0)
    return l0


# ---------------------------------------------------------------- commands

def cmd_rates(cfg: RunConfig, sampler) -> int:
    """Fixed-sample screening of levels ``l0..L_max`` and rate regression."""
    qoi = cfg.benchmark.qoi()
    l0 = _start_level(cfg, sampler, qoi)
    stats = mlmc.screen_levels(sampler, qoi, l0, cfg.L_max, cfg.n_screen, seed=cfg.seed, workers=cfg.workers)
    out, hdr = cfg.out, cfg.header()
    out.mkdir(parents=True, exist_ok=True)
    _csv(out / "giles_variance.csv", hdr, ("level", "V_fine", "V_diff"),
         [(s.level, s.V_fine, s.V) for s in stats])
    _csv(out / "giles_mean.csv", hdr, ("level", "Y_fine_norm", "Y_diff_norm"),
         [(s.level, float(np.linalg.norm(s.Y_fine)), float(np.linalg.norm(s.Y))) for s in stats])
    try:
        alpha, beta = mlmc.fit_rates([(s.level, float(np.linalg.norm(s.Y)), s.V) for s in stats[1:]], cfg.M)
    except mlmc.RateUnavailableError as exc:
        _csv(out / "rates.csv", hdr, ("alpha", "beta", "l0", "L_max", "n_screen"),
             [(None, None, l0, cfg.L_max, cfg.n_screen)])
        print(f"rates: regression unavailable: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    _csv(out / "rates.csv", hdr, ("alpha", "beta", "l0", "L_max", "n_screen"),
         [(alpha, beta, l0, cfg.L_max, cfg.n_screen)])
    pred = _predict(cfg, stats, alpha)
    _csv(out / "allocation.csv", hdr, ("eps", "L", "level", "N_pred", "mlmc_nfe_pred", "mc_nfe_pred"),
         [(e, L, l, n, cm, cc) for e, L, ns, cm, cc in pred for l, n in ns])
    panels = _giles_panels(stats, cfg.M, alpha, beta)
    panels.append(_n_panel([(f"eps={e:g}", ns) for e, _, ns, _, _ in pred]))
    panels.append(Panel("predicted MSE vs cost", "total NFE", "MSE", logx=True)
                  .add("MLMC", [p[3] for p in pred], [p[0] ** 2 for p in pred])
                  .add("MC", [p[4] for p in pred], [p[0] ** 2 for p in pred]))
    write_svg(out / "giles.svg", panels, hdr)
    print(f"alpha={alpha:.4f} beta={beta:.4f} l0={l0}")
    return EXIT_OK


def _predict(cfg, stats, alpha):
    """Finest level, allocation and costs implied by screened statistics, per eps."""
    out = []
    for e in cfg.eps:
        last = len(stats) - 1
        for i in range(1, len(stats)):
            if mlmc.bias_estimate(float(np.linalg.norm(stats[i].Y)), 0.0, max(alpha, 1e-3), cfg.M) <= e / math.sqrt(2):
                last = i
                break
        use = stats[:last + 1]
        N = mlmc.optimal_allocation([s.V for s in use], [s.cost for s in use], e)
        cost = sum(n * s.cost for n, s in zip(N, use))
        mc = math.ceil(2.0 / e ** 2 * use[-1].V_fine) * cfg.T0 * cfg.M ** use[-1].level
        out.append((e, use[-1].level, [(s.level, n) for s, n in zip(use, N)], cost, mc))
    return out


def _giles_panels(stats, M, alpha, beta):
    lv = [s.level for s in stats]
    var = (Panel("variance decay", "level", "log_M variance", logy=False)
           .add("P_l", lv, [math.log(s.V_fine, M) if s.V_fine > 0 else math.nan for s in stats])
           .add("P_l - P_l-1", lv[1:], [math.log(s.V, M) if s.V > 0 else math.nan for s in stats[1:]]))
    mean = (Panel("mean decay", "level", "log_M |mean|", logy=False)
            .add("P_l", lv, [_logn(s.Y_fine, M) for s in stats])
            .add("P_l - P_l-1", lv[1:], [_logn(s.Y, M) for s in stats[1:]]))
    if alpha is not None:
        mean.title = f"mean decay (alpha={alpha:.2f})"
        var.title = f"variance decay (beta={beta:.2f})"
    return [var, mean]


def _logn(v, M):
    n = float(np.linalg.norm(v))
    return math.log(n, M) if n > 0 else math.nan


def _n_panel(rows):
    p = Panel("samples per level", "level", "N_l")
    for label, ns in rows:
        p.add(label, [l for l, _ in ns], [n for _, n in ns])
    return p


def cmd_run(cfg: RunConfig, sampler) -> int:
    """One adaptive MLMC run per eps."""
    qoi = cfg.benchmark.qoi()
    l0 = _start_level(cfg, sampler, qoi)
    truth = _truth(cfg)
    out, hdr = cfg.out, cfg.header()
    out.mkdir(parents=True, exist_ok=True)
    n = sampler.dim
    cols = (["eps", "l0"] + [f"estimate_{j}" for j in range(n)] +
            ["eps_est", "realised_error", "total_nfe", "L_final", "converged", "alpha", "beta"] +
            [f"N_{l}" for l in range(cfg.L_max + 1)])
    rows, results, code = [], [], EXIT_OK
    for k, e in enumerate(cfg.eps):
        r = mlmc.adaptive_mlmc(sampler, e, qoi, l0=l0, n0=cfg.n0, seed=cfg.seed, max_level=cfg.L_max,
                               alpha_default=cfg.alpha_default, debias=cfg.debias,
                               workers=cfg.workers, raise_on_failure=False)
        results.append(r)
        mlmc.write_telemetry(out / f"telemetry_{k}.csv", r.telemetry, hdr + f" eps={e!r}")
        err = None if truth is None else float(np.linalg.norm(r.estimate - truth))
        Ns = {s.level: s.n for s in r.levels}
        rows.append([e, l0, *r.estimate, r.eps_est, err, r.total_nfe, r.L, int(r.converged), r.alpha, r.beta]
                    + [Ns.get(l) for l in range(cfg.L_max + 1)])
        if not r.converged:
            print(f"run: eps={e:g} did not converge by L_max={cfg.L_max}; eps_est={r.eps_est:.4g}",
                  file=sys.stderr)
            code = EXIT_NONCONVERGED
    _csv(out / "result.csv", hdr, cols, rows)
    finest = results[-1]
    panels = _giles_panels(finest.levels, cfg.M, finest.alpha, finest.beta)
    panels.append(_n_panel([(f"eps={r.eps_target:g}", [(s.level, s.n) for s in r.levels]) for r in results]))
    panels.append(Panel("cost vs accuracy", "eps", "eps^2 * total NFE", logx=True)
                  .add("MLMC", [r.eps_target for r in results], [r.eps_target ** 2 * r.total_nfe for r in results]))
    write_svg(out / "run.svg", panels, hdr)
    return code


@dataclass
class CompareRow:
    eps: float
    repeats: int
    mlmc_nfe: float
    mc_nfe_equal: float
    mc_nfe_matched: float
    efficiency: float
    mse_mlmc: float
    mse_mc: float
    mse_mlmc_se: float
    mse_mc_se: float
    nonconverged: int


def compare(cfg: RunConfig, sampler=None) -> list[CompareRow]:
    """MLMC against plain MC at the finest MLMC level, repeated ``cfg.repeats`` times.

    Per repeat the MC run gets the same NFE budget as the MLMC run, and the
    matched-variance MC cost ``ceil(V_fine(L) / sum(V_l / N_l)) * C_L`` is
    recorded; ``efficiency`` averages MLMC cost over that matched cost.
    """
    truth = _truth(cfg)
    if truth is None:
        raise ConfigError("compare needs a benchmark with a stored truth")
    if cfg.repeats == 1:
        warnings.warn("repeats = 1: MSE estimates from a single run are very noisy", stacklevel=2)
    sampler = sampler or cfg.make_sampler()
    qoi = cfg.benchmark.qoi()
    l0 = _start_level(cfg, sampler, qoi)
    rows = []
    for e in cfg.eps:
        nfe, mc_eq, mc_match, ratios, se_ml, se_mc, bad = [], [], [], [], [], [], 0
        for r in range(cfg.repeats):
            seed = cfg.seed + r
            res = mlmc.adaptive_mlmc(sampler, e, qoi, l0=l0, n0=cfg.n0, seed=seed, max_level=cfg.L_max,
                                     alpha_default=cfg.alpha_default, debias=cfg.debias,
                                     workers=cfg.workers, raise_on_failure=False)
            bad += not res.converged
            C_L = sampler.grid.steps(res.L)
            var = sum(s.V / s.n for s in res.levels)
            matched = math.ceil(res.levels[-1].V_fine / var) * C_L if var > 0 else C_L
            n_mc = max(2, res.total_nfe // C_L)
            est, _, cost = mlmc.mc_estimate(sampler, res.L, n_mc, qoi, seed=seed, workers=cfg.workers)
            nfe.append(res.total_nfe)
            mc_eq.append(cost)
            mc_match.append(matched)
            ratios.append(res.total_nfe / matched)
            se_ml.append(float(np.sum((res.estimate - truth) ** 2)))
            se_mc.append(float(np.sum((est - truth) ** 2)))
        R = cfg.repeats
        rows.append(CompareRow(
            e, R, float(np.mean(nfe)), float(np.mean(mc_eq)), float(np.mean(mc_match)),
            float(np.mean(ratios)), float(np.mean(se_ml)), float(np.mean(se_mc)),
            float(np.std(se_ml, ddof=1) / math.sqrt(R)) if R > 1 else math.nan,
            float(np.std(se_mc, ddof=1) / math.sqrt(R)) if R > 1 else math.nan, bad))
    return rows


def cmd_compare(cfg: RunConfig, sampler) -> int:
    rows = compare(cfg, sampler)
    out, hdr = cfg.out, cfg.header()
    out.mkdir(parents=True, exist_ok=True)
    _csv(out / "mse_vs_cost.csv", hdr,
         ("eps", "method", "repeats", "mean_nfe", "mse", "mse_stderr"),
         [x for r in rows for x in ((r.eps, "mlmc", r.repeats, r.mlmc_nfe, r.mse_mlmc, r.mse_mlmc_se),
                                    (r.eps, "mc", r.repeats, r.mc_nfe_equal, r.mse_mc, r.mse_mc_se))])
    _csv(out / "compare.csv", hdr,
         ("eps", "repeats", "mlmc_nfe", "mc_nfe_matched", "efficiency_ratio", "mse_ratio_equal_cost",
          "nonconverged"),
         [(r.eps, r.repeats, r.mlmc_nfe, r.mc_nfe_matched, r.efficiency,
           r.mse_mc / r.mse_mlmc if r.mse_mlmc > 0 else None, r.nonconverged) for r in rows])
    write_svg(out / "mse_vs_cost.svg", [
        Panel("MSE vs cost", "total NFE", "MSE", logx=True)
        .add("MLMC", [r.mlmc_nfe for r in rows], [r.mse_mlmc for r in rows])
        .add("MC (equal cost)", [r.mc_nfe_equal for r in rows], [r.mse_mc for r in rows])
        .add("MC (matched variance)", [r.mc_nfe_matched for r in rows], [r.mse_mlmc for r in rows])], hdr, cols=1)
    for r in rows:
        print(f"eps={r.eps:g}: MLMC/MC cost at matched variance = {r.efficiency:.3f} "
              f"(MLMC {r.mlmc_nfe:.3g} NFE vs MC {r.mc_nfe_matched:.3g})")
    return EXIT_NONCONVERGED if any(r.nonconverged for r in rows) else EXIT_OK


COMMANDS = {"rates": cmd_rates, "run": cmd_run, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlmc-diffusion", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, workers=args.workers, out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sampler = None
    try:
        sampler = cfg.make_sampler()
        return COMMANDS[args.command](cfg, sampler)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        if sampler is not None and isinstance(sampler.score, ExternalScore):
            sampler.score.close()


if __name__ == "__main__":
    sys.exit(main())
