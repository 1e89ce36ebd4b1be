"""Command-line entry point: ``stochdomain <subcommand> [options]``.

Exit status: 0 on success, 1 on a solver or contract failure, 2 on a bad
configuration, 3 when the deformation fails the invertibility gate.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__, analyticity, domain_map, fem
from . import pipeline as pl
from . import sparse_grid as sg
from .config import ExperimentConfig, desk_profile, load_config, paper_profile
from .errors import AssumptionViolatedError, ConfigError, StochDomainError

log = logging.getLogger("stochdomain")

REFERENCE_BUDGET = 30_000


def emit_curves(curves: Mapping[str, pl.ConvergenceCurve], out_dir) -> list[Path]:
    """Write each curve to ``out_dir/<name>.csv`` using its declared schema."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sorted(curves):
        p = out_dir / f"{name}.csv"
        curves[name].to_csv(p)
        paths.append(p)
    return paths


def _figure_tables(sg_curves: Mapping[int, pl.ConvergenceCurve], trunc: pl.ConvergenceCurve | None, out_dir: Path):
    paths = []
    if sg_curves:
        rows_a = [(ns, r[0], r[1]) for ns in sorted(sg_curves) for r in sg_curves[ns].rows]
        rows_b = [(ns, r[0], r[2]) for ns in sorted(sg_curves) for r in sg_curves[ns].rows]
        pl.write_csv(out_dir / "fig2a.csv", ("N_s", "knots", "mean_error"), rows_a)
        pl.write_csv(out_dir / "fig2b.csv", ("N_s", "knots", "var_error"), rows_b)
        paths += [out_dir / "fig2a.csv", out_dir / "fig2b.csv"]
    if trunc is not None:
        pl.write_csv(out_dir / "fig4a.csv", ("N_s", "mean_error"), [(r[0], r[1]) for r in trunc.rows])
        pl.write_csv(out_dir / "fig4b.csv", ("N_s", "var_error"), [(r[0], r[2]) for r in trunc.rows])
        paths += [out_dir / "fig4a.csv", out_dir / "fig4b.csv"]
    return paths


class Run:
    """Shared state of one CLI invocation: config, sampler cache, manifest."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.model = cfg.build_model()
        self.timings: dict[str, float] = {}
        self.manifest: dict = {
            "command": command,
            "version": __version__,
            "config": cfg.as_dict(),
            "fingerprint": cfg.fingerprint(),
            "solver": {
                "factorization": "scipy splu, MMD_AT_PLUS_A ordering",
                "residual_check": 1e-9,
                "cg_rtol": fem.SOLVER_RTOL,
                "node_dedup": 1e-13,
            },
            "python": platform.python_version(),
            "eta": {},
        }
        self._evaluator = None

    def gate(self) -> None:
        mesh = fem.build_mesh(self.cfg.mesh)
        pts, pcs = mesh.sample_points()
        t0 = time.perf_counter()
        rep = domain_map.verify_assumptions(self.model, pts, pcs, force=self.cfg.force_unsafe)
        self.timings["assumptions"] = time.perf_counter() - t0
        self.report = rep
        self.manifest["delta_tilde"] = rep.delta_tilde
        self.manifest["assumptions"] = {k: v for k, v in rep.as_dict().items() if k not in ("tail_B", "tail_C")}
        log.info("delta_tilde = %.6f", rep.delta_tilde)

    @property
    def evaluator(self) -> pl.Evaluator:
        if self._evaluator is None:
            spec = pl.SamplerSpec(self.model, self.cfg.mesh, self.cfg.normalize)
            t0 = time.perf_counter()
            self._evaluator = pl.sampler_evaluator(spec, self.cfg.jobs)
            self.timings["setup"] = time.perf_counter() - t0
            if self.cfg.cache_dir:
                n = self._evaluator.load(self._cache_path())
                log.info("loaded %d cached node values", n)
        return self._evaluator

    def _cache_path(self) -> Path:
        return Path(self.cfg.cache_dir) / f"nodes-{self._evaluator.fingerprint()}.npz"

    def record(self, est: pl.QoiEstimate, key: str) -> None:
        self.manifest["eta"][key] = est.eta

    def reference(self) -> pl.QoiEstimate:
        t0 = time.perf_counter()
        ref = pl.reference_estimate(self.evaluator, self.cfg.ref_n_s, self.cfg.ref_w, self.cfg.cache_dir)
        self.timings["reference"] = time.perf_counter() - t0
        self.record(ref, f"reference_Ns{self.cfg.ref_n_s}_w{self.cfg.ref_w}")
        self.manifest["reference"] = ref.as_dict()
        log.info("reference: mean %.6f  variance %.6f  (%d knots)", ref.mean, ref.variance, ref.eta)
        return ref

    def finish(self) -> None:
        if self._evaluator is not None:
            self.manifest["n_solves"] = self._evaluator.n_solves
            if self.cfg.cache_dir:
                Path(self.cfg.cache_dir).mkdir(parents=True, exist_ok=True)
                self._evaluator.save(self._cache_path())
        self.manifest["timings"] = self.timings
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True, default=float))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


DIMENSION_KEYS = {
    "solve": ("n_s",),
    "sg-study": ("sg_n_s_list", "ref_n_s"),
    "truncation-study": ("trunc_n_s_list", "ref_n_s"),
    "fem-study": ("fem_n_s",),
    "reproduce-paper": ("sg_n_s_list", "trunc_n_s_list", "ref_n_s"),
}


def cmd_solve(run: Run) -> None:
    cfg = run.cfg
    run.gate()
    t0 = time.perf_counter()
    est = pl.estimate(run.evaluator, sg.IndexRule(cfg.rule, cfg.w), cfg.n_s)
    run.timings["solve"] = time.perf_counter() - t0
    run.record(est, f"Ns{cfg.n_s}_w{cfg.w}")
    run.manifest["estimate"] = est.as_dict()
    pl.write_csv(run.out / "solve.csv", ("mean", "variance", "knots"), [(est.mean, est.variance, est.eta)])
    print(f"mean={est.mean!r} var={est.variance!r} knots={est.eta}")


def _sg_curves(run: Run, ref: pl.QoiEstimate) -> dict[int, pl.ConvergenceCurve]:
    cfg = run.cfg
    curves = {}
    t0 = time.perf_counter()
    for ns in cfg.sg_n_s_list:
        c = pl.sparse_grid_study(run.evaluator, ns, range(cfg.sg_w_max[ns] + 1), ref, cfg.rule)
        for est in c.estimates:
            run.record(est, f"Ns{ns}_w{est.rule.level}")
        curves[ns] = c
    run.timings["sg_study"] = time.perf_counter() - t0
    return curves


def _trunc_curve(run: Run, ref: pl.QoiEstimate) -> pl.ConvergenceCurve:
    cfg = run.cfg
    t0 = time.perf_counter()
    c = pl.truncation_study(run.evaluator, cfg.trunc_n_s_list, ref, cfg.trunc_w, cfg.rule)
    run.timings["truncation_study"] = time.perf_counter() - t0
    for est in c.estimates:
        run.record(est, f"Ns{est.n_s}_w{est.rule.level}")
    slope = pl.loglog_slope(c.column("N_s"), c.column("mean_error"))
    check = pl.truncation_bound_check(c, run.report)
    run.manifest["truncation"] = {
        "mean_slope": slope,
        "bound_check": {"holds": check.holds, "c1": check.c1, "c2": check.c2, "bound": check.bound},
    }
    return c


def cmd_sg_study(run: Run) -> None:
    run.gate()
    curves = _sg_curves(run, run.reference())
    emit_curves({f"sg_study_Ns{k}": c for k, c in curves.items()}, run.out)


def cmd_truncation_study(run: Run) -> None:
    run.gate()
    c = _trunc_curve(run, run.reference())
    emit_curves({"truncation_study": c}, run.out)
    print(f"mean truncation slope {run.manifest['truncation']['mean_slope']:.3f}")


def cmd_fem_study(run: Run) -> None:
    cfg = run.cfg
    run.gate()
    model = run.model

    def sampler_for(n):
        return pl.QoiSampler(model, fem.build_mesh(n), normalize=False)

    t0 = time.perf_counter()
    res = pl.fem_study(cfg.fem_meshes, sampler_for, sg.IndexRule(cfg.rule, cfg.fem_w), cfg.fem_n_s, cfg.fem_reference_mesh)
    run.timings["fem_study"] = time.perf_counter() - t0
    run.manifest["fem"] = {"slope": res.slope, "local_slopes": res.local_slopes, "flagged_h": res.flagged}
    emit_curves({"fem_study": res.curve}, run.out)
    if res.flagged:
        log.warning("meshes with h in %s fall outside the expected slope window", res.flagged)
    print(f"fem slope {res.slope:.3f}")


def cmd_reproduce(run: Run) -> None:
    run.gate()
    ref = run.reference()
    curves = _sg_curves(run, ref)
    trunc = _trunc_curve(run, ref)
    emit_curves({f"sg_study_Ns{k}": c for k, c in curves.items()}, run.out)
    emit_curves({"truncation_study": trunc}, run.out)
    _figure_tables(curves, trunc, run.out)
    rep = analyticity.analyze(run.report.delta_tilde, 2, n_s=max(run.cfg.sg_n_s_list), policy="lemma")
    run.manifest["analyticity"] = rep.as_dict()
    print(f"mean={ref.mean:.6f} variance={ref.variance:.6f} knots={ref.eta}")


def cmd_analyze(args) -> int:
    rep = analyticity.analyze(
        args.delta, args.d, args.a_min, args.a_max, n_s=args.n_s, beta=args.beta, policy=args.policy
    )
    if args.json:
        print(rep.to_json())
    else:
        print(rep.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "analyticity.json").write_text(rep.to_json())
    return 0


COMMANDS = {
    "solve": cmd_solve,
    "sg-study": cmd_sg_study,
    "truncation-study": cmd_truncation_study,
    "fem-study": cmd_fem_study,
    "reproduce-paper": cmd_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochdomain", description="Sparse-grid collocation on randomly deformed domains.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="YAML experiment config")
        s.add_argument("--out", help="output directory")
        s.add_argument("--jobs", type=int, help="worker processes for node solves")
        s.add_argument("--paper-scale", action="store_true", help="257 x 257 mesh profile")
        s.add_argument("--force-unsafe", action="store_true", help="skip the invertibility gate")
        s.add_argument("--cache-dir", help="persist node values and references here")
    a = sub.add_parser("analyze-region")
    a.add_argument("--delta", type=float, required=True, help="invertibility margin in (0, 1)")
    a.add_argument("--d", type=int, default=2, help="spatial dimension")
    a.add_argument("--a-min", type=float, default=1.0)
    a.add_argument("--a-max", type=float, default=1.0)
    a.add_argument("--n-s", type=int, default=None, help="stochastic dimension for rate exponents")
    a.add_argument("--beta", type=float, default=None, help="explicit radius (default 0.9 beta_max)")
    a.add_argument("--policy", choices=analyticity.BETA_POLICIES, default="min")
    a.add_argument("--json", action="store_true", help="print JSON instead of aligned text")
    a.add_argument("--out", help="also write analyticity.json here")
    return p


def _config_from_args(args) -> ExperimentConfig:
    overrides = {"out": args.out, "jobs": args.jobs, "cache_dir": args.cache_dir}
    if args.force_unsafe:
        overrides["force_unsafe"] = True
    if args.config:
        cfg = load_config(args.config, **overrides)
    else:
        cfg = desk_profile(**{k: v for k, v in overrides.items() if v is not None})
    if args.paper_scale:
        cfg = paper_profile(cfg, reference_level(cfg.ref_n_s, REFERENCE_BUDGET))
    return cfg


def reference_level(n_s: int, budget: int) -> int:
    """Largest Smolyak level whose grid in ``n_s`` dimensions has at most ``budget`` knots."""
    w = 0
    while sg.build_grid(sg.IndexRule("SM", w + 1), n_s).eta <= budget:
        w += 1
    return w


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "analyze-region":
            return cmd_analyze(args)
        cfg = _config_from_args(args)
        cfg.check_dimensions(DIMENSION_KEYS[args.command])
        run = Run(cfg, args.command)
        try:
            COMMANDS[args.command](run)
        finally:
            run.finish()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AssumptionViolatedError as exc:
        print(f"assumption gate failed: {exc} (use --force-unsafe to override)", file=sys.stderr)
        return 3
    except StochDomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
