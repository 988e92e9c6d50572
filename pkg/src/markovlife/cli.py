"""Command-line interface.

Exit codes: 0 success, 2 bad input, 3 computation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bondmarket as bm
from .emfit import FitConfig
from .errors import MarkovLifeError, NumericError
from .gramcharlier import JacobiReference, gc_approximation, gc_cdf, gc_quantile, gc_table
from .io import (InputError, RunManifest, fmt, model_to_dict, read_curve_csv, read_model_json,
                 read_product_json, tool_version, write_columns, write_curve_csv, write_json)
from .lifeval import (build_product_model, equivalence_premium, moment_stack,
                      raw_moments_of_pv, reserve_matrix, thiele_solve)
from .mcsim import SimulationConfig, simulate_pv, write_raw

log = logging.getLogger("markovlife")

EXIT_OK, EXIT_INPUT, EXIT_COMPUTE = 0, 2, 3
QUANTILES = (0.95, 0.97, 0.99, 0.995)


def _floats(text: str, n=None, name="list"):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise InputError(f"{name}: expected {n} values, got {len(vals)}")
    return vals


def _grid(text: str) -> np.ndarray:
    """``a:b:step`` or a comma list."""
    if ":" in text:
        parts = _floats(text.replace(":", ","), 3, "grid")
        lo, hi, step = parts
        if step <= 0 or hi < lo:
            raise InputError(f"bad grid {text!r}")
        k = int(round((hi - lo) / step))
        return lo + step * np.arange(k + 1)
    return np.array(_floats(text, name="maturities"))


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, out: Path, inputs: dict, config: dict, outputs: list, seed=None):
    name = out / f"{args.command}_manifest.json"
    RunManifest(args.command, inputs, config, seed, tool_version(),
                [str(p) for p in outputs], list(args.argv)).write(name)
    return name


def cmd_calibrate(args) -> int:
    curve = read_curve_csv(args.curve)
    rates = None if args.rates == "auto" else np.array(_floats(args.rates, args.p, "--rates"))
    cfg = FitConfig(p=args.p, structure=args.structure, initial=args.initial,
                    max_iters=args.max_iters, tol=args.tol, seed=args.seed,
                    restarts=args.restarts)
    t0 = time.time()
    res = bm.calibrate(curve, cfg, rates)
    out = _outdir(args)
    report = res.report()
    report["runtime_seconds"] = time.time() - t0
    files = [out / "model.json", out / "fit_report.json", out / "fitted_prices.csv"]
    write_json(files[0], model_to_dict(res.model))
    write_json(files[1], report)
    write_columns(files[2], {"maturity": curve.maturities, "observed": curve.prices,
                             "model": res.model_prices})
    _manifest(args, out, {"curve": str(args.curve)}, {**cfg.to_dict(), "rates": args.rates},
              files, args.seed)
    print(json.dumps({"rho": res.curve_rho, "rho_used": res.rho, "loglik": res.loglik,
                      "max_price_error": res.max_price_error, "mode": res.mode}))
    return EXIT_OK


def cmd_price(args) -> int:
    m = read_model_json(args.model)
    T = _grid(args.maturities)
    state = None if args.state is None else args.state - 1
    prices = bm.bond_prices(m, T, state)
    out = _outdir(args)
    path = out / "prices.csv"
    write_columns(path, {"maturity": T, "price": prices})
    _manifest(args, out, {"model": str(args.model)}, {"maturities": args.maturities,
                                                      "state": args.state}, [path])
    for t, p in zip(T, prices):
        print(f"{fmt(t)},{fmt(p)}")
    return EXIT_OK


def cmd_yield(args) -> int:
    m = read_model_json(args.model)
    T = _grid(args.maturities)
    state = None if args.state is None else args.state - 1
    y = bm.yield_curve(m, T, state)
    f = np.array([bm.forward_rate(m, 0.0, t, state) for t in T])
    out = _outdir(args)
    path = out / "yields.csv"
    write_columns(path, {"maturity": T, "yield": y, "forward": f})
    _manifest(args, out, {"model": str(args.model)}, {"maturities": args.maturities,
                                                      "state": args.state}, [path])
    return EXIT_OK


def cmd_g2pp(args) -> int:
    params = dict(bm.G2PP_REFERENCE_PARAMS)
    if args.params:
        try:
            params.update(json.loads(Path(args.params).read_text()))
        except json.JSONDecodeError as exc:
            raise InputError(f"invalid JSON: {exc.msg}", args.params, exc.lineno) from None
    T = _grid(args.maturities)
    curve = bm.g2pp_prices(params, T, printed_psi=args.printed_psi)
    rho = bm.rho_from_prices(curve)
    out = _outdir(args)
    path = out / "g2pp_curve.csv"
    write_curve_csv(path, curve)
    _manifest(args, out, {}, {"params": params, "maturities": args.maturities,
                              "printed_psi": args.printed_psi}, [path])
    print(json.dumps({"rho": rho}))
    return EXIT_OK


def _product_model(args):
    rate = read_model_json(args.model)
    prod = read_product_json(args.product)
    try:
        m = build_product_model(prod.intensity, prod.payments, rate, prod.horizon)
    except MarkovLifeError as exc:
        raise InputError(f"model {args.model} and product {args.product} do not fit: {exc}") from None
    return m, prod, (prod.start, None)


def _parse_sim(text):
    vals = _floats(text, 2, "--simulate")
    return int(vals[0]), int(vals[1])


def cmd_value(args) -> int:
    m, prod, start = _product_model(args)
    out = _outdir(args)
    results = {"states": prod.states, "rate_states": m.p, "horizon": m.horizon}
    files = []
    theta = args.theta
    if args.premium_solve:
        pr = equivalence_premium(m, start)
        theta = pr.theta
        results["premium"] = {"theta": pr.theta, "residual": pr.residual,
                              "reserve_at_zero": pr.reserve_at_zero,
                              "sensitivity": pr.sensitivity}
    results["theta"] = theta
    w = m.start_vector(start)
    V = reserve_matrix(m, 0.0, m.horizon, theta)
    results["reserve"] = float(w @ V.sum(axis=1))
    results["state_reserves"] = V.sum(axis=1).tolist()
    sol = thiele_solve(m, grid=np.linspace(0, m.horizon, int(m.horizon) + 1), theta=theta)
    path = out / "reserves.csv"
    write_columns(path, {"time": sol.times, **{f"V{j + 1}": sol.values[:, j]
                                               for j in range(m.n)}})
    files.append(path)
    K = args.moments
    if args.gc:
        gc = _floats(args.gc, 5, "--gc")
        K = max(K, int(gc[4]))
    if K:
        mom = raw_moments_of_pv(m, start, K, theta)
        results["raw_moments"] = mom.tolist()
        if K >= 2:
            results["variance"] = float(mom[2] - mom[1] ** 2)
    if args.gc:
        ref = JacobiReference(gc[0], gc[1], gc[2], gc[3])
        approx = gc_approximation(mom, ref, int(gc[4]))
        path = out / "gc_table.csv"
        tab = gc_table(approx)
        write_columns(path, {"x": tab[:, 0], "density": tab[:, 1], "cdf": tab[:, 2]})
        files.append(path)
        _, clamps = gc_cdf(approx, tab[:, 0], report=True)
        qs = {str(q): gc_quantile(approx, q) for q in QUANTILES}
        results["gc"] = {"coefficients": approx.coefficients.tolist(),
                         "quantiles": {k: v.value for k, v in qs.items()},
                         "non_monotone": {k: v.non_monotone for k, v in qs.items()},
                         "cdf_at_b": float(gc_cdf(approx, ref.b)),
                         "cdf_clamped_points": clamps}
    seed = None
    if args.simulate:
        n, seed = _parse_sim(args.simulate)
        sample = simulate_pv(m, start, SimulationConfig(n, seed, args.workers), theta)
        mc = dict(sample.summary)
        mean, se = sample.raw_moment(1)
        mc["mean_se"] = se
        if K:
            mc["analytic_mean"] = float(mom[1])
            mc["mean_z"] = float((mean - mom[1]) / se) if se > 0 else 0.0
        if K >= 2:
            m2, se2 = sample.raw_moment(2)
            mc["second_moment"], mc["second_moment_se"] = m2, se2
            mc["analytic_second_moment"] = float(mom[2])
        results["simulation"] = mc
        path = out / "histogram.csv"
        h = sample.histogram()
        write_columns(path, {"x": h[:, 0], "density": h[:, 1]})
        files.append(path)
    path = out / "results.json"
    write_json(path, results)
    files.append(path)
    _manifest(args, out, {"model": str(args.model), "product": str(args.product)},
              {"theta": args.theta, "premium_solve": args.premium_solve, "moments": args.moments,
               "gc": args.gc, "simulate": args.simulate, "workers": args.workers}, files, seed)
    print(json.dumps({k: results[k] for k in ("theta", "reserve") if k in results}))
    return EXIT_OK


def cmd_simulate(args) -> int:
    m, prod, start = _product_model(args)
    theta = args.theta
    if args.premium_solve:
        theta = equivalence_premium(m, start).theta
    sample = simulate_pv(m, start, SimulationConfig(args.paths, args.seed, args.workers), theta)
    out = _outdir(args)
    files = [out / "simulation.json", out / "histogram.csv"]
    write_json(files[0], {"theta": theta, **sample.summary})
    h = sample.histogram()
    write_columns(files[1], {"x": h[:, 0], "density": h[:, 1]})
    if args.raw:
        write_raw(args.raw, sample)
        files.append(Path(args.raw))
    _manifest(args, out, {"model": str(args.model), "product": str(args.product)},
              {"paths": args.paths, "workers": args.workers, "theta": theta}, files, args.seed)
    print(json.dumps(sample.summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="markovlife", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="fit a Markovian rate model to a bond curve")
    c.add_argument("curve")
    c.add_argument("--p", type=int, required=True)
    c.add_argument("--structure", choices=["general", "coxian"], default="general")
    c.add_argument("--rates", default="auto", help="'auto' or comma list of state rates")
    c.add_argument("--initial", choices=["free", "first"], default="first")
    c.add_argument("--restarts", type=int, default=5)
    c.add_argument("--max-iters", type=int, default=3000)
    c.add_argument("--tol", type=float, default=1e-10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_calibrate)

    for name, fn, hlp in (("price", cmd_price, "zero-coupon prices from a model"),
                          ("yield", cmd_yield, "yield and forward curves from a model")):
        c = sub.add_parser(name, help=hlp)
        c.add_argument("model")
        c.add_argument("--maturities", default="1:30:1")
        c.add_argument("--state", type=int, help="1-based initial rate state (default: pi)")
        c.add_argument("--out", default=".")
        c.set_defaults(func=fn)

    c = sub.add_parser("g2pp", help="two-factor Vasicek reference curve")
    c.add_argument("--params", help="JSON file overriding the default parameters")
    c.add_argument("--maturities", default="1:120:1")
    c.add_argument("--printed-psi", action="store_true")
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_g2pp)

    c = sub.add_parser("value", help="reserves, moments, premium and distribution of a product")
    c.add_argument("model")
    c.add_argument("product")
    c.add_argument("--theta", type=float, default=0.0)
    c.add_argument("--premium-solve", action="store_true")
    c.add_argument("--moments", type=int, default=0)
    c.add_argument("--gc", help="alpha,beta,a,b,N")
    c.add_argument("--simulate", help="N,seed")
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_value)

    c = sub.add_parser("simulate", help="Monte Carlo present values of a product")
    c.add_argument("model")
    c.add_argument("product")
    c.add_argument("--paths", type=int, default=100_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--theta", type=float, default=0.0)
    c.add_argument("--premium-solve", action="store_true")
    c.add_argument("--raw", help="write raw present values (binary) to this file")
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (MarkovLifeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
