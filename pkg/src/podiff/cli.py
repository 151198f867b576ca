"""``podiff`` command line.

Precedence is flag > config file > built-in default.  Outputs land in
``--out`` (or ``paths.out``) under fixed names; machine-readable results go
to files or stdout, logs go to stderr at the level named by ``PODIFF_LOG``.

Numerical modules are imported only after ``--threads`` has been applied to
the BLAS thread-count environment variables.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("podiff")

COMMANDS = ("gen-env", "gen-data", "train", "flow", "fixed-points", "intersect", "field",
            "study", "composite", "eval")

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
           "debug": logging.DEBUG}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("--env", help="environment spec JSON (default: built from config)")
    common.add_argument("--model", help="model file (PDF1)")
    common.add_argument("--oracle", action="store_true",
                        help="use the analytic Bayes denoiser instead of a model")

    hist = argparse.ArgumentParser(add_help=False)
    hist.add_argument("--agent", type=int, default=0)
    hist.add_argument("--tau", help="history vector, comma separated")
    hist.add_argument("--truth", help="target areas of the true state, comma separated")
    hist.add_argument("--taus", help="joint history 'agent:v,v,..;agent:v,..'")
    hist.add_argument("--agents", help="subset of agents, comma separated")

    flow = argparse.ArgumentParser(add_help=False)
    flow.add_argument("--num-samples", type=int)
    flow.add_argument("--max-iters", type=int)
    flow.add_argument("--convergence-tol", type=float)
    flow.add_argument("--merge-radius", type=float)
    flow.add_argument("--init-dist")

    p = argparse.ArgumentParser(prog="podiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    g = sub.add_parser("gen-env", parents=[common], help="write the environment spec")
    g.add_argument("--grid", help="rows,cols")
    g.add_argument("--num-targets", type=int)
    g.add_argument("--non-co", action="store_true", help="make areas 0 and 1 flaky")

    g = sub.add_parser("gen-data", parents=[common], help="roll out episodes into a dataset")
    g.add_argument("--episodes", type=int)
    g.add_argument("--episode-len", type=int)
    g.add_argument("--history-len", type=int)

    g = sub.add_parser("train", parents=[common], help="train a denoiser")
    g.add_argument("--data")
    g.add_argument("--epochs", type=int)
    g.add_argument("--hidden-width", type=int)
    g.add_argument("--hidden-layers", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--batch-size", type=int)

    g = sub.add_parser("flow", parents=[common, hist, flow], help="trace one flow")
    g.add_argument("--y0", help="initial point, comma separated (default: a draw)")

    sub.add_parser("fixed-points", parents=[common, hist, flow], help="attractors of one history")
    sub.add_parser("intersect", parents=[common, hist, flow], help="shared attractors of all agents")

    g = sub.add_parser("field", parents=[common, hist], help="denoiser vector field on a grid")
    g.add_argument("--dims", default="0,1")
    g.add_argument("--lo", type=float, default=-0.5)
    g.add_argument("--hi", type=float, default=1.5)
    g.add_argument("--resolution", type=int, default=21)
    g.add_argument("--fixed", help="values of the other coordinates (default zeros)")

    g = sub.add_parser("study", parents=[common, flow], help="rank / deviation study")
    g.add_argument("--data")
    g.add_argument("--rank-tol", type=float)
    g.add_argument("--epsilons", help="comma separated epsilon values")

    g = sub.add_parser("composite", parents=[common, hist, flow], help="composite diffusion run")
    g.add_argument("--K2", type=int)
    g.add_argument("--L", type=int)
    g.add_argument("--D-phi", type=float, dest="D_phi")
    g.add_argument("--agent-order")
    g.add_argument("--data", help="dataset used to measure D_phi when none is configured")
    g.add_argument("--traces", action="store_true", help="store full hop traces")

    g = sub.add_parser("eval", parents=[common], help="composite vs individual PSNR")
    g.add_argument("--histories", type=int, default=100)
    g.add_argument("--K2", type=int)
    g.add_argument("--data", help="dataset used to measure D_phi when none is configured")
    return p


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _setup_logging():
    level = _LEVELS.get(os.environ.get("PODIFF_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(message)s",
                        force=True)


def _load_config(args):
    from .config import config_from_dict, parse_config
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.flow.seed = args.seed
    if args.out:
        cfg.paths.out = args.out
    if args.model:
        cfg.paths.model = args.model
    if args.env:
        cfg.paths.env = args.env
    if getattr(args, "data", None):
        cfg.paths.dataset = args.data
    f = cfg.flow
    for name in ("num_samples", "max_iters", "convergence_tol", "merge_radius", "init_dist"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(f, name, v)
    for name in ("epochs", "hidden_width", "hidden_layers", "learning_rate", "batch_size"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg.train, name, v)
    for name in ("episodes", "episode_len", "history_len"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg.env, name, v)
    for name in ("K2", "L", "D_phi", "agent_order"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg.composite, name, v)
    if getattr(args, "rank_tol", None) is not None:
        cfg.analysis.rank_tol = args.rank_tol
    if getattr(args, "epsilons", None):
        cfg.analysis.epsilons = _floats(args.epsilons)
    if getattr(args, "grid", None):
        cfg.env.grid = _ints(args.grid)
    if getattr(args, "num_targets", None) is not None:
        cfg.env.num_targets = args.num_targets
    if getattr(args, "non_co", False):
        cfg.env.collectively_observable = False
    from .config import validate
    validate(cfg)
    return cfg


class _Ctx:
    def __init__(self, args, cfg):
        self.args, self.cfg = args, cfg
        self.out = Path(cfg.paths.out)

    def spec(self):
        from .config import env_spec_from
        from .env import EnvSpec
        if self.cfg.paths.env:
            return EnvSpec.load(self.cfg.paths.env)
        return env_spec_from(self.cfg.env, self.cfg.seed)

    def denoiser(self, spec):
        from .denoiser import ModelDenoiser, load_model
        from .env import OracleDenoiser
        if self.args.oracle:
            init = self.cfg.flow_config().init_dist
            s0 = init.sigma if init.kind == "data-marginal" else 1.0
            return OracleDenoiser(spec, sigma0=s0)
        if not self.cfg.paths.model:
            raise SystemExit("error: --model (or paths.model) is required unless --oracle is given")
        return ModelDenoiser(load_model(self.cfg.paths.model))

    def histories(self, spec, joint: bool):
        """List of ``(agent, tau)``."""
        import numpy as np
        from .env import EnvState, encode_history, observe
        a = self.args
        if a.taus:
            out = []
            for part in a.taus.split(";"):
                agent, vals = part.split(":")
                out.append((int(agent), np.array(_floats(vals))))
            return out
        if a.truth:
            if self.cfg.env.history_len != 1:
                raise SystemExit("error: --truth builds length-1 histories; use --taus")
            state = EnvState(tuple(_ints(a.truth)))
            obs = observe(spec, state, np.random.default_rng(self.cfg.seed))
            agents = _ints(a.agents) if a.agents else (
                list(range(spec.n_agents)) if joint else [a.agent])
            return [(i, encode_history(spec, i, [obs[i]], [])) for i in agents]
        if a.tau:
            return [(a.agent, np.array(_floats(a.tau)))]
        raise SystemExit("error: give --tau, --taus or --truth")

    @staticmethod
    def cond(spec, agent, tau):
        from .env import condition_vector
        return condition_vector(agent, tau, spec.n_agents)


def _cmd_gen_env(ctx):
    spec = ctx.spec()
    path = ctx.out / "env.json"
    spec.save(path)
    print(path)


def _cmd_gen_data(ctx):
    import numpy as np
    from .env import generate_dataset
    e = ctx.cfg.env
    ds = generate_dataset(ctx.spec(), e.episodes, e.history_len,
                          np.random.default_rng(ctx.cfg.seed), episode_len=e.episode_len)
    path = ctx.out / "dataset.jsonl"
    ds.save(path)
    log.info("wrote %d records", len(ds))
    print(path)


def _dataset(ctx):
    from .env import Dataset
    if not ctx.cfg.paths.dataset:
        raise SystemExit("error: --data (or paths.dataset) is required")
    return Dataset.load(ctx.cfg.paths.dataset)


def _cmd_train(ctx):
    import numpy as np
    from .denoiser import init_model, save_model, train
    from .flow import rows_to_csv
    ds = _dataset(ctx)
    t = ctx.cfg.train
    model = init_model(ds.conditions().shape[1], ds.header["state_dim"], t.hidden_width,
                       t.hidden_layers, rng=ctx.cfg.train.seed)
    res = train(model, ds, ctx.cfg.train_config(), log_every=50, logger=log)
    path = ctx.out / "model.pdf1"
    save_model(res.model, path)
    rows_to_csv(["epoch", "loss"], [[k + 1, v] for k, v in enumerate(res.loss_curve)],
                ctx.out / "loss.csv")
    print(path)


def _cmd_flow(ctx):
    import numpy as np
    from .flow import rows_to_csv, run_flow
    spec = ctx.spec()
    fn = ctx.denoiser(spec)
    (agent, tau), = ctx.histories(spec, joint=False)[:1]
    rng = np.random.default_rng(ctx.cfg.seed)
    y0 = np.array(_floats(ctx.args.y0)) if ctx.args.y0 else rng.standard_normal(spec.state_dim)
    tr = run_flow(fn, ctx.cond(spec, agent, tau), y0, ctx.cfg.flow_config())
    header = ["step"] + [f"y_{k}" for k in range(spec.state_dim)]
    rows = [[k] + list(p) for k, p in enumerate(tr.points)]
    rows_to_csv(header, rows, ctx.out / "flow.csv")
    print(ctx.out / "flow.csv")
    if not tr.converged:
        log.warning("flow did not converge in %d steps", tr.iterations)
        return 1


def _fixed_points(ctx, spec, fn, agent, tau, rng):
    from .flow import find_fixed_points
    return find_fixed_points(fn, ctx.cond(spec, agent, tau), ctx.cfg.flow_config(), rng)


def _cmd_fixed_points(ctx):
    import numpy as np
    from ._io import dump_json
    spec = ctx.spec()
    fn = ctx.denoiser(spec)
    out = []
    rng = np.random.default_rng(ctx.cfg.seed)
    for agent, tau in ctx.histories(spec, joint=False):
        fps = _fixed_points(ctx, spec, fn, agent, tau, rng)
        d = fps.to_json(tau)
        d["agent"] = agent
        out.append(d)
    dump_json(out, ctx.out / "fixed_points.json")
    print(ctx.out / "fixed_points.json")


def _cmd_intersect(ctx):
    import numpy as np
    from ._io import dump_json
    from .flow import intersect_fixed_points
    spec = ctx.spec()
    fn = ctx.denoiser(spec)
    rng = np.random.default_rng(ctx.cfg.seed)
    hist = ctx.histories(spec, joint=True)
    sets = [_fixed_points(ctx, spec, fn, a, t, rng) for a, t in hist]
    shared = intersect_fixed_points(sets, ctx.cfg.flow.merge_radius)
    obj = {"agents": [a for a, _ in hist], "states": shared.tolist(),
           "per_agent": [s.to_json(t) for s, (_, t) in zip(sets, hist)]}
    dump_json(obj, ctx.out / "intersect.json")
    print(ctx.out / "intersect.json")


def _cmd_field(ctx):
    import numpy as np
    from .flow import rows_to_csv, vector_field
    spec = ctx.spec()
    fn = ctx.denoiser(spec)
    (agent, tau), = ctx.histories(spec, joint=False)[:1]
    a = ctx.args
    fixed = _floats(a.fixed) if a.fixed else [0.0] * spec.state_dim
    header, rows = vector_field(fn, ctx.cond(spec, agent, tau), _ints(a.dims), a.lo, a.hi,
                                a.resolution, fixed)
    rows_to_csv(header, rows, ctx.out / "field.csv")
    print(ctx.out / "field.csv")


def _cmd_study(ctx):
    from .analysis import rank_deviation_study
    from ._io import dump_json
    ds = _dataset(ctx)
    spec = ds.spec
    fn = ctx.denoiser(spec)
    _, _, S = ds.arrays()
    C = ds.conditions()
    an = ctx.cfg.analysis
    fc = ctx.cfg.flow_config()
    st = rank_deviation_study(fn, C, S, fc, an.rank_tol, an.epsilons,
                              epsilon_percentiles=an.epsilon_percentiles)
    st.to_csv(ctx.out / "study.csv")
    summary = st.summary()
    summary["epsilon_percentiles"] = list(an.epsilon_percentiles)
    dump_json(summary, ctx.out / "study.json")
    print(ctx.out / "study.json")


def _d_phi(ctx, fn, spec):
    if ctx.cfg.composite.D_phi is not None:
        return ctx.cfg.composite.D_phi
    from .analysis import unique_pairs
    from .composite import measure_d_phi
    ds = _dataset(ctx)
    _, _, S = ds.arrays()
    T, S = unique_pairs(ds.conditions(), S)
    d = measure_d_phi(fn, list(zip(T, S)), ctx.cfg.flow_config())
    log.info("measured D_phi = %.6g", d)
    # a perfect denoiser measures 0; keep the budget positive
    return max(d, ctx.cfg.flow.convergence_tol)


def _cmd_composite(ctx):
    import numpy as np
    from .composite import run_composite
    from .env import encode_state
    spec = ctx.spec()
    fn = ctx.denoiser(spec)
    hist = ctx.histories(spec, joint=True)
    cc = ctx.cfg.composite_config()
    cc.D_phi = _d_phi(ctx, fn, spec)
    truth = encode_state(spec, _ints(ctx.args.truth)) if ctx.args.truth else None
    rep = run_composite(fn, [ctx.cond(spec, a, t) for a, t in hist], cc,
                        np.random.default_rng(ctx.cfg.seed), truth,
                        participants=[a for a, _ in hist], state_dim=spec.state_dim)
    rep.to_json(ctx.out / "composite.json", with_traces=ctx.args.traces)
    rep.to_csv(ctx.out / "composite.csv")
    print(ctx.out / "composite.json")


def _cmd_eval(ctx):
    import numpy as np
    from ._io import dump_json
    from .env import generate_dataset
    spec = ctx.spec()
    fn = ctx.denoiser(spec)
    cc = ctx.cfg.composite_config()
    cc.D_phi = _d_phi(ctx, fn, spec)
    rng = np.random.default_rng(ctx.cfg.seed + 1)
    held = generate_dataset(spec, -(-ctx.args.histories // ctx.cfg.env.episode_len),
                            ctx.cfg.env.history_len, rng, episode_len=ctx.cfg.env.episode_len)
    res = evaluate_psnr(fn, spec, held, cc, ctx.args.histories, rng)
    dump_json(res, ctx.out / "eval.json")
    print(ctx.out / "eval.json")


def evaluate_psnr(fn, spec, held, cc, count, rng) -> dict:
    """Composite vs individual-flow PSNR over ``count`` held-out joint histories.

    Both use ``L`` denoiser applications per estimate.  Every agent's
    individual estimate is scored, so the individual side averages over agents.
    """
    import numpy as np
    from .composite import composite_estimate, individual_estimate, psnr, run_composite
    from .env import condition_vector
    n = spec.n_agents
    recs = held.records
    groups = [recs[k:k + n] for k in range(0, len(recs) - n + 1, n)][:count]
    comp, indiv, t_comp, t_ind = [], [], [], []
    accepted = 0
    L = cc.hops(n)
    for g in groups:
        conds = [condition_vector(r.agent_id, r.tau, n) for r in g]
        truth = g[0].state
        rep = run_composite(fn, conds, cc, rng, truth, state_dim=spec.state_dim)
        est, ok = composite_estimate(rep, cc.flow.merge_radius)
        accepted += ok
        comp.append(est)
        t_comp.append(truth)
        for c in conds:
            indiv.append(individual_estimate(fn, c, L, rng, spec.state_dim, cc.init_sigma))
            t_ind.append(truth)
    # component range over the evaluation truths
    peak = float(np.ptp(np.array(t_comp))) if t_comp else 1.0
    peak = peak or 1.0
    return {"histories": len(groups), "L": L, "K2": cc.K2, "peak": peak,
            "composite_psnr": psnr(comp, t_comp, peak) if comp else None,
            "individual_psnr": psnr(indiv, t_ind, peak) if indiv else None,
            "histories_with_accepted_sample": int(accepted)}


_HANDLERS = {"gen-env": _cmd_gen_env, "gen-data": _cmd_gen_data, "train": _cmd_train,
             "flow": _cmd_flow, "fixed-points": _cmd_fixed_points, "intersect": _cmd_intersect,
             "field": _cmd_field, "study": _cmd_study, "composite": _cmd_composite,
             "eval": _cmd_eval}


def run_command(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _setup_logging()
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        from .config import ConfigError
        try:
            cfg = _load_config(args)
        except ConfigError as e:
            print(f"config error: {e}", file=sys.stderr)
            return 1
        ctx = _Ctx(args, cfg)
        code = _HANDLERS[args.command](ctx)
        return int(code or 0)
    except SystemExit as e:
        if isinstance(e.code, str):
            print(e.code, file=sys.stderr)
            return 1
        return int(e.code or 0)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
