"""Command-line front end: ``kklcert <command> --config run.toml``.

Every command reads and writes files in the output directory, so the
pipeline can be run stage by stage::

    gen-data -> train -> finetune -> train-inverse -> certify -> certificate -> simulate -> report

Exit codes: 0 success, 2 configuration error or missing input, 3 numerical
failure, 4 empirical error envelope above the certified bound.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from .certificate import CertifiedQuantities, make_certificate, v0_upper_bound
from .certify import Region, build_region, certify_all, output_enclosure, _sqrt_sum_sq
from .config import RunConfig, load_config
from .dynamics import Box, IntegrationDiverged
from .kkl import LearnedObserver, NoiseSpec, empirical_error_envelope, exact_linear_observer
from .linalg import NoSolutionError
from .net import Mlp
from .training import (ConfigError, KklDataset, TrainingError, finetune_forward,
                       generate_dataset, train_forward, train_inverse)

log = logging.getLogger("kklcert")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VALIDATION = 0, 2, 3, 4


class ValidationFailure(RuntimeError):
    pass


class Run:
    """Resolved configuration plus file locations for one output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.out
        os.makedirs(self.out, exist_ok=True)
        self.system = cfg.system.build()
        self.design = cfg.design.build(self.system.output_dim)
        if len(cfg.region.x0_lower) != self.system.state_dim:
            raise ConfigError("region.x0_lower has the wrong dimension for the system")

    def path(self, name):
        return os.path.join(self.out, name)

    def require(self, name):
        p = self.path(name)
        if not os.path.exists(p):
            raise ConfigError(f"missing input {p}; run the earlier pipeline stage first")
        return p

    def initial_box(self):
        return Box(self.cfg.region.x0_lower, self.cfg.region.x0_upper)

    def region(self) -> Region:
        if not hasattr(self, "_region"):
            self._region = build_region(self.system, self.cfg.region)
        return self._region

    def sampler(self):
        """Initial-state sampler for data generation.

        Limit-cycle regions are sampled directly, with the configured fraction
        from the band along their boundary; otherwise the initial box is used.
        """
        if self.cfg.region.mode != "limit_cycle":
            return self.initial_box()
        region, frac = self.region(), self.cfg.training.boundary_fraction
        shell = self.cfg.region.boundary_shell
        return lambda n, seed: region.sample(n, seed, frac, shell)

    def observer(self) -> LearnedObserver:
        if self.cfg.exact_linear:
            return exact_linear_observer(self.cfg.system.F, self.cfg.system.H, self.design)
        fwd_name = "forward.json" if os.path.exists(self.path("forward.json")) else "forward_initial.json"
        fwd = Mlp.load(self.require(fwd_name))
        inv = Mlp.load(self.require("inverse.json"))
        return LearnedObserver(self.design, fwd, inv)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


# -- commands -------------------------------------------------------------------

def cmd_gen_data(run: Run):
    cfg = run.cfg
    data = generate_dataset(run.system, run.design, cfg.training, run.sampler())
    data.save(run.path("dataset_pairs.csv"), run.path("dataset_colloc.csv"),
              run.path("dataset_meta.json"))
    m = data.meta
    print(f"dataset: {len(data.x)} pairs, {len(data.collocation)} collocation points, "
          f"{m['discarded']} of {m['p']} initial conditions discarded, "
          f"{m['collocation_discarded']} collocation runs discarded")


def _load_dataset(run):
    return KklDataset.load(run.require("dataset_pairs.csv"), run.require("dataset_colloc.csv"),
                           run.require("dataset_meta.json"))


def cmd_train(run: Run):
    if run.cfg.exact_linear:
        obs = run.observer()
        obs.forward_net.save(run.path("forward.json"))
        obs.inverse_net.save(run.path("inverse.json"))
        print("exact linear observer written")
        return
    tc = run.cfg.training
    data = _load_dataset(run)
    net = Mlp.init(tc.forward_dims(run.system.state_dim, run.design.n_z), seed=tc.seed)
    net, hist = train_forward(net, data, run.design, run.system, tc)
    net.save(run.path("forward_initial.json"))
    _write_rows(run.path("loss_forward.csv"), ["epoch", "loss"],
                [(i, float(v)) for i, v in enumerate(hist)])
    print(f"forward training: loss {hist[0]:.4e} -> {hist[-1]:.4e}")


def cmd_finetune(run: Run):
    net = Mlp.load(run.require("forward_initial.json"))
    net, hist = finetune_forward(net, run.design, run.system, run.region(), run.cfg.training)
    net.save(run.path("forward.json"))
    _write_rows(run.path("loss_finetune.csv"),
                ["round", "mined_mean", "mined_max", "n_mined", "final", "status", "iters"],
                [(h["round"], h["mined_mean"], h["mined_max"], h["n_mined"], float(h["final"]),
                  h["status"], h["iters"]) for h in hist])
    if hist:
        print(f"fine-tuning: mined mean {hist[0]['mined_mean']:.4e} -> {hist[-1]['final']:.4e}")


def cmd_train_inverse(run: Run):
    tc = run.cfg.training
    fwd_name = "forward.json" if os.path.exists(run.path("forward.json")) else "forward_initial.json"
    fwd = Mlp.load(run.require(fwd_name))
    inv = Mlp.init(tc.inverse_dims(run.system.state_dim, run.design.n_z), seed=tc.seed + 7)
    inv, hist = train_inverse(inv, fwd, run.region(), tc)
    inv.save(run.path("inverse.json"))
    _write_rows(run.path("loss_inverse.csv"), ["epoch", "loss"],
                [(i, float(v)) for i, v in enumerate(hist)])
    print(f"inverse training: loss {hist[0]:.4e} -> {hist[-1]:.4e}")


def cmd_certify(run: Run):
    obs = run.observer()
    region = run.region()
    region.save(run.path("region.json"))
    report, z_region = certify_all(obs, run.system, region, run.cfg.bab)
    z_region.save(run.path("z_region.json"))
    report["forward_digest"] = obs.forward_net.digest()
    report["inverse_digest"] = obs.inverse_net.digest()
    _write_json(run.path("certification.json"), report)
    for key in ("residual_sup", "lipschitz", "reconstruction"):
        r = report[key]
        flag = "  (budget exhausted before target gap)" if r["gap_unmet"] else ""
        print(f"{key:15s} upper {r['upper']:.6g}  witness {r['witness_lower']:.6g}  "
              f"boxes {r['boxes_used']}{flag}")


def _parse_quantities(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--quantities expects numbers R,L,E[,v], got {text!r}") from None
    if len(vals) not in (3, 4):
        raise ConfigError("--quantities expects R,L,E or R,L,E,v")
    try:
        return CertifiedQuantities(*vals, provenance={"source": "command-line override"})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _peak_output(run, obs):
    sim = run.cfg.simulation
    env = empirical_error_envelope(obs, run.system, _sim_box(run), sim.n_trajectories, sim.dt,
                                   sim.horizon, _transient(run), None, run.cfg.seed,
                                   sim.record_every)
    return env.peak_output


def _noise_bound(run, obs=None):
    n = run.cfg.noise
    if n.vbar > 0:
        return n.vbar
    if n.relative > 0:
        if obs is None:
            raise ConfigError("noise.relative needs a trained observer to measure the output peak")
        return n.relative * _peak_output(run, obs)
    return 0.0


def build_certificate(run: Run, quantities=None):
    notes = []
    obs = None
    if quantities is None:
        report = json.load(open(run.require("certification.json")))
        obs = run.observer()
        quantities = CertifiedQuantities.from_report(report, _noise_bound(run, obs))
        notes += report.get("notes", [])
    V0, mode = None, "none"
    if obs is not None:
        image = output_enclosure(obs.forward_net, run.region().boxes)
        sup_T = float(np.max(_sqrt_sum_sq(image)))
        V0, mode = v0_upper_bound(run.design, obs.z0, sup_T, optimized=True), "certificate-only"
    return make_certificate(run.design, quantities, optimized=True, V0=V0, V0_mode=mode,
                            notes=notes)


def cmd_certificate(run: Run, quantities=None):
    q = _parse_quantities(quantities) if quantities else None
    cert = build_certificate(run, q)
    cert.to_json(run.path("certificate.json"))
    text = cert.render_text()
    with open(run.path("certificate.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)


def _sim_box(run):
    sim = run.cfg.simulation
    if sim.x0_lower is not None:
        return Box(sim.x0_lower, sim.x0_upper)
    if run.cfg.region.mode == "limit_cycle":
        return run.region().sample(sim.n_trajectories, run.cfg.seed + 5)
    return run.initial_box()


def _transient(run):
    sim = run.cfg.simulation
    return sim.transient if sim.transient is not None else 5.0 / run.design.lambda_min


def cmd_simulate(run: Run, quantities=None):
    cfg, sim = run.cfg, run.cfg.simulation
    obs = run.observer()
    q = _parse_quantities(quantities) if quantities else None
    cert = build_certificate(run, q)
    base_q = cert.quantities
    clean_cert = make_certificate(run.design, CertifiedQuantities(
        base_q.residual_sup, base_q.lipschitz, base_q.reconstruction, 0.0))
    T_c = _transient(run)
    cases = [("noiseless", None, clean_cert.bound)]
    vbar = base_q.noise_bound if q is not None else _noise_bound(run, obs)
    if vbar > 0:
        noisy = make_certificate(run.design, CertifiedQuantities(
            base_q.residual_sup, base_q.lipschitz, base_q.reconstruction, vbar))
        cases.append(("noisy", NoiseSpec(vbar, cfg.noise.seed), noisy.bound))
    summary = {"transient": T_c, "n_trajectories": sim.n_trajectories, "cases": {}}
    rows = []
    ok_all = True
    for name, noise, bound in cases:
        env = empirical_error_envelope(obs, run.system, _sim_box(run), sim.n_trajectories,
                                       sim.dt, sim.horizon, T_c, noise, cfg.seed, sim.record_every)
        ok = bool(np.isfinite(env.envelope) and env.envelope <= bound)
        ok_all &= ok
        summary["cases"][name] = {"envelope": env.envelope, "bound": bound, "pass": ok,
                                  "noise_bound": 0.0 if noise is None else noise.vbar,
                                  "excluded_divergent": env.n_excluded,
                                  "peak_output": env.peak_output}
        err_z = env.run.error_z(obs)
        for k in range(env.run.error.shape[1]):
            for i, t in enumerate(env.run.times):
                rows.append((name, k, float(t), float(env.run.error[i, k]), float(err_z[i, k])))
        status = "PASS" if ok else "FAIL"
        print(f"{name:9s} envelope {env.envelope:.6g} <= bound {bound:.6g}: {status}"
              + (f"  ({env.n_excluded} divergent trajectories excluded)" if env.n_excluded else ""))
    _write_rows(run.path("errors.csv"), ["case", "trajectory", "t", "err", "err_z"], rows)
    _write_json(run.path("envelope.json"), summary)
    if not ok_all:
        raise ValidationFailure("empirical error envelope exceeds the certified bound")


def cmd_report(run: Run):
    report = {"config": json.loads(run.cfg.to_json()), "system": run.system.describe(),
              "design": run.design.to_dict()}
    for name in ("dataset_meta.json", "certification.json", "certificate.json", "envelope.json"):
        p = run.path(name)
        if os.path.exists(p):
            with open(p) as fh:
                doc = json.load(fh)
            if name == "dataset_meta.json":
                doc = {k: v for k, v in doc.items() if k not in ("x0", "z0")}
            report[name.rsplit(".", 1)[0]] = doc
    _write_json(run.path("report.json"), report)
    print(f"report written to {run.path('report.json')}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "finetune": cmd_finetune,
    "train-inverse": cmd_train_inverse, "certify": cmd_certify,
    "certificate": cmd_certificate, "simulate": cmd_simulate, "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="kklcert", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="TOML run configuration (defaults if omitted)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--threads", type=int, help="worker threads for verification")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--quantities", help="override certified quantities: R,L,E[,v]")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out = args.out
        cfg.bab.workers = args.threads or os.cpu_count() or 1
        cfg.validate()
        run = Run(cfg)
        t0 = time.perf_counter()
        fn = COMMANDS[args.command]
        if args.command in ("certificate", "simulate"):
            fn(run, args.quantities)
        else:
            fn(run)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, IntegrationDiverged, NoSolutionError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValidationFailure as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
