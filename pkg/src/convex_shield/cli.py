"""Command-line front end: gen, train, verify, export-plots, report.

Every command works on a run directory (``--out``) holding::

    dataset.csv  constraints.json  provenance.json          (gen)
    model_<kind>.json  metrics_<kind>.csv  eval_<kind>.json  (train)
    violations_<kind>.json                                  (verify)
    plot_<kind>_*.csv                                       (export-plots)

Exit codes: 0 success, 1 safe model violated a constraint, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import constraints as cs
from .benchmarks import BENCHMARK_NAMES, MODEL_KINDS, build_model, caslite, generate, get_benchmark, probe_set
from .netcore import ModelFormatError, deserialize_model, serialize_model
from .safepredictor import SafePredictorModel
from .training import Dataset, TrainConfig, TrainingAborted, split_dataset, train, write_metrics_csv
from .verifier import RunSummary, check_violations, evaluate, fit_metric, report_table

log = logging.getLogger("convex_shield")

EXIT_OK, EXIT_VIOLATION, EXIT_ERROR = 0, 1, 2
# CAS-lite proximity slice is taken at this closing rate, clamped into the grid
SLICE_RATE_FTPS = -180.0


class CliError(Exception):
    def __init__(self, message: str, **detail):
        super().__init__(message)
        self.detail = detail


@dataclass
class ExperimentConfig:
    benchmark: str = "synthetic1d"
    a_prev: str | None = None
    model: str = "safe"
    train: TrainConfig | None = None
    probe_resolution: int | None = None
    output_dir: str = "run"
    train_fraction: float = 0.8

    def validate(self):
        get_benchmark(self.benchmark)
        if (self.benchmark == "caslite") != (self.a_prev is not None):
            raise ValueError("a_prev is required for caslite and not allowed otherwise")
        if self.a_prev is not None and self.a_prev.lower() not in caslite.A_PREV:
            raise ValueError(f"a_prev must be one of {sorted(caslite.A_PREV)}")
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}")
        if self.probe_resolution is not None and self.probe_resolution < 2:
            raise ValueError("probe_resolution must be at least 2")
        return self

    @property
    def train_config(self) -> TrainConfig:
        return self.train or get_benchmark(self.benchmark).train_config()

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _load_json(path: Path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} is not valid JSON: {path}: {exc}") from None


def _write_json(path: Path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_config(args) -> ExperimentConfig:
    """Config file first, then command-line flags on top."""
    raw = _load_json(Path(args.config), "config") if getattr(args, "config", None) else {}
    unknown = set(raw) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise CliError(f"unknown config fields: {sorted(unknown)}")
    train_raw = raw.pop("train", None)
    cfg = ExperimentConfig(**raw)
    for name, attr in [("benchmark", "benchmark"), ("a_prev", "a_prev"), ("model", "model"), ("out", "output_dir")]:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "probe_resolution", None) is not None:
        cfg.probe_resolution = args.probe_resolution
    base = get_benchmark(cfg.benchmark).train if cfg.benchmark in BENCHMARK_NAMES else {}
    overrides = dict(base, **(train_raw or {}))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    try:
        cfg.train = TrainConfig.from_json(overrides)
        return cfg.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None


# -- run-directory helpers ----------------------------------------------------


def read_run(out: Path):
    prov = _load_json(out / "provenance.json", "provenance")
    spec = _load_json(out / "constraints.json", "constraints")
    try:
        constraints, domain = cs.load_constraints(spec)
    except cs.SpecificationError as exc:
        raise CliError(f"constraints file is malformed: {exc}") from None
    if cs.spec_hash(constraints, domain) != prov.get("constraint_spec_hash"):
        raise CliError("constraints.json does not match the hash recorded in provenance.json")
    n_inputs = domain.dim
    try:
        ds = Dataset.from_csv(out / "dataset.csv", n_inputs)
    except FileNotFoundError:
        raise CliError(f"dataset not found: {out / 'dataset.csv'}") from None
    return prov, constraints, domain, ds


def load_model(path: Path):
    try:
        return deserialize_model(Path(path).read_bytes())
    except FileNotFoundError:
        raise CliError(f"model not found: {path}") from None
    except ModelFormatError as exc:
        raise CliError(f"model file is malformed: {exc}") from None


# -- commands -----------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig) -> int:
    seed = cfg.train_config.seed
    ds, constraints, domain, desc = generate(cfg.benchmark, seed, cfg.a_prev)
    out = cfg.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        ds.to_csv(out / "dataset.csv")
        _write_json(out / "constraints.json", cs.dump_constraints(constraints, domain))
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}") from None
    prov = {
        "benchmark": cfg.benchmark,
        "a_prev": cfg.a_prev,
        "seed": seed,
        "generator": desc,
        "n_samples": len(ds),
        "n_constraints": len(constraints),
        "constraint_spec_hash": cs.spec_hash(constraints, domain),
        "dataset_sha256": _sha256(out / "dataset.csv"),
        "version": __version__,
    }
    _write_json(out / "provenance.json", prov)
    print(f"wrote {len(ds)} samples and {len(constraints)} constraints to {out}")
    return EXIT_OK


def _probes(cfg, prov, constraints, domain, ds):
    return probe_set(prov["benchmark"], constraints, domain, ds, cfg.probe_resolution, prov.get("seed", 0))


def cmd_train(cfg: ExperimentConfig) -> int:
    out = cfg.out
    prov, constraints, domain, ds = read_run(out)
    if prov["benchmark"] != cfg.benchmark:
        log.info("using benchmark %s recorded in provenance", prov["benchmark"])
    tc = cfg.train_config
    train_ds, test_ds = split_dataset(ds, cfg.train_fraction, tc.seed)
    model = build_model(prov["benchmark"], cfg.model, constraints, domain, tc.seed)
    probes, probe_spec = _probes(cfg, prov, constraints, domain, ds)

    def violations(m):
        return check_violations(m, constraints, probes).violating_probes

    def metric(m):
        return fit_metric(m, test_ds)[1]

    try:
        model, history = train(model, train_ds, tc, metric=metric, violations=violations)
    except TrainingAborted as exc:
        raise CliError(f"training aborted: {exc}") from None
    (out / f"model_{cfg.model}.json").write_bytes(serialize_model(model))
    write_metrics_csv(history, out / f"metrics_{cfg.model}.csv")
    name, value = fit_metric(model, test_ds)
    evaluation = {
        "model": cfg.model,
        "metric": name,
        "test": value,
        "train": fit_metric(model, train_ds)[1],
        "n_train": len(train_ds),
        "n_test": len(test_ds),
        "train_config": tc.to_json(),
        "checkpoint_violations": [h.violations for h in history if h.epoch % tc.checkpoint_every == 0 or h.epoch == tc.epochs],
        "probe_spec": probe_spec,
    }
    if isinstance(model, SafePredictorModel):
        evaluation["structure"] = model.describe()
    _write_json(out / f"eval_{cfg.model}.json", evaluation)
    bad = max(evaluation["checkpoint_violations"], default=0)
    print(f"{cfg.model}: {name} {value:.4f} on {len(test_ds)} test samples; max checkpoint violations {bad}")
    if cfg.model == "safe" and bad > 0:
        print("error: safe model violated its constraints during training", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, model_file: str | None = None, constraints_file: str | None = None) -> int:
    out = cfg.out
    prov, constraints, domain, ds = read_run(out)
    if constraints_file is not None:
        try:
            constraints, domain = cs.load_constraints(_load_json(Path(constraints_file), "constraints"))
        except cs.SpecificationError as exc:
            raise CliError(f"constraints file is malformed: {exc}") from None
    path = Path(model_file) if model_file else out / f"model_{cfg.model}.json"
    model = load_model(path)
    if isinstance(model, SafePredictorModel):
        expected = cs.spec_hash(constraints, domain)
        if model.spec_hash() != expected:
            raise CliError(
                "model was built against different constraints; refusing to verify",
                model_hash=model.spec_hash(),
                constraints_hash=expected,
            )
    probes, probe_spec = _probes(cfg, prov, constraints, domain, ds)
    report = check_violations(model, constraints, probes, probe_spec)
    body = report.to_json()
    try:
        body["model_file"] = str(path.resolve().relative_to(out.resolve()))
    except ValueError:
        body["model_file"] = str(path)
    body["model_sha256"] = _sha256(path)
    body["model_kind"] = model.kind
    _write_json(out / f"violations_{model.kind}.json", body)
    print(json.dumps(body, indent=1, sort_keys=True))
    if model.kind == "safe" and report.violating_probes > 0:
        return EXIT_VIOLATION
    return EXIT_OK


def _table_csv(path: Path, header: list[str], rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_export_plots(cfg: ExperimentConfig) -> int:
    out = cfg.out
    prov, constraints, domain, ds = read_run(out)
    model = load_model(out / f"model_{cfg.model}.json")
    bench = prov["benchmark"]
    safe = isinstance(model, SafePredictorModel)
    written = []
    if bench in ("synthetic1d", "synthetic2d"):
        res = cfg.probe_resolution or (1001 if bench == "synthetic1d" else 101)
        lo, hi = domain.lo[0], domain.hi[0]
        axes = [np.linspace(l, h, res) for l, h in zip(lo, hi)]
        x = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
        cols = [np.asarray(evaluate(model, x))[:, 0]]
        header = list(ds.input_names) + ["F"]
        if safe:
            for key, g in zip(model.partition.keys, model.head_outputs(x)):
                header.append(f"G_{key}")
                cols.append(np.asarray(g)[:, 0])
            w = model.weights(x)
            for j, key in enumerate(model.partition.keys):
                header.append(f"w_{key}")
                cols.append(w[:, j])
        path = out / f"plot_{cfg.model}_{'curve' if bench == 'synthetic1d' else 'surface'}.csv"
        _table_csv(path, header, np.column_stack([x] + cols))
        written.append(path)
    elif bench == "caslite":
        grid = caslite.CasLiteGrid()
        rates = grid.v_values - grid.v_intruder
        rate = rates[np.argmin(np.abs(rates - np.clip(SLICE_RATE_FTPS, rates[0], rates[-1])))]
        h, tau = np.meshgrid(grid.h_values, grid.tau_values, indexing="ij")
        x = np.stack([np.full(h.size, rate), h.ravel(), tau.ravel()], axis=1)
        header = ["vO_minus_vI", "h", "tau"]
        cols = []
        if safe:
            prox = model.proximities(model.precompute(x))
            for j, con in enumerate(model.constraints):
                header.append(f"prox_{con.name}")
                cols.append(prox[:, j])
        scores = evaluate(model, x)
        header += [f"score_{a}" for a in caslite.ADVISORIES] + ["advisory"]
        cols += [scores[:, i] for i in range(9)] + [np.argmax(scores, axis=1)]
        path = out / f"plot_{cfg.model}_proximity_slice.csv"
        _table_csv(path, header, np.column_stack([x] + cols))
        written.append(path)
    else:
        raise CliError(f"unknown benchmark {bench!r}")
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_report(run_dirs: list[str], out: Path) -> int:
    runs = []
    for d in run_dirs:
        d = Path(d)
        prov = _load_json(d / "provenance.json", "provenance")
        label = prov["a_prev"].upper() if prov.get("a_prev") else prov["benchmark"]
        for kind in MODEL_KINDS:
            if not (d / f"eval_{kind}.json").exists():
                continue
            ev = _load_json(d / f"eval_{kind}.json", "evaluation")
            viol = _load_json(d / f"violations_{kind}.json", "violation report")
            runs.append(RunSummary(kind.capitalize(), label, float(ev["test"]), float(viol["percentage"])))
    text, table = report_table(runs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(text)
    (out / "table.csv").write_text(table)
    print(text, end="")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convex-shield", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        sp.add_argument("--config", help="JSON experiment config; flags override it")
        sp.add_argument("--out", help="run directory")
        sp.add_argument("--benchmark", choices=BENCHMARK_NAMES)
        sp.add_argument("--a-prev", dest="a_prev", choices=sorted(caslite.A_PREV))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--probe-resolution", dest="probe_resolution", type=int)
        if model:
            sp.add_argument("--model", choices=MODEL_KINDS)

    common(sub.add_parser("gen", help="write dataset, constraints and provenance"), model=False)
    common(sub.add_parser("train", help="train a model and record per-epoch metrics"))
    v = sub.add_parser("verify", help="count constraint violations on a probe set")
    common(v)
    v.add_argument("--model-file", help="model JSON (default: <out>/model_<kind>.json)")
    v.add_argument("--constraints", help="constraint JSON (default: <out>/constraints.json)")
    common(sub.add_parser("export-plots", help="write plot-ready CSV curves and surfaces"))
    r = sub.add_parser("report", help="accuracy/violation table over run directories")
    r.add_argument("runs", nargs="+", help="run directories")
    r.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.runs, Path(args.out))
        if args.command != "gen" and args.benchmark is None and args.out:
            prov_path = Path(args.out) / "provenance.json"
            if prov_path.exists():
                prov = _load_json(prov_path, "provenance")
                args.benchmark, args.a_prev = prov["benchmark"], args.a_prev or prov.get("a_prev")
        cfg = build_config(args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, args.model_file, args.constraints)
        return cmd_export_plots(cfg)
    except CliError as exc:
        print(json.dumps({"error": str(exc), **exc.detail}, sort_keys=True), file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError) as exc:
        # keep exit code 1 reserved for safety violations
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
