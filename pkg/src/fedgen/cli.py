"""Command-line experiment runner.

Subcommands::

    fedgen run CONFIG                 one training run -> metrics.csv, masks.csv
    fedgen sweep-epochs CONFIG        algorithms x local-epoch grid -> sweep_summary.csv
    fedgen ablate CONFIG              full FedGen and three ablations -> ablation_summary.csv
    fedgen gen-data SPEC OUT_DIR      synthetic environments as CSV + manifest.json

Exit status is 0 on success, 1 for configuration or I/O problems and 2 when
training aborts on a non-finite value.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .datasets import DatasetSpec, gen_synthetic, load_csv, save_csv
from .fedcore import RunResult, TrainingAborted, run_training

log = logging.getLogger("fedgen")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2

METRICS_HEADER = ("round", "algorithm", "train_accuracy", "test_accuracy", "loss_loc", "loss_l1",
                  "loss_pen", "B_est", "eps_est", "bound_satisfied", "wallclock_ms")
UNDEFINED = "undefined"
ABLATIONS = (
    ("full", {}),
    ("-scaling", {"disable_scaling": True}),
    ("-mask", {"disable_mask": True}),
    ("-penalty", {"disable_penalty": True}),
)


class OutputError(OSError):
    pass


# -- data ----------------------------------------------------------------------

def _load_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from None
    envs = []
    for entry in manifest["environments"]:
        envs.append(load_csv(path.parent / entry["file"], manifest.get("label_column", "label"),
                             entry["spurious_idx"], entry["alpha"], manifest["n_classes"],
                             entry["env_id"]))
    train = [e for e, entry in zip(envs, manifest["environments"]) if entry["role"] == "train"]
    test = [e for e, entry in zip(envs, manifest["environments"]) if entry["role"] == "test"]
    return train, (test[0] if test else None)


def load_environments(cfg: ExperimentConfig):
    """Training environments and optional test environment for a configuration."""
    src, spec = cfg.source, cfg.data
    try:
        if src.manifest:
            return _load_manifest(src.manifest)
        if not src.train_csv:
            envs = gen_synthetic(spec)
            return envs[:-1], envs[-1]
        if len(spec.train_alphas) != len(src.train_csv):
            raise ConfigError(f"[data] train_alphas has {len(spec.train_alphas)} values for "
                              f"{len(src.train_csv)} train_csv files")
        train = [load_csv(p, src.label_column, src.spurious_idx, a, spec.n_classes, f"train{i}")
                 for i, (p, a) in enumerate(zip(src.train_csv, spec.train_alphas))]
        test = None
        if src.test_csv:
            test = load_csv(src.test_csv, src.label_column, src.spurious_idx, spec.test_alpha,
                            spec.n_classes, "test")
        return train, test
    except (OSError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


# -- output --------------------------------------------------------------------

@contextmanager
def locked_dir(path):
    """Create ``path`` and hold an exclusive lockfile in it."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        fd = os.open(path / ".lock", os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputError(f"output directory {path} is locked by another run "
                          f"(remove {path / '.lock'} if stale)") from None
    except OSError as exc:
        raise OutputError(f"cannot write to output directory {path}: {exc.strerror}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        try:
            (path / ".lock").unlink()
        except FileNotFoundError:
            pass


def _num(v):
    return "" if v is None else repr(float(v))


def metrics_row(report, theory_enabled: bool, record_wallclock: bool) -> list[str]:
    def estimate(v):
        if not theory_enabled:
            return ""
        return UNDEFINED if v is None else repr(float(v))

    bound = "" if report.bound_satisfied is None else str(report.bound_satisfied).lower()
    return [str(report.round), report.algorithm, _num(report.train_accuracy),
            _num(report.test_accuracy), _num(report.loss_loc), _num(report.loss_l1),
            _num(report.loss_pen), estimate(report.B_est), estimate(report.eps_est), bound,
            f"{report.wallclock_ms:.3f}" if record_wallclock else ""]


def write_metrics(path, reports, theory_enabled=False, record_wallclock=False):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in reports:
            w.writerow(metrics_row(r, theory_enabled, record_wallclock))


def write_masks(path, result: RunResult):
    """Final gate values, one row per client plus the aggregate."""
    if result.mask_logits is None:
        return False
    j = result.mask_logits.shape[0]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["owner"] + [f"gate_x{i}" for i in range(j)])
        for c in result.clients:
            if c.mask is not None:
                w.writerow([str(c.id)] + [repr(float(g)) for g in c.mask.gates])
        gates = 1.0 / (1.0 + np.exp(-result.mask_logits))
        w.writerow(["aggregate"] + [repr(float(g)) for g in gates])
    return True


def write_theory(path, result: RunResult):
    s = result.theory
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "grad_norm_sq", "B_est", "eps_est", "rho", "decrease_observed",
                    "decrease_bound", "bound_satisfied", "Delta"])
        for r in s.rounds:
            w.writerow([r.round, repr(r.grad_norm_sq), UNDEFINED if r.B_est is None else repr(r.B_est),
                        UNDEFINED if r.eps_est is None else repr(r.eps_est),
                        UNDEFINED if r.rho is None else repr(r.rho), repr(r.decrease_observed),
                        repr(r.decrease_bound), str(r.bound_satisfied).lower(), repr(r.Delta)])
    summary = {"smoothness": s.smoothness, "aggregate_lhs": s.aggregate_lhs, "Delta": s.Delta,
               "aggregate_satisfied": s.aggregate_satisfied, "violations": s.violations,
               "notes": s.notes}
    Path(path).with_name("theory_summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def execute(cfg: ExperimentConfig, out_dir=None, data=None, **run_overrides) -> RunResult:
    """One run with all outputs written to ``out_dir`` (default ``cfg.output_dir``).

    Raises :class:`ConfigError`, :class:`OutputError` or
    :class:`TrainingAborted`; on abort the rounds completed so far are
    still written to ``metrics.csv``.
    """
    out = Path(out_dir or cfg.output_dir)
    try:
        run_cfg = cfg.run_config(**run_overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train, test = data if data is not None else load_environments(cfg)
    with locked_dir(out):
        try:
            (out / "config.resolved.ini").write_text(dump_config(cfg))
        except OSError as exc:
            raise OutputError(f"cannot write to {out}: {exc.strerror}") from None
        done = []

        def on_round(report, server):
            done.append(report)
            if cfg.checkpoint_every and report.round % cfg.checkpoint_every == 0:
                ckpt = out / "checkpoints"
                ckpt.mkdir(exist_ok=True)
                arrays = {f"W{i}": w for i, w in enumerate(server.params.weights)}
                arrays.update({f"b{i}": b for i, b in enumerate(server.params.biases)})
                if server.mask_logits is not None:
                    arrays["mask_logits"] = server.mask_logits
                np.savez(ckpt / f"round_{report.round:04d}.npz",
                         layer_dims=np.array(server.params.layer_dims), **arrays)

        try:
            result = run_training(run_cfg, train, test, on_round=on_round)
        except TrainingAborted:
            write_metrics(out / "metrics.csv", done, run_cfg.theory_checks, cfg.record_wallclock)
            raise
        except ValueError as exc:
            # data/config mismatches surface here, e.g. more clients than samples
            raise ConfigError(str(exc)) from None
        write_metrics(out / "metrics.csv", result.reports, run_cfg.theory_checks,
                      cfg.record_wallclock)
        write_masks(out / "masks.csv", result)
        if result.theory is not None:
            write_theory(out / "theory.csv", result)
    return result


def _final(result: RunResult):
    last = result.reports[-1]
    return last.train_accuracy, last.test_accuracy


def _write_summary(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- subcommands ---------------------------------------------------------------

def cmd_run(config_path, overrides=None) -> RunResult:
    cfg = load_config(config_path, overrides)
    return execute(cfg)


def cmd_sweep_epochs(config_path, epochs=None, algorithms=None, overrides=None):
    """Run every algorithm at every local-epoch count; returns the summary rows."""
    cfg = load_config(config_path, overrides)
    epochs = list(cfg.sweep_epochs if epochs is None else epochs)
    algorithms = list(cfg.sweep_algorithms if algorithms is None else algorithms)
    if not epochs:
        raise ConfigError("epoch list is empty")
    if not algorithms:
        raise ConfigError("algorithm list is empty")
    if any(e < 1 for e in epochs):
        raise ConfigError("local epoch counts must be at least 1")
    data = load_environments(cfg)
    root = Path(cfg.output_dir)
    rows = []
    for algo in algorithms:
        for E in epochs:
            res = execute(cfg, root / f"{algo}_E{E}", data, algorithm=algo, local_epochs=E)
            tr, te = _final(res)
            rows.append([algo, str(E), str(len(res.reports)), _num(tr), _num(te)])
            log.info("%s E=%d: train %.4f test %s", algo, E, tr, te)
    _write_summary(root / "sweep_summary.csv",
                   ["algorithm", "local_epochs", "rounds_run", "train_accuracy", "test_accuracy"],
                   rows)
    return rows


def cmd_ablate(config_path, overrides=None):
    """Full FedGen against its three single-component ablations on identical data."""
    cfg = load_config(config_path, overrides)
    if cfg.run.algorithm != "fedgen":
        raise ConfigError(f"ablate needs algorithm = fedgen, config has {cfg.run.algorithm!r}")
    data = load_environments(cfg)
    root = Path(cfg.output_dir)
    rows = []
    for name, flags in ABLATIONS:
        sub = "full" if name == "full" else f"no_{name.lstrip('-')}"
        res = execute(cfg, root / sub, data, **flags)
        tr, te = _final(res)
        rows.append([name, _num(tr), _num(te)])
        log.info("%s: train %.4f test %s", name, tr, te)
    _write_summary(root / "ablation_summary.csv", ["variant", "train_accuracy", "test_accuracy"],
                   rows)
    return rows


def cmd_gendata(spec_path, out_dir):
    """Write every generated environment as CSV plus a manifest describing them."""
    path = Path(spec_path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc.strerror}") from None
    # a bare [data] section is enough; borrow the run parser for validation
    cfg = parse_config("[run]\nalgorithm = fedavg\neta = 0.1\n" + _data_only(text, path), path)
    spec = cfg.data
    envs = gen_synthetic(spec)
    out = Path(out_dir)
    entries = []
    with locked_dir(out):
        try:
            for e in envs:
                role = "test" if e.env_id == "test" else "train"
                name = f"{e.env_id}.csv"
                save_csv(e, out / name)
                entries.append({"file": name, "env_id": e.env_id, "role": role,
                                "alpha": e.alpha, "spurious_idx": list(e.spurious_idx), "n": e.n})
            manifest = {"seed": spec.seed, "n_classes": spec.n_classes, "label_column": "label",
                        "spec": asdict(spec), "environments": entries}
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        except OSError as exc:
            raise OutputError(f"cannot write to {out}: {exc.strerror}") from None
    return manifest


def _data_only(text, path):
    import configparser

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    extra = [s for s in parser.sections() if s != "data"]
    if extra:
        raise ConfigError(f"{path}: a data spec may only contain a [data] section")
    if not parser.has_section("data"):
        return ""
    return "[data]\n" + "".join(f"{k} = {v}\n" for k, v in parser.items("data"))


# -- entry point ---------------------------------------------------------------

def _parse_set(items):
    """``section.key=value`` strings into a nested override mapping."""
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        section, dot, field_ = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out.setdefault(section, {})[field_] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedgen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="INI experiment configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        return sp

    with_config("run", "train once and write metrics")
    sw = with_config("sweep-epochs", "repeat runs over a grid of local epoch counts")
    sw.add_argument("--epochs", help="comma-separated epoch counts (default: [sweep] epochs)")
    sw.add_argument("--algorithms", help="comma-separated algorithms (default: [sweep] algorithms)")
    with_config("ablate", "compare FedGen with its component ablations")
    gd = sub.add_parser("gen-data", help="write synthetic environments to CSV")
    gd.add_argument("spec", help="INI file with a [data] section")
    gd.add_argument("out_dir")
    return p


def _csv_list(text, conv):
    if text is None:
        return None
    return [conv(p) for p in text.split(",") if p.strip()]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "gen-data":
            cmd_gendata(args.spec, args.out_dir)
            return EXIT_OK
        overrides = _parse_set(args.set)
        if args.command == "run":
            cmd_run(args.config, overrides)
        elif args.command == "sweep-epochs":
            try:
                epochs = _csv_list(args.epochs, int)
            except ValueError:
                raise ConfigError(f"--epochs must be integers, got {args.epochs!r}") from None
            cmd_sweep_epochs(args.config, epochs, _csv_list(args.algorithms, str.strip),
                             overrides)
        elif args.command == "ablate":
            cmd_ablate(args.config, overrides)
    except (ConfigError, OutputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
