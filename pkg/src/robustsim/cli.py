"""Command-line harness.

    robustsim simulate --protocol echo --n 1024 --eps 0.001 --seed 7 --trace run.jsonl
    robustsim experiment grid.json --out results.csv
    robustsim analyze run.jsonl --ledger ledger.csv

Exit codes: 0 success, 1 simulation failure (or lemma violations for
``analyze``), 2 configuration error or malformed input.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click

from robustsim.channel import MODELS, PRESETS
from robustsim.engine import RunConfig, Simulation
from robustsim.potential import MalformedTrace, analyze_file, analyze_result, write_trace
from robustsim.protocols import PROTOCOLS

EXPERIMENT_COLUMNS = ("protocol", "m", "n", "eps", "delta", "seed", "success", "logical_bits",
                      "physical_bits", "overhead", "epochs", "phi_final")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(click.ClickException):
    exit_code = EXIT_CONFIG


def _pir_kwargs(protocol: str, pir_n: int | None, db_hex: str | None, n: int) -> dict:
    if protocol != "pir2":
        return {}
    kw = {}
    if db_hex:
        from robustsim.pir import Database
        text = Path(db_hex).read_text()
        kw["db"] = Database.from_hex(text, pir_n)
    elif pir_n:
        kw["N"] = pir_n
    return kw


def build_simulation(cfg: RunConfig) -> Simulation:
    """Validate a config by building its simulation; any problem is a ConfigError."""
    try:
        return Simulation(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Robust simulation of client-server protocols over noisy channels."""


@main.command()
@click.option("--protocol", type=click.Choice(PROTOCOLS), default="echo", show_default=True)
@click.option("--n", "n", type=int, default=1024, show_default=True, help="Rounds of the original protocol.")
@click.option("--m", "m", type=int, default=1, show_default=True, help="Number of members.")
@click.option("--eps", type=float, default=0.0, show_default=True, help="Channel error rate.")
@click.option("--delta", type=float, default=None, help="Target failure probability [default: 1/n].")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--model", type=click.Choice(MODELS), default="iid", show_default=True)
@click.option("--preset", type=click.Choice(PRESETS), default="random", show_default=True,
              help="Placement for the budgeted model.")
@click.option("--burst-len", type=int, default=8, show_default=True)
@click.option("--k-r", "k_r", type=int, default=64, show_default=True, help="Constant in the epoch budget R.")
@click.option("--pir-n", type=int, default=None, help="pir2: database size N.")
@click.option("--db-hex", type=click.Path(exists=True, dir_okay=False), default=None,
              help="pir2: database as a hex file.")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None,
              help="Write the per-epoch trace (JSON lines) here.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="Write the JSON run report here instead of stdout.")
@click.option("--timing", is_flag=True, help="Include wall time (the report is then not reproducible).")
def simulate(protocol, n, m, eps, delta, seed, model, preset, burst_len, k_r, pir_n, db_hex,
             trace_path, report_path, timing):
    """Run one simulation; exit 0 on success, 1 on failure, 2 on a config error."""
    try:
        kw = _pir_kwargs(protocol, pir_n, db_hex, n)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig(protocol=protocol, n=n, m=m, epsilon=eps, delta=delta, model=model, seed=seed,
                    k_r=k_r, protocol_kwargs=kw, preset=preset, burst_len=burst_len,
                    trace=trace_path is not None)
    result = build_simulation(cfg).run()
    report = result.report()
    if not timing:
        report.pop("wall_time")
    if trace_path:
        write_trace(result, trace_path)
        report["phi_final"] = str(analyze_result(result).phi_final)
    # db objects are not JSON; the report keeps the protocol kwargs that are
    report["config"]["protocol_kwargs"] = {k: v for k, v in kw.items() if k != "db"}
    text = json.dumps(report, sort_keys=True, indent=2)
    if report_path:
        Path(report_path).write_text(text + "\n")
    else:
        click.echo(text)
    sys.exit(EXIT_OK if result.success else EXIT_FAIL)


def load_experiment(path) -> list[RunConfig]:
    """Expand a JSON grid into run configs, in a fixed order: eps, then seed."""
    try:
        grid = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(grid, dict):
        raise ConfigError("config must be a JSON object")
    known = {"protocol", "n", "m", "eps", "delta", "model", "seeds", "k_r", "preset", "burst_len",
             "trace", "out", "protocol_kwargs"}
    extra = set(grid) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    eps = grid.get("eps", [0.0])
    eps = eps if isinstance(eps, list) else [eps]
    seeds = grid.get("seeds", 1)
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    trace = bool(grid.get("trace", True))
    cfgs = []
    for e in eps:
        for s in seeds:
            cfgs.append(RunConfig(protocol=grid.get("protocol", "echo"), n=grid.get("n", 1024),
                                  m=grid.get("m", 1), epsilon=float(e), delta=grid.get("delta"),
                                  model=grid.get("model", "iid"), seed=int(s), k_r=grid.get("k_r", 64),
                                  preset=grid.get("preset", "random"),
                                  burst_len=grid.get("burst_len", 8),
                                  protocol_kwargs=dict(grid.get("protocol_kwargs", {})), trace=trace))
    for cfg in cfgs:
        try:
            cfg.params()
        except ValueError as exc:
            raise ConfigError(f"eps={cfg.epsilon}: {exc}") from exc
    return cfgs


def experiment_row(cfg: RunConfig) -> dict:
    result = build_simulation(cfg).run()
    phi = analyze_result(result).phi_final if cfg.trace else ""
    return {"protocol": cfg.protocol, "m": cfg.m, "n": cfg.n, "eps": cfg.epsilon,
            "delta": cfg.resolved_delta(), "seed": cfg.seed, "success": int(result.success),
            "logical_bits": max(result.logical_bits), "physical_bits": max(result.physical_bits),
            "overhead": f"{result.overhead:.6f}", "epochs": result.epochs, "phi_final": phi}


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="CSV output [default: the config's \"out\" key, else stdout].")
def experiment(config, out_path):
    """Run a parameter grid from a JSON config and write one CSV row per run."""
    cfgs = load_experiment(config)
    if out_path is None:
        out_path = json.loads(Path(config).read_text()).get("out")
    fh = open(out_path, "w", newline="") if out_path else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=EXPERIMENT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for cfg in cfgs:
            w.writerow(experiment_row(cfg))
            fh.flush()  # rows written so far survive an interrupt
    finally:
        if fh is not sys.stdout:
            fh.close()


@main.command()
@click.argument("trace", type=click.Path(exists=True, dir_okay=False))
@click.option("--ledger", "ledger_path", type=click.Path(dir_okay=False), default=None,
              help="Write the per-epoch potential ledger (CSV) here.")
def analyze(trace, ledger_path):
    """Replay a trace through the potential analyzer and report lemma violations."""
    try:
        rep = analyze_file(trace)
    except (MalformedTrace, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed trace: {exc}") from exc
    if ledger_path:
        Path(ledger_path).write_text(rep.ledger_csv())
    click.echo(f"epochs={len(rep.rows)} phi_final={rep.phi_final} L_final={rep.L_final} "
               f"success={rep.success} violations={len(rep.violations)}")
    for v in rep.violations:
        click.echo(f"VIOLATION {v}")
    sys.exit(EXIT_OK if rep.ok else EXIT_FAIL)


if __name__ == "__main__":
    main()
