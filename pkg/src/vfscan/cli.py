"""Command-line front door: analyze | fi | compare.

Reports always embed the resolved configuration and simulation counters,
so simulation-count comparisons are reproducible from the artifacts
alone.  All randomness flows from --seed; --workers only changes wall
time, never report bytes.
"""

import sys
from dataclasses import asdict, dataclass

import click
import numpy as np

from . import analysis, fi as fi_mod, model_io
from .engine import GRAD_TOL, Network
from .errors import ConfigError, LoadError

REPORT_SCHEMA = 1


def _echo_config(cfg: "CliConfig") -> dict:
    """Config as embedded in reports; worker count changes nothing in the
    results and must not change the bytes."""
    d = asdict(cfg)
    del d["workers"]
    return d


@dataclass
class CliConfig:
    command: str
    model: str = ""
    batch: str = ""
    mode: str = "both"
    sampling: str = "complete"
    ratio: float = 1.0
    seed: int = 0
    rho_max: int = 10
    grad_tol: float = GRAD_TOL
    workers: int = 1
    out: str = ""
    format: str = "json"
    fi_mode: str = "exhaustive"
    e: float = 0.01
    t: float = 2.576
    p: float = 0.5
    pilot: int = 100


def _load_pair(cfg: CliConfig):
    net = model_io.load_model(cfg.model)
    images, labels = model_io.load_batch(cfg.batch, n_classes=net.n_classes)
    return net, images, labels


def _plan(net: Network, cfg: CliConfig) -> analysis.SamplingPlan:
    if cfg.sampling == "complete":
        return analysis.make_complete_plan(net)
    return analysis.make_sampling_plan(net, cfg.ratio, cfg.seed)


def _net_info(net: Network) -> dict:
    return {
        "n_layers": len(net.layers),
        "n_classes": net.n_classes,
        "input_shape": list(net.input_shape),
        "conv_layers": net.conv_layers,
    }


def _layer_rows(net: Network, summaries: dict[str, analysis.ModeSummary]) -> list[dict]:
    rows = []
    for layer in net.conv_layers:
        n_l, w_l = net.activations_in(layer), net.weights_in(layer)
        row = {
            "layer": layer,
            "kind": net.layers[layer].kind,
            "channels": net.shapes[layer][0],
            "activations": n_l,
            "weights": w_l,
        }
        lvf = {}
        for name, s in summaries.items():
            lvf[name] = s.lvf.get(layer)
            row[f"lvf_{name}"] = lvf[name]
            row[f"injection_forwards_{name}"] = s.layer_forwards.get(layer, 0)
        if lvf.get("act") is not None and lvf.get("weight") is not None:
            row["lvf_total"] = (n_l * lvf["act"] + w_l * lvf["weight"]) / (n_l + w_l)
        else:
            row["lvf_total"] = None
        rows.append(row)
    return rows


def _cvf_block(summary: analysis.ModeSummary) -> dict:
    return {str(layer): {str(ch): v for ch, v in sorted(chans.items())}
            for layer, chans in sorted(summary.cvf.items())}


def cmd_analyze(cfg: CliConfig) -> dict:
    net, images, _ = _load_pair(cfg)
    plan = _plan(net, cfg)
    modes = ["activations", "filters"] if cfg.mode == "both" else [cfg.mode]

    summaries: dict[str, analysis.ModeSummary] = {}
    cvf: dict[str, dict] = {}
    sim = {}
    for mode in modes:
        _, summary = analysis.run_analysis(
            net, images, mode, plan, rho_max=cfg.rho_max,
            grad_tol=cfg.grad_tol, workers=cfg.workers)
        short = "act" if mode == "activations" else "weight"
        summaries[short] = summary
        cvf[mode] = _cvf_block(summary)
        sim[mode] = summary.counters.as_dict()

    mvf_total = None
    if "act" in summaries and "weight" in summaries:
        mvf_total = analysis.mvf_total(
            net, summaries["act"].lvf, summaries["weight"].lvf)

    report = {
        "schema": REPORT_SCHEMA,
        "kind": "analysis",
        "config": _echo_config(cfg),
        "network": _net_info(net),
        "plan_size": {m: _plan(net, cfg).size(m) for m in modes},
        "layers": _layer_rows(net, summaries),
        "cvf": cvf,
        "mvf_act": summaries["act"].mvf if "act" in summaries else None,
        "mvf_weight": summaries["weight"].mvf if "weight" in summaries else None,
        "mvf_total": mvf_total,
        "simulations": sim,
        "total_forwards": sum(s["total_forwards"] for s in sim.values()),
    }
    model_io.write_report(report, cfg.out, cfg.format)
    if mvf_total is not None:
        click.echo(f"MVF_total = {mvf_total:.6f}")
    for short, s in summaries.items():
        click.echo(f"MVF_{short} = {s.mvf:.6f}")
    click.echo(f"total forward passes = {report['total_forwards']}")
    click.echo(f"report written to {cfg.out}")
    return report


def cmd_fi(cfg: CliConfig) -> dict:
    net, images, _ = _load_pair(cfg)
    target = "weights" if cfg.mode == "filters" else "activations"

    if cfg.fi_mode == "exhaustive":
        mode = f"exhaustive-{target}"
        channels = () if cfg.sampling == "complete" else fi_mod.pick_channels(
            net, cfg.ratio, cfg.seed)
        spec = fi_mod.FiCampaignSpec(mode=mode, channels=channels, target=target,
                                     seed=cfg.seed)
        result = fi_mod.run_exhaustive_fi(net, images, spec, workers=cfg.workers)
    else:
        spec = fi_mod.FiCampaignSpec(
            mode=cfg.fi_mode, target=target, e=cfg.e, t=cfg.t, p=cfg.p,
            pilot=cfg.pilot, seed=cfg.seed)
        result = fi_mod.run_sfi(net, images, spec)

    rows = []
    for layer in net.conv_layers:
        if layer not in result.lvf and layer not in result.layer_forwards:
            continue
        rows.append({
            "layer": layer,
            "kind": net.layers[layer].kind,
            "channels": net.shapes[layer][0],
            "activations": net.activations_in(layer),
            "weights": net.weights_in(layer),
            "lvf_fi": result.lvf.get(layer),
            "forwards": result.layer_forwards.get(layer, 0),
        })
    report = {
        "schema": REPORT_SCHEMA,
        "kind": "fi",
        "config": _echo_config(cfg),
        "network": _net_info(net),
        "fi_mode": result.mode,
        "layers": rows,
        "cvf": {"fi": _nested_cvf(result.cvf)},
        "lvf": {str(k): v for k, v in sorted(result.lvf.items())},
        "misclassified": result.misclassified,
        "injections": result.injections,
        "simulations": {
            "clean_forwards": 1,
            "injection_forwards": result.batch_forwards,
            "total_forwards": 1 + result.batch_forwards,
        },
    }
    model_io.write_report(report, cfg.out, cfg.format)
    for k, v in sorted(result.lvf.items()):
        click.echo(f"LVF[{k}] = {v:.6f}")
    click.echo(f"total forward passes = {1 + result.batch_forwards}")
    click.echo(f"report written to {cfg.out}")
    return report


def _nested_cvf(cvf: dict) -> dict:
    out: dict[str, dict[str, float]] = {}
    for (layer, ch), v in sorted(cvf.items()):
        out.setdefault(str(layer), {})[str(ch)] = v
    return out


def _report_series(report: dict, series: str | None, path: str) -> dict:
    cvf = report.get("cvf", {})
    if not cvf:
        raise ConfigError(f"{path}: report carries no CVF series")
    if series is None:
        if len(cvf) != 1:
            raise ConfigError(
                f"{path}: holds series {sorted(cvf)}; pick one with --series-a/-b")
        series = next(iter(cvf))
    if series not in cvf:
        raise ConfigError(f"{path}: no CVF series {series!r} (has {sorted(cvf)})")
    flat = {}
    for layer, chans in cvf[series].items():
        for ch, v in chans.items():
            flat[(int(layer), int(ch))] = v
    return flat


def cmd_compare(cfg: CliConfig, path_a: str, path_b: str,
                series_a: str | None, series_b: str | None,
                units: str) -> dict:
    ra, rb = model_io.read_report(path_a), model_io.read_report(path_b)
    fa, fb = _report_series(ra, series_a, path_a), _report_series(rb, series_b, path_b)
    if units == "strict":
        if set(fa) != set(fb):
            only_a = sorted(set(fa) - set(fb))[:5]
            only_b = sorted(set(fb) - set(fa))[:5]
            raise ConfigError(
                f"unit sets differ (a-only {only_a}, b-only {only_b}); "
                "use --units intersect to compare the overlap")
        keys = sorted(fa)
    else:
        keys = sorted(set(fa) & set(fb))
        if not keys:
            raise ConfigError("no common units between the two reports")
    a_vals = [fa[k] for k in keys]
    b_vals = [fb[k] for k in keys]
    mae = fi_mod.compare_mae(a_vals, b_vals)

    per_layer = {}
    for layer in sorted({k[0] for k in keys}):
        sel = [k for k in keys if k[0] == layer]
        per_layer[layer] = fi_mod.compare_mae([fa[k] for k in sel],
                                              [fb[k] for k in sel])
    report = {
        "schema": REPORT_SCHEMA,
        "kind": "compare",
        "config": _echo_config(cfg),
        "report_a": path_a,
        "report_b": path_b,
        "units_compared": len(keys),
        "mae": mae,
        "layers": [{"layer": layer, "mae": v, "units": sum(1 for k in keys if k[0] == layer)}
                   for layer, v in sorted(per_layer.items())],
    }
    model_io.write_report(report, cfg.out, cfg.format)
    click.echo(f"MAE over {len(keys)} units = {mae:.6f}")
    click.echo(f"report written to {cfg.out}")
    return report


# ---------------------------------------------------------------------------
# click wiring

@click.group()
def main():
    """Single-bitflip vulnerability analysis for small CNNs."""


def _common(f):
    f = click.option("--seed", type=int, default=0, show_default=True)(f)
    f = click.option("--workers", type=int, default=1, show_default=True)(f)
    f = click.option("--out", required=True, type=click.Path())(f)
    f = click.option("--format", "fmt", type=click.Choice(["json", "csv"]),
                     default="json", show_default=True)(f)
    return f


def _run(fn, *args):
    try:
        fn(*args)
    except (ConfigError, LoadError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command()
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--batch", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["activations", "filters", "both"]),
              default="both", show_default=True)
@click.option("--sampling", type=click.Choice(["complete", "ratio"]),
              default="complete", show_default=True)
@click.option("--ratio", type=float, default=0.1, show_default=True)
@click.option("--rho-max", type=int, default=10, show_default=True)
@click.option("--grad-tol", type=float, default=GRAD_TOL, show_default=True)
@_common
def analyze(model, batch, mode, sampling, ratio, rho_max, grad_tol,
            seed, workers, out, fmt):
    """Vulnerability-factor analysis; writes LVF/MVF report."""
    cfg = CliConfig(command="analyze", model=model, batch=batch, mode=mode,
                    sampling=sampling, ratio=ratio, seed=seed, rho_max=rho_max,
                    grad_tol=grad_tol, workers=workers, out=out, format=fmt)
    _run(cmd_analyze, cfg)


@main.command()
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--batch", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["activations", "filters"]),
              default="filters", show_default=True)
@click.option("--fi-mode", type=click.Choice(
    ["exhaustive", "sfi-layerwise", "sfi-data-unaware", "sfi-data-aware"]),
    default="exhaustive", show_default=True)
@click.option("--sampling", type=click.Choice(["complete", "ratio"]),
              default="complete", show_default=True)
@click.option("--ratio", type=float, default=0.15, show_default=True)
@click.option("--e", type=float, default=0.01, show_default=True)
@click.option("--t", type=float, default=2.576, show_default=True)
@click.option("--p", type=float, default=0.5, show_default=True)
@click.option("--pilot", type=int, default=100, show_default=True)
@_common
def fi(model, batch, mode, fi_mode, sampling, ratio, e, t, p, pilot,
       seed, workers, out, fmt):
    """Fault-injection campaign (exhaustive ground truth or statistical)."""
    cfg = CliConfig(command="fi", model=model, batch=batch, mode=mode,
                    sampling=sampling, ratio=ratio, seed=seed, workers=workers,
                    out=out, format=fmt, fi_mode=fi_mode, e=e, t=t, p=p,
                    pilot=pilot)
    _run(cmd_fi, cfg)


@main.command()
@click.argument("report_a", type=click.Path(exists=True))
@click.argument("report_b", type=click.Path(exists=True))
@click.option("--series-a", default=None, help="CVF series in report A")
@click.option("--series-b", default=None, help="CVF series in report B")
@click.option("--units", type=click.Choice(["strict", "intersect"]),
              default="strict", show_default=True)
@_common
def compare(report_a, report_b, series_a, series_b, units,
            seed, workers, out, fmt):
    """MAE between the channel factors of two reports."""
    cfg = CliConfig(command="compare", seed=seed, workers=workers, out=out,
                    format=fmt)
    _run(cmd_compare, cfg, report_a, report_b, series_a, series_b, units)


if __name__ == "__main__":
    main()
