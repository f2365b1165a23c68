"""Command-line interface: ``diracwall {forward, born, invert-linear, reconstruct, verify}``."""

import csv
import json
import os
import sys

import click
import numpy as np

from . import experiments as ex
from . import linearized as lz
from .adjoint_inversion import PRESETS as OBS_PRESETS
from .greens_slab import build_slab, project_potential
from .tr_merge import TRMatrix, extract_smatrix


def _config_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML or JSON config."),
        click.option("--preset", "preset_name", type=click.Choice(sorted(ex.PRESETS)), help="Named experiment preset."),
        click.option("--nx", "n_x", type=int),
        click.option("--ny", "n_y", type=int),
        click.option("--ne", "n_E", type=int),
        click.option("--sigma", type=float),
        click.option("--seed", type=int),
        click.option("--obs", type=click.Choice(OBS_PRESETS)),
        click.option("--eta", type=float),
        click.option("--iters", type=int),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), default="diracwall-out", show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _resolve_config(config_path, preset_name, **overrides):
    if config_path and preset_name:
        raise click.UsageError("use either --config or --preset, not both")
    try:
        if config_path:
            base = ex.ExperimentConfig.load(config_path)
        elif preset_name:
            base = ex.preset(preset_name)
        else:
            base = ex.ExperimentConfig()
        return base.with_overrides(**overrides)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


def _complex_pairs(a):
    return [[float(z.real), float(z.imag)] for z in np.ravel(a)]


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Scattering and inverse scattering for the Dirac operator with a linear domain wall."""


@main.command()
@_config_options
def forward(config_path, preset_name, out_dir, **overrides):
    """TR and S matrices of the configured reference potential."""
    cfg = _resolve_config(config_path, preset_name, **overrides)
    V, _ = ex.reference_setup(cfg)
    os.makedirs(out_dir, exist_ok=True)
    summary = []
    for E in cfg.energies():
        slab = build_slab(E, cfg.interval, cfg.n_y, cfg.n_nodes, n_x=cfg.n_x)
        sol = slab.solve(project_potential(V, slab.x, cfg.n_y))
        tr = TRMatrix(E, cfg.interval, cfg.n_y, sol.alpha_out)
        S, labels = extract_smatrix(tr)
        with open(os.path.join(out_dir, f"tr_E{E:.6f}.json"), "w") as fh:
            fh.write(tr.to_json())
        with open(os.path.join(out_dir, f"s_E{E:.6f}.json"), "w") as fh:
            json.dump({"E": E, "modes": [list(m) for m in labels], "entries": _complex_pairs(S)}, fh)
        err = float(np.linalg.norm(S.conj().T @ S - np.eye(len(S))))
        summary.append((E, len(labels), err))
        click.echo(f"E={E:.6f}  propagating={len(labels):3d}  |S^H S - I|_F={err:.2e}")
    click.echo(f"wrote {2 * len(summary)} files to {out_dir}")


@main.command()
@_config_options
@click.option("--xi", "xis", type=float, multiple=True, default=(0.7, 1.3, 2.1), show_default=True)
@click.option("--levels", type=int, default=6, show_default=True, help="Highest Hermite level n.")
def born(config_path, preset_name, out_dir, xis, levels, **overrides):
    """Born data of the configured reference on the scalar and non-scalar sample plans."""
    cfg = _resolve_config(config_path, preset_name, **overrides)
    V, _ = ex.reference_setup(cfg)
    os.makedirs(out_dir, exist_ok=True)
    plan = []
    for xi in xis:
        plan += lz.scalar_sample_plan(xi, levels)
        plan += [t[:3] for t in lz.full_sample_plan(xi, levels)]
    data = lz.born_forward(V, plan)
    path = os.path.join(out_dir, "born.json")
    with open(path, "w") as fh:
        fh.write(data.to_json())
    click.echo(f"{len(data)} Born samples -> {path}")


@main.command("invert-linear")
@_config_options
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--xi", "xis", type=float, multiple=True, default=(0.7, 1.3, 2.1), show_default=True)
@click.option("--levels", type=int, default=6, show_default=True)
@click.option("--full/--scalar", default=False, help="Non-scalar inversion over all Pauli channels.")
def invert_linear(config_path, preset_name, out_dir, data_path, xis, levels, full, **overrides):
    """Closed-form inversion of Born data at fixed frequencies; CSV columns s, xi, Re, Im."""
    with open(data_path) as fh:
        data = lz.LinearizedDataSet.from_json(fh.read())
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "vhat_full.csv" if full else "vhat.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "channel", "xi", "re", "im"] if full else ["s", "xi", "re", "im"])
        for xi in xis:
            if full:
                v = lz.invert_full(xi, data, levels)
                for s in range(levels + 1):
                    for c in range(4):
                        w.writerow([s, c, xi, v[s, c].real, v[s, c].imag])
            else:
                v = lz.invert_scalar(xi, lz.reduce_scalar(data, xi, levels))
                for s, z in enumerate(v):
                    w.writerow([s, xi, z.real, z.imag])
    click.echo(f"wrote {path}")


@main.command()
@_config_options
def reconstruct(config_path, preset_name, out_dir, **overrides):
    """Adjoint gradient-descent reconstruction; writes history CSV and final JSON."""
    cfg = _resolve_config(config_path, preset_name, **overrides)
    every = max(1, cfg.iters // 20)

    def progress(rec):
        if rec["iteration"] % every == 0 or rec["iteration"] == cfg.iters:
            click.echo(
                f"it {rec['iteration']:5d}  Pi={rec['objective']:.3e}  S={rec['misfit']:.3e}  "
                f"E={rec['err']:.3e}  Eavg={rec['err_avg']:.3e}"
            )

    try:
        report = ex.run_experiment(cfg, out_dir, progress)
    except ex.ExperimentError as exc:
        raise click.ClickException(str(exc)) from exc
    for name, path in report.paths.items():
        click.echo(f"{name}: {path}")


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
def verify(seed):
    """Quick invariant suite; exits non-zero if any check fails."""
    from .checks import run_checks

    failures = 0
    for name, value, limit, ok in run_checks(seed):
        failures += not ok
        click.echo(f"{'PASS' if ok else 'FAIL'}  {name:<32s} {value:.3e} (limit {limit:.1e})")
    sys.exit(1 if failures else 0)


if __name__ == "__main__":  # pragma: no cover
    main()
