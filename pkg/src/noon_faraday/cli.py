"""Command-line front end: ``noon-faraday <command> [options]``.

Commands write CSV/JSON/SVG files into ``--out`` and echo the effective
configuration there as ``config.toml``. Exit codes: 0 success, 1 numerical
or optimizer failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import atomic, metrology, polarimetry, tomography
from .config import ConfigError, RunConfig

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def write_atomic(path: str, data) -> None:
    """Write via a temporary file in the same directory, then rename."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(x) -> str:
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_num(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def prepare_out(cfg: RunConfig) -> str:
    out = cfg.run.out
    try:
        os.makedirs(out, exist_ok=True)
        write_atomic(os.path.join(out, "config.toml"), cfg.dumps())
    except OSError as exc:
        raise InputError(f"cannot write to output directory {out!r}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# shared construction
# ---------------------------------------------------------------------------


def noon_state(cfg: RunConfig) -> polarimetry.TwoPhotonState:
    s = cfg.state
    if s.state_file:
        return load_state(s.state_file)
    p = polarimetry.noon_fidelity_knob(s.fidelity, s.singlet)
    return polarimetry.make_noon_state(s.phi, p, s.singlet)


def load_state(path: str) -> polarimetry.TwoPhotonState:
    """State file: JSON with ``rho_real``/``rho_imag`` (4x4) and ``basis``."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        rho = np.array(data["rho_real"], dtype=float) + 1j * np.array(data["rho_imag"], dtype=float)
        return polarimetry.TwoPhotonState(rho, data.get("basis", polarimetry.CIRC))
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise InputError(f"cannot load state file {path!r}: {exc}") from exc


def channel_for(cfg: RunConfig, cell=None):
    cell = cfg.cell_config() if cell is None else cell
    ch = atomic.CellChannel(cell, cfg.frequency())
    return polarimetry.LosslessChannel(ch) if cfg.metrology.lossless else ch


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def spectra_data(cfg: RunConfig):
    sp = cfg.spectra
    det = np.linspace(sp.detuning_min_MHz, sp.detuning_max_MHz, sp.detuning_points)
    freqs = cfg.frequency() + det * 1e6
    results = {}
    for T in sp.temperatures_C:
        cell = cfg.cell_config(temperature_C=T)
        for b in sp.fields_mT:
            trans, tp, tm = atomic.transmission_spectrum(cell, freqs, b * 1e-3)
            results[(T, b)] = (det, trans, np.abs(tp) ** 2, np.abs(tm) ** 2)
    return results


def cmd_spectra(cfg: RunConfig) -> int:
    from . import plots

    out = prepare_out(cfg)
    folder = os.path.join(out, "spectra")
    os.makedirs(folder, exist_ok=True)
    data = spectra_data(cfg)
    for T in cfg.spectra.temperatures_C:
        curves = []
        for b in cfg.spectra.fields_mT:
            det, trans, tp, tm = data[(T, b)]
            rows = np.column_stack([det, trans, tp, tm])
            name = f"spectrum_T{T:g}C_B{b:g}mT.csv"
            write_atomic(os.path.join(folder, name), csv_text(["detuning_MHz", "T", "T_plus", "T_minus"], rows))
            curves.append((b, det, trans))
        write_atomic(os.path.join(out, f"spectra_T{T:g}C.svg"), plots.spectra_figure(T, curves))
    print(f"wrote {len(data)} spectra to {folder}")
    return EXIT_OK


def fringe_table(cfg: RunConfig):
    B = cfg.B_grid()
    single = polarimetry.SinglePhotonState.linear(cfg.state.single_angle)
    return polarimetry.fringe_scan(
        noon_state(cfg), channel_for(cfg), B, R0=cfg.tomography.R0, include_singles=True, singles_state=single
    )


def cmd_fringes(cfg: RunConfig) -> int:
    from . import plots

    out = prepare_out(cfg)
    table = fringe_table(cfg)
    B_mT = table.B * 1e3
    rows = np.column_stack([B_mT, table.pair, table.singles, table.pair_rates])
    header = ["B_mT", "P_HH", "P_HV", "P_VV", "P_H", "P_V", "R_HH", "R_HV", "R_VV"]
    write_atomic(os.path.join(out, "fringes.csv"), csv_text(header, rows))
    write_atomic(os.path.join(out, "fringes.svg"), plots.fringes_figure(B_mT, table))
    vis = {k: polarimetry.visibility(table.column(k)) for k in table.outcomes}
    write_atomic(os.path.join(out, "fringes.json"), json_text({"visibility": vis, "R0": table.R0}))
    print("visibilities " + " ".join(f"{k}={v:.4f}" for k, v in vis.items()))
    return EXIT_OK


def fisher_data(cfg: RunConfig):
    m = cfg.metrology
    return metrology.fisher_curve(noon_state(cfg), channel_for(cfg), cfg.B_grid(), step=m.step_T,
                                  include_noclick=m.include_noclick)


def cmd_fisher(cfg: RunConfig) -> int:
    from . import plots

    out = prepare_out(cfg)
    curve = fisher_data(cfg)
    B_mT = curve.B * 1e3
    header = ["B_mT", "P_HH", "P_HV", "P_VV", "FI_total"] + [f"FI_{o}" for o in curve.outcomes] + ["S", "FI_over_S"]
    rows = np.column_stack([B_mT, curve.probabilities[:, :3], curve.fi, curve.terms, curve.scattering,
                            curve.fi_over_s])
    write_atomic(os.path.join(out, "fisher.csv"), csv_text(header, rows))
    payload = {
        "B_mT": B_mT,
        "outcomes": list(curve.outcomes),
        "probabilities": curve.probabilities,
        "derivatives": curve.derivatives,
        "fi_terms": curve.terms,
        "fi": curve.fi,
        "scattering": curve.scattering,
        "fi_over_s": curve.fi_over_s,
        "step_T": cfg.metrology.step_T,
        "include_noclick": cfg.metrology.include_noclick,
    }
    write_atomic(os.path.join(out, "fisher.json"), json_text(payload))
    write_atomic(os.path.join(out, "fisher.svg"), plots.fisher_figure(B_mT, curve.fi, curve.fi_over_s))
    return EXIT_OK


def sql_data(cfg: RunConfig):
    m = cfg.metrology
    channel = channel_for(cfg)
    B = cfg.B_grid()
    if hasattr(channel, "prefetch"):
        channel.prefetch(np.concatenate([B - m.step_T, B, B + m.step_T]))
    objectives = ["fi"]
    probe = metrology.ScatteringOperator.from_coefficients(channel(B[-1]))
    if not m.lossless and (probe.s_plus > 0 or probe.s_minus > 0):
        objectives.append("fi_per_scatter")
    kw = dict(n_starts=m.sql_starts, seed=cfg.run.seed, step=m.step_T, include_noclick=m.include_noclick)

    def one(job):
        b, obj = job
        return metrology.sql_optimize(b, channel, obj, **kw)

    jobs = [(b, obj) for b in B for obj in objectives]
    if cfg.run.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.run.threads) as pool:
            res = list(pool.map(one, jobs))
    else:
        res = [one(j) for j in jobs]
    by_obj = {obj: [r for r, (_, o) in zip(res, jobs) if o == obj] for obj in objectives}
    return B, by_obj


def cmd_sql(cfg: RunConfig) -> int:
    from . import plots

    out = prepare_out(cfg)
    B, by_obj = sql_data(cfg)
    B_mT = B * 1e3
    fi = by_obj["fi"]
    cols = {
        "B_mT": B_mT,
        "FI_SQL": [r.fi for r in fi],
        "S_at_FI_SQL": [r.scattering for r in fi],
        "a": [r.input_angles[0] for r in fi],
        "b": [r.input_angles[1] for r in fi],
        "c": [r.analyzer_angles[0] for r in fi],
        "d": [r.analyzer_angles[1] for r in fi],
    }
    if "fi_per_scatter" in by_obj:
        cols["FI_over_S_SQL"] = [r.fi_per_scatter for r in by_obj["fi_per_scatter"]]
    rows = np.column_stack([np.asarray(v, dtype=float) for v in cols.values()])
    write_atomic(os.path.join(out, "sql.csv"), csv_text(list(cols), rows))
    write_atomic(os.path.join(out, "sql.json"),
                 json_text({k: [r.to_dict() for r in v] for k, v in by_obj.items()}))
    curve = fisher_data(cfg)
    sql_s = np.asarray(cols["FI_over_S_SQL"]) if "FI_over_S_SQL" in cols else None
    write_atomic(os.path.join(out, "sql.svg"),
                 plots.fisher_figure(B_mT, curve.fi, curve.fi_over_s, np.asarray(cols["FI_SQL"]), sql_s))
    return EXIT_OK


def advantage_data(cfg: RunConfig, B_mT: float):
    m = cfg.metrology
    return metrology.advantage_ratios(
        B_mT * 1e-3, cfg.cell_config(), noon_state(cfg), frequency=cfg.frequency(), lossless=m.lossless,
        include_noclick=m.include_noclick, optimize_rotation=cfg.state.optimize_rotation,
        efficiency=cfg.efficiency_model(), n_starts=m.sql_starts, seed=cfg.run.seed, step=m.step_T,
        threads=cfg.run.threads,
    )


def cmd_advantage(cfg: RunConfig, B_mT: float) -> int:
    out = prepare_out(cfg)
    report = advantage_data(cfg, B_mT)
    payload = report.to_dict()
    write_atomic(os.path.join(out, "advantage.json"), json_text(payload))
    ps = "n/a" if report.per_scatter is None else f"{report.per_scatter:.4f}"
    p85 = "n/a" if report.per_scatter_pure85 is None else f"{report.per_scatter_pure85:.4f}"
    print(f"B={B_mT:g} mT per_photon={report.per_photon:.6f} per_scatter={ps} per_scatter_pure85={p85} "
          f"eta_adjusted_per_photon={report.adjusted['per_photon']:.4f}")
    return EXIT_OK


def tomo_truth(cfg: RunConfig):
    s, t = cfg.state, cfg.tomography
    p = polarimetry.noon_fidelity_knob(s.fidelity, t.singlet)
    return polarimetry.make_noon_state(s.phi, p, t.singlet)


def tomo_data(cfg: RunConfig, data_path=None, simulate=False):
    t = cfg.tomography
    channel = channel_for(cfg)
    truth = None
    if simulate:
        truth = tomo_truth(cfg)
        dataset = tomography.simulate_counts(truth, channel, cfg.tomo_grid(), t.R0, t.t_int_s, seed=cfg.run.seed,
                                             noiseless=t.noiseless, temperature=cfg.cell.temperature_C)
        # fit what dataset.csv will hold, so --data on that file reproduces the result
        dataset = tomography.CoincidenceDataset.from_csv(dataset.to_csv())
    else:
        try:
            dataset = tomography.CoincidenceDataset.read(data_path)
        except OSError as exc:
            raise InputError(f"cannot read dataset {data_path!r}: {exc}") from exc
    result = tomography.reconstruct(dataset, channel, n_starts=t.starts, seed=cfg.run.seed,
                                    threads=cfg.run.threads)
    result.fi_band = tomography.fi_error_band(result, dataset, channel, t.band_B_mT * 1e-3, t.delta,
                                              step=cfg.metrology.step_T)
    return dataset, result, truth


def cmd_tomo(cfg: RunConfig, data_path=None, simulate=False) -> int:
    if not simulate and not data_path:
        raise InputError("tomo needs a dataset path or --simulate")
    out = prepare_out(cfg)
    dataset, result, truth = tomo_data(cfg, data_path, simulate)
    payload = result.to_dict()
    if simulate:
        write_atomic(os.path.join(out, "dataset.csv"), dataset.to_csv())
        fid = tomography.fidelity_to(result, truth)
        payload["truth"] = {
            "rho_real": truth.circ.real.tolist(),
            "rho_imag": truth.circ.imag.tolist(),
            "metrics": polarimetry.state_metrics(truth, cfg.state.phi),
            "fidelity_to_reconstruction": fid,
            "fi_at_band_field": metrology.pair_fisher(truth, channel_for(cfg), cfg.tomography.band_B_mT * 1e-3,
                                                      cfg.metrology.step_T).total,
        }
        print(f"round-trip fidelity {fid:.6f}")
    write_atomic(os.path.join(out, "tomography.json"), json_text(payload))
    print(f"chi2={result.chi2:.4f} R0={result.R0:.6g} identifiable={result.identifiable}")
    if not result.identifiable:
        print("warning: some state directions are not constrained by the data (field span or counts too small)",
              file=sys.stderr)
    if not result.converged:
        print("warning: least-squares fit did not converge", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--temp", type=float, help="cell temperature (C)")
    common.add_argument("--bmax", type=float, help="upper end of the field grid (mT)")
    common.add_argument("--grid", type=int, help="number of field points")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int)
    common.add_argument("--pure-rb85", action="store_true", help="remove the 87Rb contaminant")
    common.add_argument("--lossless", action="store_true", help="keep only the phases of t+/-")
    common.add_argument("--include-noclick", action="store_true", help="count the no-detection outcome in FI")
    common.add_argument("--phi", type=float, help="NOON phase (rad)")
    common.add_argument("--fidelity", type=float, help="NOON fidelity of the input state")

    ap = argparse.ArgumentParser(prog="noon-faraday", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("spectra", parents=[common], help="transmission spectra vs detuning")
    sub.add_parser("fringes", parents=[common], help="coincidence and singles fringes vs B")
    sub.add_parser("fisher", parents=[common], help="Fisher information curve of the NOON input")
    sub.add_parser("sql", parents=[common], help="optimized single-photon limit vs B")
    adv = sub.add_parser("advantage", parents=[common], help="NOON/SQL ratios at one field")
    adv.add_argument("--field", type=float, help="field for the comparison (mT)")
    tomo = sub.add_parser("tomo", parents=[common], help="state reconstruction from coincidences")
    tomo.add_argument("--data", help="dataset CSV")
    tomo.add_argument("--simulate", action="store_true", help="simulate a dataset from the configured state")
    tomo.add_argument("--noiseless", action="store_true", help="with --simulate, use expected counts")
    return ap


def effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.temp is not None:
        cfg = cfg.replace("cell", temperature_C=args.temp)
        if args.command == "spectra":
            cfg = cfg.replace("spectra", temperatures_C=[args.temp])
    if args.bmax is not None:
        cfg = cfg.replace("grid", bmax_mT=args.bmax)
    if args.grid is not None:
        cfg = cfg.replace("grid", points=args.grid)
    if args.seed is not None:
        cfg = cfg.replace("run", seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace("run", out=args.out)
    if args.threads is not None:
        cfg = cfg.replace("run", threads=args.threads)
    if args.pure_rb85:
        cfg = cfg.replace("metrology", pure_rb85=True)
    if args.lossless:
        cfg = cfg.replace("metrology", lossless=True)
    if args.include_noclick:
        cfg = cfg.replace("metrology", include_noclick=True)
    if args.phi is not None:
        cfg = cfg.replace("state", phi=args.phi)
    if args.fidelity is not None:
        cfg = cfg.replace("state", fidelity=args.fidelity)
    if getattr(args, "field", None) is not None:
        cfg = cfg.replace("metrology", advantage_B_mT=args.field)
    if getattr(args, "noiseless", False):
        cfg = cfg.replace("tomography", noiseless=True)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        cfg = effective_config(args)
        cmd = args.command
        if cmd == "spectra":
            return cmd_spectra(cfg)
        if cmd == "fringes":
            return cmd_fringes(cfg)
        if cmd == "fisher":
            return cmd_fisher(cfg)
        if cmd == "sql":
            return cmd_sql(cfg)
        if cmd == "advantage":
            return cmd_advantage(cfg, cfg.metrology.advantage_B_mT)
        if cmd == "tomo":
            return cmd_tomo(cfg, args.data, args.simulate)
    except (ConfigError, InputError, tomography.DatasetFormatError, polarimetry.StateError,
            atomic.AtomicModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (metrology.MetrologyError, tomography.TomographyError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    parser.error(f"unknown command {args.command}")
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
