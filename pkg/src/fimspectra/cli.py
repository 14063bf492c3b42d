"""Experiment driver: reproducible spectra runs from config files.

Each run is described by a flat ``key = value`` config file (strict: every
key must belong to the command's schema).  The raw config text is echoed
verbatim into the output directory next to the result CSVs, so a run is
reproducible from its output directory alone.  Re-running a command with
the same config and seed produces byte-identical CSV output.

Bundled presets (fig3a, fig3b, fig4-tanh, fig4-relu, fig4-linear, fig5,
fig6, fig7) can be named directly with --config.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import dynamics, spectra
from .activations import parse_activation
from .errors import ConfigError, FimspectraError
from .gauss import DEFAULT_ORDER, gauss_hermite_rule
from .meanfield import NetworkConfig, order_params, write_order_table
from .network import backward, forward, initialize_network, sample_inputs, trial_seed
from .theory import GramKind, SoftmaxCoeffs, predict, softmax_coeffs

__all__ = ["main", "parse_config", "load_config"]


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

_NETWORK_KEYS = {
    "depth": int,
    "width": int,
    "outputs": int,
    "sigma_w2": float,
    "sigma_b2": float,
    "activation": str,
    "width_ratios": str,
}
_COMMON_KEYS = {
    "n_samples": int,
    "trials": int,
    "seed": int,
    "quad_order": int,
    "out_dir": str,
    "threads": int,
}
_SCHEMAS = {
    "orderparams": {},
    "predict": {"kinds": str},
    "spectrum": {"kinds": str},
    "compare": {"kinds": str, "widths": str},
    "train": {
        "eta": float,
        "steps": int,
        "loss": str,
        "teacher_seed": int,
        "parameterization": str,
    },
    "ntk-scaling": {"sample_sizes": str, "widths": str, "mean_subtract": str},
}


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(command: str, raw: dict[str, str]) -> dict:
    schema = {**_NETWORK_KEYS, **_COMMON_KEYS, **_SCHEMAS[command]}
    cfg = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} for command {command!r}")
        try:
            cfg[key] = schema[key](value)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: cannot parse {value!r}") from exc
    return cfg


def load_config(path_or_name: str, command: str) -> tuple[dict, str]:
    """Load a config file or a bundled preset name; returns (values, raw text)."""
    path = Path(path_or_name)
    if path.exists():
        text = path.read_text()
    else:
        preset = resources.files("fimspectra").joinpath("presets", f"{path_or_name}.cfg")
        if not preset.is_file():
            raise ConfigError(f"config file {path_or_name!r} not found (and no such preset)")
        text = preset.read_text()
    return _coerce(command, parse_config(text)), text


def _ints(csv_text: str) -> list[int]:
    return [int(tok) for tok in csv_text.split(",") if tok.strip()]


def _network_config(cfg: dict) -> NetworkConfig:
    for key in ("depth", "width", "outputs", "sigma_w2", "sigma_b2", "activation"):
        if key not in cfg:
            raise ConfigError(f"missing network key {key!r}")
    tags = [t.strip() for t in cfg["activation"].split(",")]
    acts = tuple(parse_activation(t) for t in tags)
    ratios = ()
    if "width_ratios" in cfg:
        ratios = tuple(float(tok) for tok in cfg["width_ratios"].split(","))
    return NetworkConfig(
        depth=cfg["depth"],
        width=cfg["width"],
        outputs=cfg["outputs"],
        sigma_w2=cfg["sigma_w2"],
        sigma_b2=cfg["sigma_b2"],
        activations=acts,
        width_ratios=ratios,
    )


def _kinds(cfg: dict) -> list[GramKind]:
    if "kinds" not in cfg:
        raise ConfigError("missing key 'kinds'")
    return [GramKind.parse(tok) for tok in cfg["kinds"].split(",") if tok.strip()]


def _prepare_run(cfg: dict, args, raw_text: str) -> Path:
    out_dir = Path(args.out or cfg.get("out_dir", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(raw_text)
    return out_dir


def _settings(cfg: dict, args) -> dict:
    return {
        "seed": args.seed if args.seed is not None else cfg.get("seed", 0),
        "trials": args.trials if args.trials is not None else cfg.get("trials", 20),
        "threads": args.threads if args.threads is not None else cfg.get("threads", 1),
        "n_samples": cfg.get("n_samples", 100),
        "quad_order": cfg.get("quad_order", DEFAULT_ORDER),
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_orderparams(cfg: dict, args, raw: str) -> None:
    out = _prepare_run(cfg, args, raw)
    st = _settings(cfg, args)
    net_cfg = _network_config(cfg)
    rule = gauss_hermite_rule(st["quad_order"])
    op = order_params(net_cfg, rule)
    with open(out / "orderparams.csv", "w") as fh:
        write_order_table(op, fh)
    kappas = {
        "kappa1": op.kappa1, "kappa2": op.kappa2,
        "kappa1_prime": op.kappa1p, "kappa2_prime": op.kappa2p,
        "kappa1_tilde": op.kappat1, "kappa2_tilde": op.kappat2,
        "alpha": op.alpha, "alpha_tilde": op.alphat,
    }
    (out / "kappas.json").write_text(json.dumps(kappas, indent=2) + "\n")
    print(f"wrote {out / 'orderparams.csv'} and {out / 'kappas.json'}")


def _coeffs_from_network(net_cfg: NetworkConfig, n_samples: int, seed: int) -> SoftmaxCoeffs:
    net = initialize_network(net_cfg, seed)
    x = sample_inputs(n_samples, net_cfg.input_dim, seed)
    return softmax_coeffs(forward(net, x).softmax)


def cmd_predict(cfg: dict, args, raw: str) -> None:
    out = _prepare_run(cfg, args, raw)
    st = _settings(cfg, args)
    net_cfg = _network_config(cfg)
    rule = gauss_hermite_rule(st["quad_order"])
    op = order_params(net_cfg, rule)
    records = []
    for kind in _kinds(cfg):
        coeffs = None
        if kind.tag.startswith("fim_cross"):
            coeffs = _coeffs_from_network(net_cfg, st["n_samples"], st["seed"])
        records.append(predict(kind, op, net_cfg, st["n_samples"], coeffs).to_json_dict())
    (out / "predictions.json").write_text(json.dumps(records, indent=2) + "\n")
    print(f"wrote {out / 'predictions.json'}")


def _trial_with_coeffs(net_cfg, n_samples, kinds, seed):
    reports = spectra.run_trial(net_cfg, n_samples, kinds, seed)
    net = initialize_network(net_cfg, seed)
    x = sample_inputs(n_samples, net_cfg.input_dim, seed)
    coeffs = softmax_coeffs(forward(net, x).softmax)
    return reports, coeffs


def _ensemble_with_coeffs(net_cfg, n_samples, kinds, trials, seed, threads):
    seeds = [trial_seed(seed, t) for t in range(trials)]
    run = lambda s: _trial_with_coeffs(net_cfg, n_samples, kinds, s)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    merged = {
        str(kind): spectra._aggregate(kind, [r[0][str(kind)] for r in results])
        for kind in kinds
    }
    mean_coeffs = SoftmaxCoeffs(
        beta1=float(np.mean([r[1].beta1 for r in results])),
        beta2=float(np.mean([r[1].beta2 for r in results])),
        beta3=float(np.mean([r[1].beta3 for r in results])),
        beta4=float(np.mean([r[1].beta4 for r in results])),
    )
    return merged, mean_coeffs


def cmd_spectrum(cfg: dict, args, raw: str) -> None:
    out = _prepare_run(cfg, args, raw)
    st = _settings(cfg, args)
    net_cfg = _network_config(cfg)
    kinds = _kinds(cfg)
    rule = gauss_hermite_rule(st["quad_order"])
    op = order_params(net_cfg, rule)
    merged, coeffs = _ensemble_with_coeffs(
        net_cfg, st["n_samples"], kinds, st["trials"], st["seed"], st["threads"]
    )
    rows = []
    for kind in kinds:
        ens = merged[str(kind)]
        pred = _safe_predict(kind, op, net_cfg, st["n_samples"], coeffs)
        rows.append(spectra.summary_row(net_cfg, st["n_samples"], ens, pred))
        stem = str(kind).replace(":", "")
        with open(out / f"spectrum_{stem}.csv", "w") as fh:
            spectra.write_spectrum_csv(ens.per_trial, fh)
        with open(out / f"histogram_{stem}.csv", "w") as fh:
            spectra.write_histogram_csv(ens, fh)
        # bulk histogram: drop the predicted outliers in every trial
        drop = ens.per_trial[0].lambda_topk.size - 1
        if drop > 0:
            bulk = _bulk_view(ens, drop)
            with open(out / f"histogram_{stem}_bulk.csv", "w") as fh:
                spectra.write_histogram_csv(bulk, fh)
    with open(out / "summary.csv", "w") as fh:
        spectra.write_summary_csv(rows, fh)
    print(f"wrote summary and per-kind spectra under {out}")


def _bulk_view(ens: spectra.EnsembleReport, drop: int) -> spectra.EnsembleReport:
    """Ensemble view with the top eigenvalues removed from every trial."""
    import copy

    trimmed = []
    for rep in ens.per_trial:
        r = copy.copy(rep)
        r.eigenvalues = rep.eigenvalues[drop:]
        trimmed.append(r)
    clone = copy.copy(ens)
    clone.per_trial = trimmed
    return clone


def _safe_predict(kind, op, net_cfg, n_samples, coeffs):
    try:
        return predict(kind, op, net_cfg, n_samples, coeffs)
    except FimspectraError:
        return None


def cmd_compare(cfg: dict, args, raw: str) -> None:
    out = _prepare_run(cfg, args, raw)
    st = _settings(cfg, args)
    kinds = _kinds(cfg)
    if "widths" not in cfg:
        raise ConfigError("compare needs key 'widths'")
    widths = _ints(cfg["widths"])
    rule = gauss_hermite_rule(st["quad_order"])
    rows = []
    for width in widths:
        net_cfg = _network_config({**cfg, "width": width})
        op = order_params(net_cfg, rule)
        merged, coeffs = _ensemble_with_coeffs(
            net_cfg, st["n_samples"], kinds, st["trials"], st["seed"], st["threads"]
        )
        for kind in kinds:
            ens = merged[str(kind)]
            pred = _safe_predict(kind, op, net_cfg, st["n_samples"], coeffs)
            row = spectra.summary_row(net_cfg, st["n_samples"], ens, pred)
            row += [ens.mean_std, ens.second_moment_std, ens.lambda_max_std]
            rows.append(row)
    with open(out / "compare.csv", "w") as fh:
        spectra.write_summary_csv(rows, fh, extra_columns=["mean_emp_std", "s_emp_std", "lmax_emp_std"])
    print(f"wrote {out / 'compare.csv'}")


def cmd_train(cfg: dict, args, raw: str) -> None:
    out = _prepare_run(cfg, args, raw)
    st = _settings(cfg, args)
    net_cfg = _network_config(cfg)
    for key in ("eta", "steps"):
        if key not in cfg:
            raise ConfigError(f"train needs key {key!r}")
    eta, steps = cfg["eta"], cfg["steps"]
    loss_kind = cfg.get("loss", "cross")
    parameterization = cfg.get("parameterization", "standard")
    teacher_seed = cfg.get("teacher_seed", st["seed"] + 1)
    rule = gauss_hermite_rule(st["quad_order"])
    op = order_params(net_cfg, rule)

    x = sample_inputs(st["n_samples"], net_cfg.input_dim, st["seed"])
    teacher = initialize_network(net_cfg, teacher_seed, parameterization)
    f_teacher = forward(teacher, x).outputs
    y = np.zeros_like(f_teacher)
    y[np.argmax(f_teacher, axis=0), np.arange(f_teacher.shape[1])] = 1.0

    student = initialize_network(net_cfg, st["seed"], parameterization)
    pack = backward(student, forward(student, x))
    if parameterization == "ntk":
        theta = spectra.build_dual_ntk(pack, student)
    else:
        theta = spectra.build_dual_fim(pack, student)  # simulator rescales by N

    record = dynamics.log_cadence(steps)

    def probe(net_t, t):
        pk = backward(net_t, forward(net_t, x))
        fdual = spectra.build_dual_fim(pk, net_t)
        fx = spectra.apply_softmax_q(fdual, pk.softmax)
        lam_f = float(np.linalg.eigvalsh(0.5 * (fdual.matrix + fdual.matrix.T))[-1])
        lam_x = float(np.linalg.eigvalsh(0.5 * (fx.matrix + fx.matrix.T))[-1])
        return {"lambda_max_F": lam_f, "lambda_max_Fcross": lam_x}

    if loss_kind == "cross":
        sim = dynamics.simulate_ntk_cross(theta, pack.outputs, y, eta, steps, op, net_cfg, record)
    else:
        ymse = f_teacher if loss_kind == "mse" else y
        sim = dynamics.simulate_ntk_mse(theta, pack.outputs, ymse, eta, steps, record)
    ref, _ = dynamics.train_reference(
        student, x, (y if loss_kind == "cross" else f_teacher),
        eta, steps, loss_kind, record, probe
    )
    sim.loss_reference = ref.loss
    sim.lambda_max_F = ref.lambda_max_F
    sim.lambda_max_Fcross = ref.lambda_max_Fcross
    with open(out / "trace.csv", "w") as fh:
        dynamics.write_trace_csv(sim, fh)
    print(f"wrote {out / 'trace.csv'}")


def cmd_ntk_scaling(cfg: dict, args, raw: str) -> None:
    out = _prepare_run(cfg, args, raw)
    st = _settings(cfg, args)
    rule = gauss_hermite_rule(st["quad_order"])
    rows = []
    kinds = [GramKind("ntk"), GramKind("ntk_mean_sub")]
    extra = ["lmin_emp", "cond_emp"]
    if "sample_sizes" in cfg:
        net_cfg = _network_config(cfg)
        op = order_params(net_cfg, rule)
        for N in _ints(cfg["sample_sizes"]):
            merged = spectra.run_ensemble(net_cfg, N, kinds, st["trials"], st["seed"], st["threads"])
            for kind in kinds:
                ens = merged[str(kind)]
                pred = _safe_predict(kind, op, net_cfg, N, None)
                rows.append(_scaling_row(net_cfg, N, ens, pred))
                with open(out / f"histogram_{kind.tag}_N{N}.csv", "w") as fh:
                    spectra.write_histogram_csv(_normalized_view(ens, 1.0 / N), fh)
    if "widths" in cfg:
        # matched-size sweep: sample count tied to the width
        for width in _ints(cfg["widths"]):
            net_cfg = _network_config({**cfg, "width": width})
            op = order_params(net_cfg, rule)
            merged = spectra.run_ensemble(net_cfg, width, kinds, st["trials"], st["seed"], st["threads"])
            for kind in kinds:
                ens = merged[str(kind)]
                pred = _safe_predict(kind, op, net_cfg, width, None)
                rows.append(_scaling_row(net_cfg, width, ens, pred))
    with open(out / "ntk_scaling.csv", "w") as fh:
        spectra.write_summary_csv(rows, fh, extra_columns=extra)
    print(f"wrote {out / 'ntk_scaling.csv'}")


def _scaling_row(net_cfg, N, ens, pred):
    lmins = [float(r.eigenvalues[-1]) for r in ens.per_trial]
    lmin = float(np.mean(lmins))
    cond = ens.lambda_max / lmin if lmin > 0 else float("inf")
    return spectra.summary_row(net_cfg, N, ens, pred) + [lmin, cond]


def _normalized_view(ens: spectra.EnsembleReport, scale: float) -> spectra.EnsembleReport:
    import copy

    scaled = []
    for rep in ens.per_trial:
        r = copy.copy(rep)
        r.eigenvalues = rep.eigenvalues * scale
        scaled.append(r)
    clone = copy.copy(ens)
    clone.per_trial = scaled
    return clone


_COMMANDS = {
    "orderparams": cmd_orderparams,
    "predict": cmd_predict,
    "spectrum": cmd_spectrum,
    "compare": cmd_compare,
    "train": cmd_train,
    "ntk-scaling": cmd_ntk_scaling,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fimspectra",
        description="Eigenvalue spectra of network metric tensors: predictions and experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="config file path or preset name")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--threads", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        cfg, raw = load_config(args.config, args.command)
        _COMMANDS[args.command](cfg, args, raw)
    except FimspectraError as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        if hasattr(exc, "step"):
            payload["step"] = exc.step
        print(json.dumps(payload), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
