"""Command-line surface: calibrate | quantize | compare | verify.

Configuration is a flags/JSON hybrid: built-in defaults are overlaid by an
optional ``--config`` JSON file, then by explicitly passed flags. The merged
effective configuration is written next to every output and embedded in
artifact metadata, so any artifact can be reproduced from its own header.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import fnmatch
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from .calib import SyntheticSpec, activation_entries, generate_synthetic
from .engines import ENGINES, FIRST_ORDER_SIGNS, EngineConfig, LayerBundle, run_engine
from .errors import ConfigError, LowbitError, NumericalError, TensorFormatError
from .linalg import HessianState
from .report import compare_table
from .tensorio import TensorFile, save_quantized, save_tensors
from .verification import run_checks

__all__ = ["main", "build_parser"]

OUTDIR_ENV = "LOWBIT_OUTDIR"

HESSIAN_SUFFIX = ".hessian.safetensors"
QUANTIZED_SUFFIX = ".quantized.safetensors"

_ENGINE_DEFAULTS = {
    "engine": "foem",
    "bits": 4,
    "group_size": 128,
    "symmetric": True,
    "block_size": 128,
    "beta": 3e-4,
    "damp_ratio": 0.01,
    "first_order_sign": "minus",
    "scale_source": "latent",
}

_DEFAULTS = {
    "calibrate": {
        "weights": None,
        "activations": None,
        "synthetic": None,
        "out": None,
        "layers": [],
        "damp_ratio": 0.01,
    },
    "quantize": {
        "weights": None,
        "hessians": None,
        "out": None,
        "layers": [],
        "jobs": 1,
        **_ENGINE_DEFAULTS,
    },
    "compare": {
        "weights": None,
        "hessians": None,
        "out": None,
        "layers": [],
        "engines": None,
        "jobs": 1,
        **_ENGINE_DEFAULTS,
    },
    "verify": {
        "out": None,
        "tol_scale": 1.0,
        "seed": 0,
    },
}


def _merged_config(args: argparse.Namespace, command: str) -> dict:
    """defaults < config file < explicit flags."""
    effective = dict(_DEFAULTS[command])
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        unknown = set(loaded) - set(effective) - {"command"}
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        effective.update({k: v for k, v in loaded.items() if k in effective})
    for key in effective:
        value = getattr(args, key, None)
        if value is not None:
            effective[key] = value
    if effective.get("out") is None:
        effective["out"] = os.environ.get(OUTDIR_ENV)
    return effective


def _require(effective: dict, *keys: str) -> None:
    for key in keys:
        if effective.get(key) in (None, []):
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")


def _persist_config(effective: dict, command: str) -> str:
    """Write the full effective config next to the outputs; return the
    content-determining slice (no output location, no parallelism) that gets
    embedded in artifact metadata, so artifact bytes do not depend on where
    or how parallel the run was."""
    payload = dict(effective, command=command)
    out = effective["out"]
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "effective_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    content = {k: v for k, v in effective.items() if k not in ("out", "jobs")}
    return json.dumps(content, sort_keys=True)


def _discover_layers(weights: TensorFile, patterns: list[str]) -> list[str]:
    layers = sorted(
        name[: -len(".weight")] for name in weights.names if name.endswith(".weight")
    )
    if patterns:
        layers = [
            layer
            for layer in layers
            if any(fnmatch.fnmatchcase(layer, pat) for pat in patterns)
        ]
    if not layers:
        raise ConfigError("no layers matched (weights entries must be named '<layer>.weight')")
    return layers


def _parse_synthetic(text: str) -> dict:
    spec = {"rho": 0.9, "seed": 0}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad synthetic spec fragment {part!r} (expected key=value)")
        key, value = part.split("=", 1)
        key = key.strip()
        if key == "n_tokens":
            spec["n_tokens"] = int(value)
        elif key == "rho":
            spec["rho"] = float(value)
        elif key == "seed":
            spec["seed"] = int(value)
        else:
            raise ConfigError(f"unknown synthetic spec key {key!r}")
    if "n_tokens" not in spec:
        raise ConfigError("synthetic spec needs n_tokens (e.g. 'n_tokens=512,rho=0.9,seed=0')")
    return spec


def _engine_config(effective: dict, engine: str | None = None, sign: str | None = None) -> EngineConfig:
    cfg = EngineConfig(
        engine=engine or effective["engine"],
        bits=int(effective["bits"]),
        group_size=effective["group_size"],
        symmetric=bool(effective["symmetric"]),
        block_size=int(effective["block_size"]),
        beta=float(effective["beta"]),
        damp_ratio=float(effective["damp_ratio"]),
        first_order_sign=sign or effective["first_order_sign"],
        scale_source=effective["scale_source"],
    )
    cfg.validate()
    return cfg


def _parse_engine_token(token: str, effective: dict) -> tuple[str, EngineConfig]:
    """'foem(plus)' -> label and config; bare names use the configured sign."""
    name, sign = token, None
    if token.endswith(")") and "(" in token:
        name, rest = token.split("(", 1)
        sign = rest[:-1]
        if sign not in FIRST_ORDER_SIGNS:
            raise ConfigError(
                f"bad engine token {token!r}: sign must be one of {FIRST_ORDER_SIGNS}"
            )
    if name not in ENGINES:
        raise ConfigError(f"unknown engine {name!r}; expected one of {ENGINES}")
    return token, _engine_config(effective, engine=name, sign=sign)


def _load_hessian(hessians_dir: str, layer: str) -> HessianState:
    path = os.path.join(hessians_dir, layer + HESSIAN_SUFFIX)
    if not os.path.exists(path):
        raise ConfigError(f"missing Hessian file {path}")
    tf = TensorFile.open(path)
    n_samples = int(json.loads(tf.metadata.get("n_samples", "0")))
    return HessianState.from_matrix(tf.load("hessian"), n_samples)


def _map_layers(fn, layers: list[str], jobs: int) -> list:
    if jobs <= 1:
        return [fn(layer) for layer in layers]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, layers))


def cmd_calibrate(args: argparse.Namespace) -> int:
    effective = _merged_config(args, "calibrate")
    _require(effective, "weights", "out")
    have_acts = bool(effective["activations"])
    have_synth = effective["synthetic"] is not None
    if have_acts == have_synth:
        raise ConfigError("supply exactly one of --activations and --synthetic")
    config_blob = _persist_config(effective, "calibrate")
    weights = TensorFile.open(effective["weights"])
    layers = _discover_layers(weights, effective["layers"])

    act_files = None
    synth = None
    if have_acts:
        act_files = [TensorFile.open(p) for p in effective["activations"]]
    else:
        synth = _parse_synthetic(effective["synthetic"])

    for idx, layer in enumerate(layers):
        d_in = weights.shape(layer + ".weight")[1]
        state = HessianState(d_in)
        if act_files is not None:
            entries = activation_entries(act_files, layer)
            if not entries:
                raise ConfigError(f"no activation shards found for layer {layer!r}")
            for tf, name in entries:
                state.accumulate(tf.load(name))
        else:
            spec = SyntheticSpec(
                d_in=d_in,
                n_tokens=synth["n_tokens"],
                rho=synth["rho"],
                seed=synth["seed"] + idx,
            )
            state.accumulate(generate_synthetic(spec))
        path = os.path.join(effective["out"], layer + HESSIAN_SUFFIX)
        save_tensors(
            path,
            {"hessian": state.matrix},
            metadata={
                "format": "lowbit-hessian-v1",
                "layer": json.dumps(layer),
                "n_samples": json.dumps(state.n_samples),
                "damp_ratio": json.dumps(effective["damp_ratio"]),
                "run_config": config_blob,
            },
        )
        print(f"calibrated {layer}: d_in={d_in}, n_samples={state.n_samples} -> {path}")
    return 0


def cmd_quantize(args: argparse.Namespace) -> int:
    effective = _merged_config(args, "quantize")
    _require(effective, "weights", "hessians", "out")
    config_blob = _persist_config(effective, "quantize")
    weights = TensorFile.open(effective["weights"])
    layers = _discover_layers(weights, effective["layers"])
    engine_cfg = _engine_config(effective)

    def one(layer: str):
        hessian = _load_hessian(effective["hessians"], layer)
        bundle = LayerBundle(weights.load(layer + ".weight"))
        quantized, rep = run_engine(bundle, hessian, engine_cfg, layer_name=layer)
        quantized.extra["run_config"] = json.loads(config_blob)
        save_quantized(quantized, os.path.join(effective["out"], layer + QUANTIZED_SUFFIX))
        report_path = os.path.join(effective["out"], layer + ".report.json")
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(rep.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return rep

    reports = _map_layers(one, layers, int(effective["jobs"]))
    for rep in reports:
        print(
            f"quantized {rep.layer} [{rep.engine}, {rep.bits}-bit]: "
            f"proxy_loss={rep.proxy_loss:.6g} rtn_relative={rep.rtn_relative:.4f} "
            f"({rep.wall_time_s:.2f}s)"
        )
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    effective = _merged_config(args, "compare")
    _require(effective, "weights", "hessians", "out", "engines")
    tokens = effective["engines"]
    if len(tokens) < 2:
        raise ConfigError("compare needs at least two engines")
    parsed = [_parse_engine_token(tok, effective) for tok in tokens]
    _persist_config(effective, "compare")
    weights = TensorFile.open(effective["weights"])
    layers = _discover_layers(weights, effective["layers"])

    def one(layer: str):
        hessian = _load_hessian(effective["hessians"], layer)
        w = weights.load(layer + ".weight")
        out = []
        for label, cfg in parsed:
            _, rep = run_engine(LayerBundle(w), hessian, cfg, layer_name=layer)
            rep.engine = label
            out.append(rep)
        return out

    reports = [
        rep
        for per_layer in _map_layers(one, layers, int(effective["jobs"]))
        for rep in per_layer
    ]
    csv_path = os.path.join(effective["out"], "compare.csv")
    json_path = os.path.join(effective["out"], "compare_summary.json")
    _, summary = compare_table(reports, csv_path, json_path)
    with open(os.path.join(effective["out"], "compare_reports.json"), "w", encoding="utf-8") as fh:
        json.dump([rep.to_dict() for rep in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
    for eng in sorted(summary["engines"]):
        stats = summary["engines"][eng]
        print(
            f"{eng}: mean_proxy_loss={stats['mean_proxy_loss']:.6g} "
            f"mean_rtn_relative={stats['mean_rtn_relative']:.4f} wins={stats['wins']}"
        )
    print(f"table -> {csv_path}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    effective = _merged_config(args, "verify")
    results = run_checks(tol_scale=float(effective["tol_scale"]), seed=int(effective["seed"]))
    for res in results:
        print(res.line())
    failed = [r for r in results if not r.passed]
    if effective["out"]:
        os.makedirs(effective["out"], exist_ok=True)
        path = os.path.join(effective["out"], "verify_report.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "tol_scale": effective["tol_scale"],
                    "seed": effective["seed"],
                    "passed": not failed,
                    "checks": [res.__dict__ for res in results],
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 4 if failed else 0


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--engine", choices=ENGINES, help="quantization engine")
    p.add_argument("--bits", type=int, help="code width in bits (2-8)")
    p.add_argument("--group-size", dest="group_size", type=int, help="input channels per scale group")
    p.add_argument(
        "--asymmetric",
        dest="symmetric",
        action="store_false",
        default=None,
        help="use an asymmetric grid with zero points",
    )
    p.add_argument("--block-size", dest="block_size", type=int, help="columns per lazy-update block")
    p.add_argument("--beta", type=float, help="drift-to-gradient scale for the first-order engines")
    p.add_argument("--damp-ratio", dest="damp_ratio", type=float, help="Hessian damping as a fraction of the mean diagonal")
    p.add_argument(
        "--first-order-sign",
        dest="first_order_sign",
        choices=FIRST_ORDER_SIGNS,
        help="sign of the first-order correction",
    )
    p.add_argument(
        "--scale-source",
        dest="scale_source",
        choices=("latent", "original"),
        help="fit group scales from live latent weights or frozen originals",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lowbit",
        description="Error-compensated low-bit weight quantization toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_cal = sub.add_parser("calibrate", help="accumulate per-layer calibration Hessians")
    p_cal.add_argument("--weights", help="safetensors file with '<layer>.weight' entries")
    p_cal.add_argument("--activations", nargs="+", help="tensor files with '<layer>.input[.<shard>]' entries")
    p_cal.add_argument(
        "--synthetic",
        help="synthetic activation spec, e.g. 'n_tokens=512,rho=0.9,seed=0' "
        "(per-layer seed = seed + index of the layer in sorted order)",
    )
    p_cal.add_argument("--out", help=f"output directory (default ${OUTDIR_ENV})")
    p_cal.add_argument("--layers", nargs="*", help="glob patterns selecting layers")
    p_cal.add_argument("--damp-ratio", dest="damp_ratio", type=float, help="damping ratio recorded for later use")
    p_cal.add_argument("--config", help="JSON config file (flags override it)")
    p_cal.set_defaults(func=cmd_calibrate)

    p_q = sub.add_parser("quantize", help="quantize layers against calibrated Hessians")
    p_q.add_argument("--weights", help="safetensors file with '<layer>.weight' entries")
    p_q.add_argument("--hessians", help="directory holding '<layer>.hessian.safetensors'")
    p_q.add_argument("--out", help=f"output directory (default ${OUTDIR_ENV})")
    p_q.add_argument("--layers", nargs="*", help="glob patterns selecting layers")
    p_q.add_argument("--jobs", type=int, help="layer-level parallelism")
    p_q.add_argument("--config", help="JSON config file (flags override it)")
    _add_engine_flags(p_q)
    p_q.set_defaults(func=cmd_quantize)

    p_c = sub.add_parser("compare", help="run several engines from the same Hessians")
    p_c.add_argument("--weights", help="safetensors file with '<layer>.weight' entries")
    p_c.add_argument("--hessians", help="directory holding '<layer>.hessian.safetensors'")
    p_c.add_argument("--out", help=f"output directory (default ${OUTDIR_ENV})")
    p_c.add_argument("--layers", nargs="*", help="glob patterns selecting layers")
    p_c.add_argument(
        "--engines",
        nargs="+",
        help="engine tokens, e.g. rtn gptq foem 'foem(plus)' 'foem(minus)'",
    )
    p_c.add_argument("--jobs", type=int, help="layer-level parallelism")
    p_c.add_argument("--config", help="JSON config file (flags override it)")
    _add_engine_flags(p_c)
    p_c.set_defaults(func=cmd_compare)

    p_v = sub.add_parser("verify", help="run the numerical verification suite")
    p_v.add_argument("--tol-scale", dest="tol_scale", type=float, help="multiply all scalable thresholds")
    p_v.add_argument("--seed", type=int, help="base seed for generated instances")
    p_v.add_argument("--out", help="directory for verify_report.json")
    p_v.add_argument("--config", help="JSON config file (flags override it)")
    p_v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TensorFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except LowbitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
