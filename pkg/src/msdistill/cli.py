"""Command-line entry point: ``msdistill <command> [flags]``.

Commands: gen-data, pretrain, probe, segprobe, embed, gradcheck, report.
Exit codes: 0 success, 1 usage error, 2 runtime failure. Logs go to stderr,
machine-readable summaries to stdout. Settings resolve as built-in defaults <
``--config`` file < command-line flags; ``RSD_SEED`` replaces the built-in
default seed and nothing else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import nncore

log = logging.getLogger("msdistill")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CONFIG_SUFFIX = ".config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 and the valid flags listed."""

    def error(self, message):
        flags = sorted({o for a in self._actions for o in a.option_strings if o.startswith("--")})
        msg = f"{self.prog}: error: {message}"
        if flags:
            msg += "\nvalid flags: " + " ".join(flags)
        raise UsageError(f"{self.format_usage()}{msg}")


# Overridable settings per command: dest -> (built-in default, type).
# Flags default to None so that "given on the command line" is detectable.
_SETTINGS = {
    "gen-data": {
        "out": (None, str),
        "patches": (2000, int),
        "classes": (4, int),
        "size": (32, int),
        "ms": (10, int),
        "sar": (2, int),
        "texture": (True, bool),
        "seed": (0, int),
    },
    "pretrain": {
        "data": (None, str),
        "out": (None, str),
        "policy": ("single", str),
        "rgb_bands": ("2,1,0", str),
        "tau": (0.9, float),
        "batch": (32, int),
        "epochs": (30, int),
        "lr_min": (0.002, float),
        "lr_max": (0.2, float),
        "warm": (10, int),
        "mult": (2, int),
        "wd": (1e-5, float),
        "momentum": (0.9, float),
        "width": (32, int),
        "depth": (3, int),
        "hidden": (256, int),
        "proj_dim": (64, int),
        "out_size": (0, int),
        "checkpoint_every": (10, int),
        "ablate_stop_gradient": (False, bool),
        "debug_checks": (False, bool),
        "augment": ({}, dict),
        "seed": (0, int),
    },
    "probe": {
        "ckpt": (None, str),
        "data": (None, str),
        "mode": ("linear", str),
        "bands": ("all", str),
        "epochs": (100, int),
        "batch": (32, int),
        "random_init": (False, bool),
        "out": ("", str),
        "seed": (0, int),
    },
    "embed": {
        "ckpt": (None, str),
        "data": (None, str),
        "bands": (None, str),
        "split": ("probe_test", str),
        "out": (None, str),
        "seed": (0, int),
    },
    "gradcheck": {
        "tolerance": (1e-3, float),
        "out": ("", str),
        "seed": (0, int),
    },
    "report": {
        "out": ("", str),
    },
}
_SETTINGS["segprobe"] = dict(_SETTINGS["probe"], mode=("seg", str), epochs=(30, int))

# pretrain setting -> TrainConfig field
_TRAIN_FIELDS = {
    "tau": "tau", "batch": "batch_size", "epochs": "epochs", "lr_min": "lr_min", "lr_max": "lr_max",
    "warm": "warm_period_epochs", "mult": "period_multiplier", "wd": "weight_decay",
    "momentum": "momentum", "width": "width", "depth": "depth_blocks", "hidden": "hidden_dim",
    "proj_dim": "proj_dim", "checkpoint_every": "checkpoint_every",
    "ablate_stop_gradient": "ablate_stop_gradient", "debug_checks": "debug_checks", "seed": "seed",
}


def _flag(p, name, type_=None, help=None, **kw):
    p.add_argument("--" + name, dest=name.replace("-", "_"), default=None, type=type_, help=help, **kw)


def _switch(p, name, help=None):
    p.add_argument("--" + name, dest=name.replace("-", "_"), default=None, action="store_const", const=True, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msdistill", description="Multi-modal student-teacher pretraining and probing.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True
    parser.commands = {}

    def command(name, help):
        p = sub.add_parser(name, help=help, description=help, parents=[common])
        parser.commands[name] = p
        if name != "report":
            p.add_argument("--config", default=None, help="key=value or JSON file; flags override it")
        return p

    p = command("gen-data", "write a synthetic dataset")
    _flag(p, "out", str, "output directory")
    _flag(p, "patches", int)
    _flag(p, "classes", int)
    _flag(p, "size", int, "patch side in pixels (16, 32 or 64)")
    _flag(p, "ms", int, "number of MS bands")
    _flag(p, "sar", int, "number of SAR bands (1 or 2)")
    p.add_argument("--no-texture", dest="texture", default=None, action="store_const", const=False,
                   help="flat regions without class texture")
    _flag(p, "seed", int)

    p = command("pretrain", "self-supervised pretraining")
    _flag(p, "data", str, "dataset directory")
    _flag(p, "out", str, "run directory")
    _flag(p, "policy", str, "single | three | rgb-s1s2 | ms-only")
    _flag(p, "rgb-bands", str, "comma-separated RGB band indices")
    for name, t in (("tau", float), ("batch", int), ("epochs", int), ("lr-min", float), ("lr-max", float),
                    ("warm", int), ("mult", int), ("wd", float), ("momentum", float), ("width", int),
                    ("depth", int), ("hidden", int), ("proj-dim", int), ("out-size", int),
                    ("checkpoint-every", int), ("seed", int)):
        _flag(p, name, t)
    _switch(p, "ablate-stop-gradient", "let gradients reach the teacher branch")
    _switch(p, "debug-checks", "assert the optimizer never touches the teacher")

    for name, help in (("probe", "probe a frozen encoder"), ("segprobe", "segmentation probe of a frozen encoder")):
        p = command(name, help)
        _flag(p, "ckpt", str, "checkpoint file")
        _flag(p, "data", str, "dataset directory")
        if name == "probe":
            _flag(p, "mode", str, "linear | seg")
        _flag(p, "bands", str, "'all', or band sets separated by ';' with ',' inside a set (indices or names)")
        _flag(p, "epochs", int)
        _flag(p, "batch", int)
        _switch(p, "random-init", "probe the untrained encoder of the same architecture")
        _flag(p, "out", str, "report directory (default: next to the checkpoint)")
        _flag(p, "seed", int)

    p = command("embed", "export frozen-encoder embeddings as CSV")
    _flag(p, "ckpt", str)
    _flag(p, "data", str)
    _flag(p, "bands", str, "one band set")
    _flag(p, "split", str)
    _flag(p, "out", str, "CSV path")
    _flag(p, "seed", int)

    p = command("gradcheck", "finite-difference check of every layer kind and the loss path")
    _flag(p, "tolerance", float)
    _flag(p, "out", str, "optional JSON report path")
    _flag(p, "seed", int)

    p = command("report", "aggregate probe reports into one CSV")
    p.add_argument("run_dirs", nargs="*", help="directories holding *.probe.json")
    _flag(p, "out", str, "CSV path (default: stdout)")
    return parser


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _parse_value(raw: str, type_):
    if type_ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_ is dict:
        return json.loads(raw)
    return type_(raw)


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines (``#`` comments allowed) or a JSON object."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(command: str, args: argparse.Namespace, env=None) -> dict:
    """Merge built-in defaults, ``RSD_SEED``, the config file and explicit flags."""
    env = os.environ if env is None else env
    spec = _SETTINGS[command]
    cfg = {k: (dict(d) if isinstance(d, dict) else d) for k, (d, _) in spec.items()}
    if "seed" in spec and env.get("RSD_SEED"):
        try:
            cfg["seed"] = int(env["RSD_SEED"])
        except ValueError:
            raise UsageError(f"RSD_SEED must be an integer, got {env['RSD_SEED']!r}") from None
    if getattr(args, "config", None):
        try:
            filed = read_config_file(args.config)
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if filed.get("command", command) != command:
            raise UsageError(f"config {args.config} is for command {filed['command']!r}, not {command!r}")
        for key, raw in filed.items():
            if key == "command":
                continue
            key = key.replace("-", "_")
            if key.startswith("augment.") and "augment" in spec:
                cfg["augment"][key.split(".", 1)[1]] = float(raw)
                continue
            if key not in spec:
                raise UsageError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(spec))}")
            type_ = spec[key][1]
            try:
                cfg[key] = _parse_value(raw, type_) if isinstance(raw, str) and type_ is not str else raw
            except ValueError as e:
                raise UsageError(f"config key {key}: {e}") from None
            if type_ is float and isinstance(cfg[key], int) and not isinstance(cfg[key], bool):
                cfg[key] = float(cfg[key])
    for key in spec:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def write_resolved(path: Path, command: str, cfg: dict) -> Path:
    doc = {"command": command, **cfg}
    nncore.atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    return path


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def train_config(cfg: dict):
    from .optimsched import TrainConfig
    from .viewsampler import SamplingPolicy

    try:
        rgb = tuple(int(i) for i in str(cfg["rgb_bands"]).split(","))
        kw = {field: cfg[key] for key, field in _TRAIN_FIELDS.items()}
        return TrainConfig(
            policy=SamplingPolicy(cfg["policy"], rgb),
            out_size=cfg["out_size"] or None,
            augment=dict(cfg["augment"]),
            **kw,
        )
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"invalid training configuration: {e}") from None


def cmd_gen_data(cfg):
    from .rasterstore import ConfigError, generate_synthetic_dataset

    _require(cfg, "out")
    try:
        m = generate_synthetic_dataset(
            cfg["out"], cfg["patches"], cfg["classes"], cfg["size"], cfg["ms"], cfg["sar"],
            seed=cfg["seed"], texture=cfg["texture"],
        )
    except ConfigError as e:
        raise UsageError(str(e)) from None
    write_resolved(Path(cfg["out"]) / ("gen-data" + CONFIG_SUFFIX), "gen-data", cfg)
    _emit({"manifest": str(Path(cfg["out"]) / "manifest.json"), "patches": len(m.patches),
           "splits": {k: len(v) for k, v in m.splits.items()}})


def cmd_pretrain(cfg):
    from .rasterstore import load_manifest
    from .trainer import pretrain

    _require(cfg, "data", "out")
    tc = train_config(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out / ("pretrain" + CONFIG_SUFFIX), "pretrain", cfg)
    state = pretrain(load_manifest(cfg["data"]), tc, out)
    last = state.history[-1]
    _emit({"checkpoint": str(state.checkpoints[-1]), "epochs": state.epoch, "final_loss": last["mean_loss"],
           "collapse_metric": last["collapse_metric"], "history": str(out / "history.csv")})


def _encoder_source(cfg):
    """The checkpointed model, or a fresh one of the same architecture for --random-init."""
    from .optimsched import TrainConfig
    from .trainer import build_model, load_checkpoint

    model, meta = load_checkpoint(cfg["ckpt"])
    if cfg.get("random_init"):
        tc = TrainConfig.from_dict(meta["config"])
        tc.seed = cfg["seed"]
        model = build_model(tc)
    return model, meta


def parse_band_sets(text: str, bands, policy=None) -> list[tuple[int, ...]]:
    """``all`` (needs ``policy``), or ';'-separated sets of ','-separated indices or band names."""
    from .rasterstore import band_names
    from .viewsampler import enumerate_eval_bandsets

    if text.strip() == "all":
        return enumerate_eval_bandsets(policy, bands)
    names = {n.lower(): i for i, n in enumerate(band_names(bands))}
    sets = []
    for chunk in text.split(";"):
        idx = []
        for tok in chunk.split(","):
            tok = tok.strip()
            if tok.isdigit():
                i = int(tok)
            elif tok.lower() in names:
                i = names[tok.lower()]
            else:
                raise UsageError(f"unknown band {tok!r}; use indices or one of {', '.join(band_names(bands))}")
            if not 0 <= i < len(bands):
                raise UsageError(f"band index {i} out of range for {len(bands)} bands")
            idx.append(i)
        sets.append(tuple(idx))
    return sets


def cmd_probe(cfg, command="probe"):
    from .optimsched import TrainConfig
    from .probe import linear_probe, seg_probe
    from .rasterstore import load_manifest, load_split

    _require(cfg, "ckpt", "data")
    if cfg["mode"] not in ("linear", "seg"):
        raise UsageError(f"--mode must be linear or seg, got {cfg['mode']!r}")
    manifest = load_manifest(cfg["data"])
    model, meta = _encoder_source(cfg)
    data = (load_split(manifest, "probe_train"), load_split(manifest, "probe_test"))
    policy = TrainConfig.from_dict(meta["config"]).policy
    sets = parse_band_sets(cfg["bands"], data[0].bands, policy)
    out = Path(cfg["out"] or Path(cfg["ckpt"]).parent)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out / (command + CONFIG_SUFFIX), command, cfg)
    run = linear_probe if cfg["mode"] == "linear" else seg_probe
    prefix = cfg["mode"] + ("_random" if cfg["random_init"] else "")
    for bs in sets:
        r = run(model, manifest, bs, epochs=cfg["epochs"], seed=cfg["seed"], batch_size=cfg["batch"], data=data)
        path = r.save(out / f"{prefix}_{r.band_names.replace('/', '-')}.probe.json")
        log.info("%s %s: F1 %.4f mIoU %.4f AA %.4f", cfg["mode"], r.band_names, r.f1_macro, r.miou, r.aa)
        _emit({"report": str(path), "band_set": r.band_names, "f1_macro": r.f1_macro, "miou": r.miou, "aa": r.aa})


def cmd_embed(cfg):
    from .probe import export_embeddings
    from .rasterstore import load_manifest, read_patch

    _require(cfg, "ckpt", "data", "bands", "out")
    manifest = load_manifest(cfg["data"])
    if cfg["split"] not in manifest.splits:
        raise UsageError(f"unknown split {cfg['split']!r}; choose from {', '.join(manifest.splits)}")
    paths = manifest.paths(cfg["split"])
    model, _ = _encoder_source(cfg)
    sets = parse_band_sets(cfg["bands"], read_patch(paths[0]).bands)
    if len(sets) != 1:
        raise UsageError("embed takes exactly one band set")
    path = export_embeddings(model, manifest, sets[0], cfg["out"], split=cfg["split"])
    write_resolved(Path(str(path) + CONFIG_SUFFIX), "embed", cfg)
    _emit({"embeddings": str(path), "rows": len(paths)})


def cmd_gradcheck(cfg):
    from .distill import loss_path_gradcheck

    reports = nncore.gradcheck_suite(cfg["tolerance"], cfg["seed"])
    reports["loss_path"] = loss_path_gradcheck(cfg["tolerance"], cfg["seed"])
    doc = {}
    for name, r in reports.items():
        log.info("%s: %s", name, r.summary())
        doc[name] = {"passed": r.passed, "coords": r.n_coords, "fraction_within": r.fraction_within,
                     "max_rel_error": r.max_rel_error}
    passed = all(r.passed for r in reports.values())
    if cfg["out"]:
        nncore.atomic_write(Path(cfg["out"]), (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
        write_resolved(Path(cfg["out"] + CONFIG_SUFFIX), "gradcheck", cfg)
    _emit({"passed": passed, "checks": doc})
    if not passed:
        raise RuntimeError("gradient check failed: " + ", ".join(k for k, r in reports.items() if not r.passed))


def cmd_report(cfg, run_dirs):
    from .probe import aggregate_reports, rows_to_csv

    rows, warnings = aggregate_reports(run_dirs)
    for w in warnings:
        log.warning(w)
    text = rows_to_csv(rows)
    if cfg["out"]:
        nncore.atomic_write(Path(cfg["out"]), text.encode())
        write_resolved(Path(cfg["out"] + CONFIG_SUFFIX), "report", dict(cfg, run_dirs=list(run_dirs)))
        _emit({"report": cfg["out"], "rows": len(rows), "skipped": len(warnings)})
    else:
        sys.stdout.write(text)


def run(argv=None, env=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            parser.commands[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(
        stream=sys.stderr, level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True,
    )
    try:
        cfg = resolve(args.command, args, env)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg)
        elif args.command in ("probe", "segprobe"):
            cmd_probe(cfg, args.command)
        elif args.command == "embed":
            cmd_embed(cfg)
        elif args.command == "gradcheck":
            cmd_gradcheck(cfg)
        elif args.command == "report":
            cmd_report(cfg, args.run_dirs)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failure: report, do not dump a traceback by default
        log.error("%s failed: %s", args.command, e)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
