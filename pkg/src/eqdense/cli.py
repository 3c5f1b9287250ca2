"""``eqdense`` command line: training, equivariance checks, evaluation, FROC and stability runs.

Every option can come from a ``key = value`` file given with ``--config``;
explicit flags override the file, which overrides built-in defaults.  The
resolved options are written to ``config.txt`` in the output directory, and
passing that file back with ``--config`` reruns the same experiment.

Exit codes: 0 ok, 1 tolerance or assertion failure, 2 configuration error,
3 I/O or data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from eqdense import io
from eqdense.errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    UndefinedMetricError,
    UninitializedStateError,
    ValidationError,
)

logger = logging.getLogger("eqdense")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
GROUP_CHOICES = ("trivial", "p4", "p4m")


class DataError(Exception):
    """Unreadable or inconsistent input data (exit code 3)."""


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(",", " ").split()]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


@dataclass(frozen=True)
class Opt:
    name: str
    type: object = str
    default: object = None
    help: str = ""
    choices: tuple | None = None
    flag: bool = False
    required: bool = False

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


MODEL_OPTS = [
    Opt("preset", str, None, "model preset (overridden by --group/--growth)", choices=None),
    Opt("group", str, "p4m", "symmetry group", choices=GROUP_CHOICES),
    Opt("growth", int, 8, "growth channels per dense layer (group channels)"),
    Opt("blocks", int, 5, "number of dense blocks"),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "train": ("train a model and keep the best-validation checkpoint", MODEL_OPTS + [
        Opt("data", str, None, "dataset directory (train/ valid/ test/)", required=True),
        Opt("dataset-profile", str, "synthetic", "dataset layout checks", choices=("synthetic", "pcam")),
        Opt("profile", str, "desk", "training budget", choices=("desk", "full")),
        Opt("augment-d4", _parse_bool, False, "random D4 augmentation of training batches", flag=True),
        Opt("epochs", int, None, "override the profile's epoch count"),
        Opt("batches-per-epoch", int, None, "override the profile's batches per epoch"),
        Opt("batch-size", int, None, "override the profile's batch size"),
        Opt("val-size", int, None, "override the profile's validation subset size"),
        Opt("lr", float, None, "override the initial learning rate"),
        Opt("bn-recalibration", int, None, "batches used to re-estimate batch-norm moments each epoch (0 = off)"),
    ]),
    "check-equivariance": ("measure layerwise and end-to-end equivariance", MODEL_OPTS + [
        Opt("checkpoint", str, None, "checkpoint directory (fresh model if omitted)"),
        Opt("check-group", str, None, "group to test (default: the model's group, D4 for trivial)",
            choices=("c4", "d4")),
        Opt("n-inputs", int, 20, "random inputs per check"),
        Opt("size", int, 96, "input side"),
        Opt("tol", float, 1e-5, "layerwise tolerance"),
        Opt("tol-output", float, 1e-4, "end-to-end output tolerance"),
        Opt("expect-fail", _parse_bool, False, "succeed only if the check fails", flag=True),
    ]),
    "evaluate": ("patch metrics of a checkpoint on a dataset split", [
        Opt("checkpoint", str, None, "checkpoint directory", required=True),
        Opt("data", str, None, "dataset directory", required=True),
        Opt("dataset-profile", str, "synthetic", "dataset layout checks", choices=("synthetic", "pcam")),
        Opt("split", str, "test", "split to score", choices=("train", "valid", "test")),
        Opt("batch-size", int, 128, "inference batch size"),
    ]),
    "froc": ("tumour localisation FROC from candidate files or a checkpoint", [
        Opt("candidates", str, None, "candidates file (slide, prob, x, y)"),
        Opt("truth", str, None, "lesion centroid file (slide, cx, cy)"),
        Opt("slides", str, None, "slide manifest listing every slide id"),
        Opt("checkpoint", str, None, "generate candidates from this model on synthetic slides"),
        Opt("n-slides", int, 6, "synthetic test slides (checkpoint mode)"),
        Opt("n-tune-slides", int, 4, "synthetic validation slides for window tuning"),
        Opt("region-size", int, 448, "synthetic slide side in pixels"),
        Opt("window", int, None, "NMS window side in heat-map pixels"),
        Opt("windows", _parse_int_list, [1, 3, 5, 7], "window grid swept on validation slides"),
        Opt("hit-radius", float, 1.5, "hit radius (candidate coordinate units)"),
        Opt("bootstrap", int, 2000, "bootstrap replicates (0 disables)"),
    ]),
    "stability": ("prediction stability under sub-90 degree rotations", [
        Opt("checkpoint", str, None, "checkpoint directory", required=True),
        Opt("region", str, None, "EQT region ([H,W,3] uint8 or [C,H,W] float); synthetic if omitted"),
        Opt("region-size", int, 288, "side of the synthetic region"),
        Opt("angles", int, 32, "evenly spaced angles in [0, 90)"),
    ]),
    "make-synthetic": ("write a synthetic two-class patch dataset", [
        Opt("n-per-class", int, 512, "patches per class"),
        Opt("size", int, 96, "patch side"),
    ]),
    "convert-pcam": ("convert the PCam HDF5 release to the native container", [
        Opt("src", str, None, "directory holding the camelyonpatch_*.h5 files", required=True),
    ]),
}

NEEDS_OUT = {"train", "froc", "stability", "make-synthetic", "convert-pcam"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqdense", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file; explicit flags take precedence")
        p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
        p.add_argument("--out", default=None, help="output directory")
        for opt in opts:
            flag = "--" + opt.name
            if opt.flag:
                p.add_argument(flag, dest=opt.dest, action="store_true", default=None, help=opt.help)
            else:
                kw = {"choices": opt.choices} if opt.choices else {}
                p.add_argument(flag, dest=opt.dest, default=None, help=opt.help, **kw)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, the ``--config`` file and explicit flags; values are typed."""
    opts = COMMANDS[command][1] + [Opt("seed", int, 0), Opt("out", str, None)]
    file_values = {}
    if ns.config is not None:
        try:
            raw_items = io.read_key_values(ns.config)
        except FormatError as exc:
            raise ConfigurationError(str(exc)) from None
        file_values = {k.replace("_", "-"): v for k, v in raw_items.items()}
        known = {o.name for o in opts} | {"command"}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigurationError(f"{ns.config}: unknown key(s) {', '.join(unknown)}")
        if file_values.get("command", command) != command:
            raise ConfigurationError(f"{ns.config}: written for command {file_values['command']!r}")
    cfg = {}
    for opt in opts:
        raw = getattr(ns, opt.dest, None)
        source = f"--{opt.name}"
        if raw is None and opt.name in file_values:
            raw, source = file_values[opt.name], f"{ns.config}: {opt.name}"
        if raw is None:
            cfg[opt.dest] = opt.default
            continue
        if raw == "" and opt.type is not _parse_int_list:
            cfg[opt.dest] = None
            continue
        try:
            value = raw if isinstance(raw, bool) else opt.type(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{source}: {exc}") from None
        if opt.choices and value not in opt.choices:
            raise ConfigurationError(f"{source}: {value!r} is not one of {', '.join(opt.choices)}")
        cfg[opt.dest] = value
    for opt in opts:
        if opt.required and cfg[opt.dest] is None:
            raise ConfigurationError(f"--{opt.name} is required")
    if command in NEEDS_OUT and cfg["out"] is None:
        raise ConfigurationError("--out is required")
    cfg["_explicit"] = {o.dest for o in opts if getattr(ns, o.dest, None) is not None or o.name in file_values}
    return cfg


def dump_config(command: str, cfg: dict, out: Path) -> None:
    items = {"command": command}
    items.update({k.replace("_", "-"): _fmt(v) for k, v in cfg.items() if not k.startswith("_") and k != "out"})
    io.atomic_write_text(out / "config.txt", io.format_key_values(items))


def _positive(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) is not None and cfg[key] < 1:
            raise ConfigurationError(f"--{key.replace('_', '-')}: must be >= 1, got {cfg[key]}")


def model_config(cfg: dict):
    from eqdense.model import PRESETS, ModelConfig

    if cfg.get("preset"):
        if cfg["preset"] not in PRESETS:
            raise ConfigurationError(f"--preset: unknown preset {cfg['preset']!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[cfg["preset"]]
        explicit = cfg["_explicit"]
        group = cfg["group"] if "group" in explicit else base.group_kind
        growth = cfg["growth"] if "growth" in explicit else base.growth_channels
        blocks = cfg["blocks"] if "blocks" in explicit else base.num_blocks
    else:
        group, growth, blocks = cfg["group"], cfg["growth"], cfg["blocks"]
    _positive({"growth": growth, "blocks": blocks}, "growth", "blocks")
    return ModelConfig(group, growth, num_blocks=blocks, seed=cfg["seed"])


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path):
    from eqdense.model import DenseNet, load_checkpoint

    config, store, meta = load_checkpoint(path)
    return DenseNet(config), store, meta


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: dict) -> int:
    from eqdense.data import load_dataset
    from eqdense.model import DenseNet, param_count, save_checkpoint
    from eqdense.training import HistoryRow, run_training, schedule_for

    _positive(cfg, "epochs", "batches_per_epoch", "batch_size", "val_size")
    mcfg = model_config(cfg)
    if cfg["augment_d4"] and mcfg.group_kind == "D4":
        print("warning: --augment-d4 is redundant for a D4-equivariant model; "
              "it is intended for the planar baseline", file=sys.stderr)
    if cfg["bn_recalibration"] is not None and cfg["bn_recalibration"] < 0:
        raise ConfigurationError("--bn-recalibration must be >= 0")
    overrides = {k: cfg[k] for k in ("epochs", "batches_per_epoch", "batch_size", "val_size", "lr",
                                     "bn_recalibration") if cfg[k] is not None}
    schedule = schedule_for(cfg["profile"], augment_d4=cfg["augment_d4"], seed=cfg["seed"], **overrides)
    try:
        dataset = load_dataset(cfg["data"], cfg["dataset_profile"])
    except (OSError, FormatError) as exc:
        raise DataError(f"--data: {exc}") from None
    out = _out_dir(cfg)
    dump_config("train", cfg, out)
    model = DenseNet(mcfg)
    model.trace_shapes(dataset.train.images.shape[1:3])
    store = model.init_params()
    logger.info("model %s growth %d: %d weights", mcfg.group_kind, mcfg.growth_channels, param_count(store))

    header = "epoch\ttrain_nll\tval_nll\tlr\n"
    lines: list[str] = []

    def on_epoch(row: HistoryRow, _model, _store):
        lines.append(row.format() + "\n")
        io.atomic_write_text(out / "history.log", header + "".join(lines))

    result = run_training(model, store, dataset, schedule, on_epoch=on_epoch)
    save_checkpoint(out / "checkpoint", mcfg, result.best_store, result.best_epoch, result.best_val_loss)
    print(f"best epoch {result.best_epoch} val_nll {result.best_val_loss:.6f}")
    print(f"checkpoint {out / 'checkpoint'}")
    return EXIT_OK


def cmd_check_equivariance(cfg: dict) -> int:
    from eqdense.checks import measure_equivariance
    from eqdense.model import build_model

    _positive(cfg, "n_inputs", "size")
    if cfg["checkpoint"] is not None:
        if not (Path(cfg["checkpoint"]) / "manifest.txt").exists():
            raise FileNotFoundError(f"--checkpoint: no checkpoint at {cfg['checkpoint']}")
        model, store, _ = _load_model(cfg["checkpoint"])
    else:
        model, store = build_model(model_config(cfg))
    group = cfg["check_group"] or ("C4" if model.config.group_kind == "C4" else "D4")
    rng = np.random.default_rng(cfg["seed"])
    x = rng.random((cfg["n_inputs"], model.config.in_channels, cfg["size"], cfg["size"])).astype(np.float32)
    report = measure_equivariance(model, store, x, group.upper())
    layer_max, out_max = report.max_layerwise(), report.max_end_to_end()
    ok = layer_max < cfg["tol"] and out_max < cfg["tol_output"]
    lines = [f"# model {model.config.group_kind} growth {model.config.growth_channels}; "
             f"group {group.upper()}; {cfg['n_inputs']} inputs of {cfg['size']}x{cfg['size']}"]
    lines += report.lines()
    lines.append(f"layerwise max {layer_max:.3e} (tol {cfg['tol']:g})")
    lines.append(f"end-to-end max {out_max:.3e} (tol {cfg['tol_output']:g})")
    lines.append("PASS" if ok else "FAIL")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if cfg["out"] is not None:
        out = _out_dir(cfg)
        dump_config("check-equivariance", cfg, out)
        io.atomic_write_text(out / "equivariance.txt", text)
    if cfg["expect_fail"]:
        return EXIT_OK if not ok else EXIT_FAIL
    return EXIT_OK if ok else EXIT_FAIL


def cmd_evaluate(cfg: dict) -> int:
    from eqdense.data import load_dataset
    from eqdense.evaluation import metrics
    from eqdense.training import predict

    _positive(cfg, "batch_size")
    model, store, _ = _load_model(cfg["checkpoint"])
    try:
        split = load_dataset(cfg["data"], cfg["dataset_profile"]).split(cfg["split"])
    except (OSError, FormatError) as exc:
        raise DataError(f"--data: {exc}") from None
    probs = predict(model, store, split.images, cfg["batch_size"])
    m = metrics(probs, split.labels)
    text = "metric\tvalue\n" + "".join(f"{k}\t{v:.6f}\n" for k, v in m.items())
    print(text, end="")
    if cfg["out"] is not None:
        out = _out_dir(cfg)
        dump_config("evaluate", cfg, out)
        io.atomic_write_text(out / "metrics.txt", text)
    return EXIT_OK


def synthetic_slides(model, store, seed: int, n: int, size: int, tag: str):
    """Heat maps and heat-map-space lesion centroids of ``n`` synthetic slides.

    Slide ``i`` carries ``i % 3`` lesions, so every third slide is lesion-free.
    """
    from eqdense.data import generate_region
    from eqdense.evaluation import model_heatmap_fn
    from eqdense.training import images_to_input

    stride, offset = model.heatmap_geometry()
    predict = model_heatmap_fn(model, store)
    heatmaps, truth = {}, {}
    for i in range(n):
        slide = f"{tag}{i:03d}"
        img, _, centres = generate_region(seed * 100_003 + i, size, n_lesions=i % 3,
                                          radius_range=(0.06, 0.12))
        heatmaps[slide] = predict(images_to_input(img[None])[0])
        # (y, x) pixel centres to (x, y) heat-map coordinates
        truth[slide] = (centres[:, ::-1] - offset) / stride
    return heatmaps, truth


def cmd_froc(cfg: dict) -> int:
    from eqdense.evaluation import (
        bootstrap_ci,
        froc,
        read_candidates,
        read_truth,
        square_nms,
        tune_window,
        write_candidates,
        write_truth,
    )

    out = _out_dir(cfg)
    report = []
    if cfg["checkpoint"] is not None:
        _positive(cfg, "n_slides", "n_tune_slides")
        model, store, _ = _load_model(cfg["checkpoint"])
        size = cfg["region_size"]
        model.trace_shapes((size, size))
        window = cfg["window"]
        if window is None:
            tune_maps, tune_truth = synthetic_slides(model, store, cfg["seed"] * 2 + 1,
                                                     cfg["n_tune_slides"], size, "val")
            window, scores = tune_window(tune_maps, tune_truth, cfg["windows"], cfg["hit_radius"])
            report += [f"tune_window\t{w}\t{s:.6f}" for w, s in scores.items()]
        maps, truth = synthetic_slides(model, store, cfg["seed"] * 2, cfg["n_slides"], size, "slide")
        candidates = [c for s, hm in maps.items() for c in square_nms(hm, window, slide=s)]
        write_candidates(out / "candidates.txt", candidates)
        write_truth(out / "truth.txt", truth, out / "slides.txt")
        for s, hm in maps.items():
            io.save_tensor(out / f"heatmap_{s}.eqt", hm.astype(np.float32))
    else:
        if cfg["candidates"] is None or cfg["truth"] is None:
            raise ConfigurationError("--candidates and --truth are required without --checkpoint")
        candidates = read_candidates(cfg["candidates"])
        truth = read_truth(cfg["truth"], cfg["slides"])
        window = cfg["window"]
        if window is not None:
            candidates = square_nms(candidates, window)
    if window is not None:
        _positive({"window": window}, "window")
    dump_config("froc", cfg, out)

    result = froc(candidates, truth, cfg["hit_radius"])
    report.append(f"window\t{window if window is not None else 'none'}")
    report.append(f"score\t{result.score:.6f}")
    report += [f"sensitivity@{lvl:g}\t{s:.6f}" for lvl, s in result.sensitivities.items()]
    if cfg["bootstrap"] > 0 and len(truth) >= 2:
        lo, hi = bootstrap_ci(candidates, truth, cfg["hit_radius"], cfg["bootstrap"], cfg["seed"])
        result.ci = (lo, hi)
        report.append(f"ci95\t{lo:.6f}\t{hi:.6f}")
    else:
        report.append("ci95\tnone (needs --bootstrap > 0 and at least 2 slides)")
    report += [f"curve\t{fp:.6f}\t{sens:.6f}" for fp, sens in result.curve]
    text = "\n".join(report) + "\n"
    io.atomic_write_text(out / "froc.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_stability(cfg: dict) -> int:
    from eqdense.data import generate_region
    from eqdense.evaluation import model_heatmap_fn, stability_map, write_pgm
    from eqdense.training import images_to_input

    _positive(cfg, "angles", "region_size")
    model, store, _ = _load_model(cfg["checkpoint"])
    if cfg["region"] is not None:
        region = io.load_tensor(cfg["region"])
        if region.dtype == np.uint8 and region.ndim == 3 and region.shape[-1] == 3:
            region = images_to_input(region[None])[0]
        elif region.ndim != 3:
            raise FormatError(f"{cfg['region']}: expected [H,W,3] uint8 or [C,H,W] float, got {region.shape}")
        region = region.astype(np.float32)
    else:
        img, _, _ = generate_region(cfg["seed"], cfg["region_size"], n_lesions=1)
        region = images_to_input(img[None])[0]
    model.trace_shapes(region.shape[1:])
    out = _out_dir(cfg)
    dump_config("stability", cfg, out)
    res = stability_map(model_heatmap_fn(model, store), region, cfg["angles"])
    io.save_tensor(out / "mean.eqt", res.mean.astype(np.float32))
    io.save_tensor(out / "std.eqt", res.std.astype(np.float32))
    write_pgm(out / "mean.pgm", res.mean)
    write_pgm(out / "std.pgm", res.std)
    text = f"angles\t{len(res.angles)}\nmap_side\t{res.std.shape[0]}\ninstability\t{res.instability!r}\n"
    io.atomic_write_text(out / "stability.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_make_synthetic(cfg: dict) -> int:
    from eqdense.data import generate_synthetic, save_dataset

    _positive(cfg, "n_per_class", "size")
    out = _out_dir(cfg)
    ds = generate_synthetic(cfg["seed"], cfg["n_per_class"], cfg["size"])
    save_dataset(out, ds)
    dump_config("make-synthetic", cfg, out)
    print(f"train {len(ds.train)} valid {len(ds.valid)} test {len(ds.test)} -> {out}")
    return EXIT_OK


def cmd_convert_pcam(cfg: dict) -> int:
    from eqdense.data import convert_pcam

    out = _out_dir(cfg)
    ds = convert_pcam(cfg["src"], out)
    print(f"train {len(ds.train)} valid {len(ds.valid)} test {len(ds.test)} -> {out}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "check-equivariance": cmd_check_equivariance,
    "evaluate": cmd_evaluate,
    "froc": cmd_froc,
    "stability": cmd_stability,
    "make-synthetic": cmd_make_synthetic,
    "convert-pcam": cmd_convert_pcam,
}


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except (DataError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, ValidationError, DimensionError, UndefinedMetricError,
            UninitializedStateError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
