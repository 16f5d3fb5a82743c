"""Command-line entry point: ``agpad {synth,train,eval,ablate,gradcam,inspect}``.

Configuration is a flat ``key=value`` file (``#`` starts a comment); command
flags override file values. The resolved configuration is written to
``<out>/run_config.txt`` and can be fed back with ``--config``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import metrics
from .attention import FUSION_MODES, NORMALIZE_AXES, FusionConfig, cam_attention_map, pam_attention_map
from .data import DataError, SynthConfig, generate_synth, load_dataset, load_image, load_manifest, render_iris, save_image
from .gradcam import grad_cam, upsample_overlay
from .model import VARIANTS, BackboneConfig, PADModel, ablation_variant
from .tensor import DimensionError, NumericError, Tensor, no_grad, save_tensor
from .train import TrainConfig, train

log = logging.getLogger("agpad")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

VARIANT_LABELS = {
    "none": "w/o Attention",
    "pam": "w/ PAM",
    "cam": "w/ CAM",
    "parallel": "w/ PAM and CAM (parallel)",
    "sequential": "w/ PAM and CAM (sequential)",
    "hierarchical": "w/ PAM and CAM (hierarchical)",
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _schema() -> dict[str, tuple[object, callable]]:
    """key -> (default, parser)."""
    bb = BackboneConfig()
    schema: dict[str, tuple[object, callable]] = {
        "seed": (0, int),
        "out": ("runs/default", str),
        "model.channels": (bb.channels, _ints),
        "model.input_size": (bb.input_size, int),
        "model.in_channels": (bb.in_channels, int),
        "model.fusion": ("parallel", str),
        "model.reduction_ratio": (8, int),
        "model.normalize": ("columns", str),
        "data.manifest": ("", str),
        "eval.fdr_targets": ((0.001, 0.002, 0.01), _floats),
        "eval.threshold": (0.5, float),
        "gradcam.opacity": (0.5, float),
        "gradcam.target": ("probability", str),
    }
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        default = getattr(TrainConfig(), f.name)
        schema[f"train.{f.name}"] = (default, _bool if isinstance(default, bool) else type(default))
    for f in fields(SynthConfig):
        if f.name == "seed":
            continue
        default = getattr(SynthConfig(), f.name)
        schema[f"synth.{f.name}"] = (default, (lambda s: tuple(x.strip() for x in s.split(","))) if isinstance(default, tuple) else type(default))
    return schema


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    raw: dict[str, str] = {}
    problems = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source} line {n}: expected key=value, got {line!r}")
            continue
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return raw


class RunConfig(dict):
    """Fully resolved run configuration (flat dotted keys)."""

    @classmethod
    def resolve(cls, *layers: dict[str, str]) -> "RunConfig":
        schema = _schema()
        cfg = cls({k: d for k, (d, _) in schema.items()})
        problems = []
        for layer in layers:
            for key, value in layer.items():
                if key not in schema:
                    problems.append(f"unknown key {key!r}")
                    continue
                try:
                    cfg[key] = schema[key][1](value) if isinstance(value, str) else value
                except ValueError as exc:
                    problems.append(f"{key}: {exc}")
        # keys that failed to parse keep their defaults, so the semantic pass is safe
        problems += cfg._semantic_problems()
        if problems:
            raise ConfigError(problems)
        return cfg

    def _semantic_problems(self) -> list[str]:
        problems = []
        if self["model.fusion"] not in FUSION_MODES:
            problems.append(f"model.fusion: must be one of {', '.join(FUSION_MODES)}")
        if self["model.normalize"] not in NORMALIZE_AXES:
            problems.append(f"model.normalize: must be one of {', '.join(NORMALIZE_AXES)}")
        if self["model.reduction_ratio"] < 1:
            problems.append("model.reduction_ratio: must be positive")
        for builder, prefix in ((self.backbone, "model"), (self.train_config, "train"), (self.synth_config, "synth")):
            try:
                builder()
            except ValueError as exc:
                problems.append(f"{prefix}: {exc}")
        if not 0.0 <= self["eval.threshold"] <= 1.0:
            problems.append("eval.threshold: must be in [0, 1]")
        if not self["eval.fdr_targets"] or any(not 0.0 <= t < 1.0 for t in self["eval.fdr_targets"]):
            problems.append("eval.fdr_targets: every target must be in [0, 1)")
        if self["gradcam.target"] not in ("probability", "logit"):
            problems.append("gradcam.target: must be probability or logit")
        return problems

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self["model.channels"], self["model.input_size"], self["model.in_channels"])

    def fusion(self) -> FusionConfig:
        return FusionConfig(self["model.fusion"], self["model.reduction_ratio"], self["model.normalize"])

    def train_config(self) -> TrainConfig:
        kw = {f.name: self[f"train.{f.name}"] for f in fields(TrainConfig) if f.name != "seed"}
        return TrainConfig(seed=self["seed"], **kw)

    def synth_config(self) -> SynthConfig:
        kw = {f.name: self[f"synth.{f.name}"] for f in fields(SynthConfig) if f.name != "seed"}
        return SynthConfig(seed=self["seed"], **kw)

    @property
    def out(self) -> Path:
        return Path(self["out"])

    @property
    def manifest_path(self) -> Path:
        return Path(self["data.manifest"]) if self["data.manifest"] else self.out / "data" / "manifest.csv"

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(self.items()))

    def write(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "run_config.txt").write_text(self.to_text())


# ---------------------------------------------------------------------------
# commands


def _load_split(cfg: RunConfig, split: str, required: bool = True):
    manifest = load_manifest(cfg.manifest_path)
    part = manifest.split(split)
    if not len(part):
        if required:
            raise DataError(f"{cfg.manifest_path}: no records in split {split!r}")
        return None, part
    bb = cfg.backbone()
    return load_dataset(part, bb.input_size, bb.in_channels), part


def _build_model(cfg: RunConfig) -> PADModel:
    return PADModel.create(cfg.backbone(), cfg.fusion(), seed=cfg["seed"])


def _checkpoint(cfg: RunConfig, args) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else cfg.out / "model.agpd"
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return path


def cmd_synth(cfg: RunConfig, args) -> int:
    out_dir = cfg.manifest_path.parent
    report = generate_synth(cfg.synth_config(), out_dir)
    print(f"wrote {len(report.manifest)} images to {out_dir}")
    print(f"mean Laplacian variance: live {report.live_lapvar:.6g}, lattice {report.lattice_lapvar}, flat {report.flat_lapvar}")
    return EXIT_OK


def _train_one(cfg: RunConfig, model: PADModel, out_dir: Path):
    (train_set, _), (val_set, _) = _load_split(cfg, "train"), _load_split(cfg, "val", required=False)
    history = train(model, train_set, cfg.train_config(), val=val_set, out_dir=out_dir)
    model.save(out_dir / "model.agpd")
    return history


def cmd_train(cfg: RunConfig, args) -> int:
    model = _build_model(cfg)
    history = _train_one(cfg, model, cfg.out)
    last = history.epochs[-1]
    print(f"trained {len(history.epochs)} epochs: loss {last.loss:.5f}, train_acc {last.train_acc:.4f}")
    print(f"checkpoint: {cfg.out / 'model.agpd'}")
    return EXIT_OK


def _evaluate(cfg: RunConfig, model: PADModel, out_dir: Path) -> tuple[metrics.ScoreSet, str]:
    (images, labels), part = _load_split(cfg, "test")
    scores = model.pa_score(images)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "score"])
        for rec, s in zip(part.records, scores):
            w.writerow([rec.path, rec.label, repr(float(s))])
    score_set = metrics.ScoreSet.from_labels(scores, labels)
    metrics.roc(score_set).to_csv(out_dir / "roc.csv")
    text = metrics.summary(score_set, cfg["eval.fdr_targets"], cfg["eval.threshold"])
    (out_dir / "summary.txt").write_text(text)
    return score_set, text


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _build_model(cfg).load(_checkpoint(cfg, args))
    _, text = _evaluate(cfg, model, cfg.out)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    base = _build_model(cfg)
    targets = cfg["eval.fdr_targets"]
    rows = []
    for variant in VARIANTS:
        vdir = cfg.out / "ablation" / variant
        vdir.mkdir(parents=True, exist_ok=True)
        model = ablation_variant(base, variant)
        log.info("ablation: training %s", variant)
        _train_one(cfg, model, vdir)
        score_set, _ = _evaluate(cfg, model, vdir)
        n_live = score_set.live_scores.size
        row = {"variant": variant, "label": VARIANT_LABELS[variant]}
        for t in targets:
            key = f"tdr@{metrics.format_target(t)}"
            row[key] = metrics.tdr_at_fdr(score_set, t)[0] if metrics.fdr_target_supported(n_live, t) else None
        row["apcer"], row["bpcer"] = metrics.apcer_bpcer(score_set, cfg["eval.threshold"])
        rows.append(row)

    cols = list(rows[0])
    with open(cfg.out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
    text = format_ablation(rows, targets, cfg["eval.threshold"])
    (cfg.out / "ablation.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def format_ablation(rows: list[dict], targets, threshold: float) -> str:
    heads = [f"TDR@{metrics.format_target(t)}FDR" for t in targets] + [f"APCER@{threshold:g}", f"BPCER@{threshold:g}"]
    keys = [f"tdr@{metrics.format_target(t)}" for t in targets] + ["apcer", "bpcer"]
    width = max(len(r["label"]) for r in rows) + 2
    lines = ["".ljust(width) + "  ".join(h.rjust(14) for h in heads)]
    for r in rows:
        cells = ["n/a".rjust(14) if r[k] is None else f"{r[k] * 100:14.2f}" for k in keys]
        lines.append(r["label"].ljust(width) + "  ".join(cells))
    # ordering is reported, not asserted
    key = keys[len(targets) - 1]
    scored = [r for r in rows if r.get(key) is not None]
    base = next((r for r in scored if r["variant"] == "none"), None)
    if base is not None and len(scored) > 1:
        best = max((r for r in scored if r["variant"] != "none"), key=lambda r: r[key])
        rel = "above" if best[key] > base[key] else "at or below"
        lines.append(f"best attention variant by {heads[len(targets) - 1]}: {best['label']} "
                     f"({best[key] * 100:.2f}), {rel} w/o Attention ({base[key] * 100:.2f})")
    return "\n".join(lines) + "\n"


def _probe_images(cfg: RunConfig, paths: list[str]) -> list[tuple[str, np.ndarray]]:
    bb = cfg.backbone()
    if paths:
        return [(Path(p).stem, load_image(p, bb.input_size, bb.in_channels)) for p in paths]
    try:
        manifest = load_manifest(cfg.manifest_path).split("test")
    except DataError:
        manifest = None
    if manifest is not None and len(manifest):
        picks = []
        for label in ("live", "pa"):
            rec = next((r for r in manifest.records if r.label == label), None)
            if rec is not None:
                picks.append((Path(rec.path).stem, load_image(manifest.resolve(rec), bb.input_size, bb.in_channels)))
        return picks
    rng = np.random.default_rng([cfg["seed"], 9])
    img = render_iris(rng, bb.input_size).astype(np.float32)[None]
    return [("probe_live", np.repeat(img, bb.in_channels, axis=0))]


def cmd_gradcam(cfg: RunConfig, args) -> int:
    model = _build_model(cfg).load(_checkpoint(cfg, args))
    out_dir = cfg.out / "gradcam"
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = ("tap5", "attended")
    for stem, image in _probe_images(cfg, args.images):
        for layer, tag in zip(layers, ("pre", "post")):
            hm = grad_cam(model, image, layer, target=cfg["gradcam.target"])
            save_tensor(out_dir / f"{stem}_{tag}_{layer}.agtd", hm.values.astype(np.float32))
            save_image(out_dir / f"{stem}_{tag}_{layer}.png", hm.values)
            save_image(out_dir / f"{stem}_{tag}_{layer}_overlay.png",
                       upsample_overlay(hm, image, cfg["gradcam.opacity"]).transpose(2, 0, 1))
        print(f"{stem}: PA score {model.pa_score(image):.4f}")
    print(f"heatmaps written to {out_dir}")
    return EXIT_OK


def cmd_inspect(cfg: RunConfig, args) -> int:
    model = _build_model(cfg).load(_checkpoint(cfg, args))
    out_dir = cfg.out / "inspect"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [(name, "x".join(map(str, p.shape)), p.size) for name, p in model.parameters().items()]
    width = max(len(r[0]) for r in rows)
    with open(out_dir / "parameters.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "shape", "count"])
        w.writerows(rows)
    for name, shape, count in rows:
        print(f"{name.ljust(width)}  {shape:>14}  {count:>8}")
    print(f"{'total'.ljust(width)}  {'':>14}  {model.num_parameters():>8}")

    stem, image = _probe_images(cfg, args.images)[0]
    with no_grad():
        feats = model.features(Tensor(image[None].astype(model.dtype)))
        maps = {k: v for k, v in feats.items() if k.endswith("_map")}
        att = model.attention
        norm = model.fusion.normalize
        if att.hier is not None:
            maps["pam_map3"] = pam_attention_map(feats["tap3"], att.hier.pam3, norm)
            maps["pam_map4"] = pam_attention_map(feats["tap4"], att.hier.pam4, norm)
            maps["cam_map5"] = cam_attention_map(feats["tap5"], norm)
    for key, value in sorted(maps.items()):
        path = out_dir / f"{stem}_{key}.agtd"
        save_tensor(path, value.data[0])
        print(f"{key}: {value.shape[1:]} -> {path}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcam": cmd_gradcam,
    "inspect": cmd_inspect,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agpad", description="Attention-guided presentation attack detection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=sorted(VARIANTS), help="attention variant (sets model.fusion)")
        p.add_argument("--checkpoint", help="AGPD checkpoint (default <out>/model.agpd)")
        p.add_argument("--fdr-targets", help="comma-separated FDR targets, e.g. 0.001,0.002,0.01")
        p.add_argument("--threshold", type=float, help="APCER/BPCER decision threshold")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        if name in ("gradcam", "inspect"):
            p.add_argument("images", nargs="*", help="image files (default: one live and one PA test image)")
        else:
            p.set_defaults(images=[])
    return parser


def resolve_config(args) -> RunConfig:
    layers = []
    config_path = args.config
    if config_path is None and args.checkpoint:
        beside = Path(args.checkpoint).parent / "run_config.txt"
        if beside.is_file():
            config_path = beside
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        layers.append(parse_config_text(path.read_text(), str(path)))
    flags: dict[str, str] = {}
    if args.out is not None:
        flags["out"] = args.out
    if args.seed is not None:
        flags["seed"] = str(args.seed)
    if args.variant is not None:
        flags["model.fusion"] = VARIANTS[args.variant]
    if args.fdr_targets is not None:
        flags["eval.fdr_targets"] = args.fdr_targets
    if args.threshold is not None:
        flags["eval.threshold"] = str(args.threshold)
    overrides = parse_config_text("\n".join(args.set), "--set")
    return RunConfig.resolve(*layers, flags, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.write()
        # non-finite values surface as NumericError; numpy's own warnings add nothing
        with np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"agpad: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, DimensionError) as exc:
        print(f"agpad: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"agpad: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"agpad: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
