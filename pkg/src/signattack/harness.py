"""Experiment orchestration behind the command-line verbs.

An experiment is described by a flat ``key = value`` file with sections::

    [experiment]
    seed = 7
    reject_threshold = 0.25

    [data]
    source = synthetic        ; or: directory
    num_classes = 8
    per_class = 200
    resolution = 32

    [model]
    conv_blocks = 16x3, 32x3, 64x3
    dense_width = 128

    [train]
    epochs = 20

    [attack FGSM]
    epsilon = 8/255

    [sweep]
    attacks = FGSM, PGD
    epsilons = 0, 2/255, 4/255, 8/255, 16/255

Numbers may be written as fractions (``8/255``). Every command writes into a
staging directory next to the output directory and moves the files into
place only once the whole command has succeeded.
"""

from __future__ import annotations

import configparser
import contextlib
import csv
import io
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attacks as atk
from .data import (
    DatasetSplit,
    load_dataset,
    resize_stretch,
    stack,
    synth_class_names,
    synth_signs,
)
from .gradcam import explanation_triptych, gradcam
from .images import read_ppm, write_ppm
from .model import (
    DEFAULT_REJECT_THRESHOLD,
    Model,
    ModelConfig,
    TrainConfig,
    evaluate,
    load_weights,
    predict,
    predict_batch,
    save_weights,
    train,
)

WEIGHTS_NAME = "model.sgn"
ATTACK_TITLES = {
    "LBFGS": "L-BFGS",
    "FGSM": "FGSM",
    "CW": "C&W",
    "BIM": "BIM",
    "PGD": "PGD",
    "ONEPIXEL": "OPA",
    "UAP": "UAP",
}
REPORT_COLUMNS = (
    "S.No.",
    "Attack Name",
    "Model Prediction",
    "Prediction Label before Attack",
    "Prediction Score before Attack",
    "Explanation Before Attack",
    "Model Prediction After Attack",
    "Prediction Score After Attack",
    "Prediction Label After Attack",
    "Explanation After Attack",
)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration


def parse_number(text: str) -> float:
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number: {text!r}") from None


def parse_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def parse_blocks(text: str) -> tuple[tuple[int, int], ...]:
    blocks = []
    for item in parse_list(text):
        try:
            f, k = item.lower().split("x")
            blocks.append((int(f), int(k)))
        except ValueError:
            raise ConfigError(f"conv block {item!r} must look like FILTERSxKERNEL") from None
    return tuple(blocks)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        if v and isinstance(v[0], (tuple, list)):
            return ", ".join(f"{a}x{b}" for a, b in v)
        return ", ".join(_fmt(x) for x in v)
    return str(v)


@dataclass
class DataSettings:
    source: str = "synthetic"
    num_classes: int = 8
    per_class: int = 200
    resolution: int = 32
    images_dir: str = ""
    labels_dir: str = ""
    classes_file: str = ""


@dataclass
class ExplainSettings:
    layer: str = ""
    region_threshold: float = 0.6
    blend: float = 0.5


@dataclass
class SweepSettings:
    attacks: tuple[str, ...] = ("FGSM",)
    epsilons: tuple[float, ...] = (0.0, 2 / 255, 4 / 255, 8 / 255, 16 / 255)
    slice: int = 200
    iterations: int = 40


@dataclass
class ExperimentConfig:
    seed: int = 0
    reject_threshold: float = DEFAULT_REJECT_THRESHOLD
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(num_classes=8))
    train: TrainConfig = field(default_factory=TrainConfig)
    explain: ExplainSettings = field(default_factory=ExplainSettings)
    attacks: list[atk.AttackConfig] = field(default_factory=list)
    image_indices: list[int | None] = field(default_factory=list)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def with_seed(self, seed: int) -> "ExperimentConfig":
        self.seed = seed
        self.train.seed = seed
        for a in self.attacks:
            a.seed = seed
        return self

    def to_text(self) -> str:
        """Serialize back to the ``key = value`` format."""
        lines = ["[experiment]", f"seed = {self.seed}",
                 f"reject_threshold = {_fmt(self.reject_threshold)}", ""]
        for title, obj, skip in (
            ("data", self.data, ()),
            ("model", self.model, ("num_classes", "input_resolution", "channels")),
            ("train", self.train, ("seed",)),
            ("explain", self.explain, ()),
        ):
            lines.append(f"[{title}]")
            for f in fields(obj):
                if f.name not in skip:
                    lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
            lines.append("")
        defaults = {f.name: f.default for f in fields(atk.AttackConfig)}
        for a, index in zip(self.attacks, self.image_indices):
            lines.append(f"[attack {a.kind}]")
            for f in fields(a):
                v = getattr(a, f.name)
                if f.name in ("kind", "norm", "seed") or v == defaults.get(f.name):
                    continue
                lines.append(f"{f.name} = {_fmt(v)}")
            if index is not None:
                lines.append(f"image_index = {index}")
            lines.append("")
        lines.append("[sweep]")
        for f in fields(self.sweep):
            lines.append(f"{f.name} = {_fmt(getattr(self.sweep, f.name))}")
        return "\n".join(lines) + "\n"


_ATTACK_TYPES = {f.name: f.type for f in fields(atk.AttackConfig)}


def _convert(section: str, key: str, raw: str, kind: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return parse_number(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError
            return low in ("true", "yes", "1", "on")
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {kind}, got {raw!r}") from None
    return raw.strip()


_SCALARS = {
    "data": {"source": "str", "num_classes": "int", "per_class": "int", "resolution": "int",
             "images_dir": "str", "labels_dir": "str", "classes_file": "str"},
    "model": {"dense_width": "int", "leaky_slope": "float"},
    "train": {"epochs": "int", "learning_rate": "float", "weight_decay": "float",
              "batch_size": "int"},
    "explain": {"layer": "str", "region_threshold": "float", "blend": "float"},
    "sweep": {"slice": "int", "iterations": "int"},
}
_ATTACK_KEYS = {
    "epsilon": "float", "alpha": "float", "iterations": "int", "targeted": "bool",
    "target_label": "int", "random_start": "bool", "kappa": "float",
    "binary_search_steps": "int", "cw_iters": "int", "lr": "float", "memory": "int",
    "max_iters": "int", "popsize": "int", "de_iters": "int", "F": "float", "CR": "float",
}


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"),
                                       interpolation=None)
    parser.optionxform = str  # keep F / CR case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig(base_dir=base_dir or Path.cwd())
    model_kw: dict = {}
    train_kw: dict = {}
    for section in parser.sections():
        items = dict(parser.items(section))
        name = section.strip()
        if name == "experiment":
            for key, raw in items.items():
                if key == "seed":
                    cfg.seed = _convert(name, key, raw, "int")
                elif key == "reject_threshold":
                    cfg.reject_threshold = _convert(name, key, raw, "float")
                else:
                    raise ConfigError(f"[experiment] unknown key {key!r}")
        elif name in ("data", "explain"):
            target = cfg.data if name == "data" else cfg.explain
            for key, raw in items.items():
                if key not in _SCALARS[name]:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
                setattr(target, key, _convert(name, key, raw, _SCALARS[name][key]))
        elif name == "model":
            for key, raw in items.items():
                if key == "conv_blocks":
                    model_kw[key] = parse_blocks(raw)
                elif key in _SCALARS["model"]:
                    model_kw[key] = _convert(name, key, raw, _SCALARS["model"][key])
                else:
                    raise ConfigError(f"[model] unknown key {key!r}")
        elif name == "train":
            for key, raw in items.items():
                if key not in _SCALARS["train"]:
                    raise ConfigError(f"[train] unknown key {key!r}")
                train_kw[key] = _convert(name, key, raw, _SCALARS["train"][key])
        elif name == "sweep":
            for key, raw in items.items():
                if key == "attacks":
                    cfg.sweep.attacks = tuple(a.upper() for a in parse_list(raw))
                elif key == "epsilons":
                    cfg.sweep.epsilons = tuple(parse_number(e) for e in parse_list(raw))
                elif key in _SCALARS["sweep"]:
                    setattr(cfg.sweep, key, _convert(name, key, raw, _SCALARS["sweep"][key]))
                else:
                    raise ConfigError(f"[sweep] unknown key {key!r}")
            for a in cfg.sweep.attacks:
                if a not in atk.SWEEP_KINDS:
                    raise ConfigError(
                        f"[sweep] cannot sweep {a!r}; valid kinds: {', '.join(atk.SWEEP_KINDS)}"
                    )
        elif name.lower().startswith("attack"):
            kind = name[len("attack"):].strip().upper()
            if kind not in atk.KINDS:
                raise ConfigError(
                    f"unknown attack {kind!r}; valid kinds: {', '.join(atk.KINDS)}"
                )
            kw: dict = {}
            index = None
            for key, raw in items.items():
                if key == "image_index":
                    index = _convert(name, key, raw, "int")
                elif key == "c_grid":
                    kw[key] = tuple(parse_number(c) for c in parse_list(raw))
                elif key in _ATTACK_KEYS:
                    kw[key] = _convert(name, key, raw, _ATTACK_KEYS[key])
                else:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
            try:
                cfg.attacks.append(atk.AttackConfig(kind, **kw))
            except ValueError as exc:
                raise ConfigError(f"[{name}] {exc}") from None
            cfg.image_indices.append(index)
        else:
            raise ConfigError(f"unknown section [{name}]")
    try:
        cfg.model = ModelConfig(input_resolution=cfg.data.resolution,
                                num_classes=cfg.data.num_classes, **model_kw)
        cfg.train = TrainConfig(seed=cfg.seed, **train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for a in cfg.attacks:
        a.seed = cfg.seed
    if cfg.data.source not in ("synthetic", "directory"):
        raise ConfigError("[data] source must be 'synthetic' or 'directory'")
    return cfg


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent.resolve())


def class_names(cfg: ExperimentConfig) -> list[str]:
    d = cfg.data
    if d.source == "synthetic":
        return synth_class_names(d.num_classes)
    if d.classes_file:
        names = [ln.strip() for ln in cfg.resolve(d.classes_file).read_text().splitlines()
                 if ln.strip()]
        if len(names) != d.num_classes:
            raise ConfigError(f"{d.classes_file} lists {len(names)} names, "
                              f"expected {d.num_classes}")
        return names
    return [f"class_{i}" for i in range(d.num_classes)]


def build_dataset(cfg: ExperimentConfig) -> DatasetSplit:
    d = cfg.data
    if d.source == "synthetic":
        return synth_signs(d.num_classes, d.per_class, d.resolution, cfg.seed)
    return load_dataset(cfg.resolve(d.images_dir), cfg.resolve(d.labels_dir),
                        d.num_classes, cfg.seed, d.resolution, class_names(cfg))


# ---------------------------------------------------------------------------
# Output staging


def ensure_writable(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK | os.X_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")


@contextlib.contextmanager
def staged_output(out_dir: str | os.PathLike):
    """Yield a staging directory; on success move its contents into
    ``out_dir`` (file by file with ``os.replace``), on failure discard it."""
    out_dir = Path(out_dir)
    ensure_writable(out_dir)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    try:
        yield stage
        for src in sorted(stage.rglob("*")):
            if src.is_file():
                dst = out_dir / src.relative_to(stage)
                dst.parent.mkdir(parents=True, exist_ok=True)
                os.replace(src, dst)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_confusion(path: Path, confusion: np.ndarray) -> None:
    """Bare count matrix: row i = true class i, column j = predicted class j."""
    path.write_text("".join(",".join(str(int(v)) for v in row) + "\n" for row in confusion),
                    encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands


def weights_path(out_dir: Path, weights: str | os.PathLike | None) -> Path:
    return Path(weights) if weights else Path(out_dir) / WEIGHTS_NAME


def cmd_train(cfg: ExperimentConfig, out_dir, weights=None) -> Model:
    """Train, then write weights, metrics.csv and the test-split confusion.csv."""
    out_dir = Path(out_dir)
    target = weights_path(out_dir, weights)
    ensure_writable(out_dir)
    ensure_writable(target.parent)
    data = build_dataset(cfg)
    model, history = train(cfg.model, data, cfg.train)
    with staged_output(out_dir) as stage:
        _write_csv(stage / "metrics.csv", ("epoch", "train_loss", "val_accuracy"),
                   [(h.epoch, repr(h.train_loss), repr(h.val_accuracy)) for h in history])
        _, confusion = evaluate(model, data.test)
        write_confusion(stage / "confusion.csv", confusion)
        if target.parent.resolve() == out_dir.resolve():
            save_weights(model, stage / target.name)
    if target.parent.resolve() != out_dir.resolve():
        tmp = target.with_name(target.name + ".tmp")
        save_weights(model, tmp)
        os.replace(tmp, target)
    return model


def cmd_eval(cfg: ExperimentConfig, out_dir, weights=None) -> float:
    model = load_weights(weights_path(Path(out_dir), weights))
    data = build_dataset(cfg)
    accuracy, confusion = evaluate(model, data.test)
    with staged_output(out_dir) as stage:
        write_confusion(stage / "confusion.csv", confusion)
    print(f"test accuracy {accuracy:.4f} ({int(np.trace(confusion))}/{int(confusion.sum())})")
    return accuracy


def percent(score: float) -> str:
    return f"{math.floor(score * 100 + 0.5)}%"


def noise_image(perturbation: np.ndarray) -> np.ndarray:
    """Mid-grey centred view of a perturbation: 0.5 + p / (2 max|p|)."""
    peak = float(np.max(np.abs(perturbation))) if perturbation.size else 0.0
    if peak == 0:
        return np.full(perturbation.shape, 0.5)
    return 0.5 + perturbation / (2.0 * peak)


@dataclass
class ReportRow:
    serial: int
    attack: str
    true_label: str
    before_label: str
    before_score: float
    after_label: str  # "NA" when not recognized
    after_score: float | None
    after_confidence: float  # top post-attack probability, recognized or not
    success: bool
    l0: int
    l2: float
    linf: float
    iterations: int
    images: dict[str, str]

    @classmethod
    def from_result(cls, serial: int, result: atk.AttackResult, true_label: int,
                    names: list[str], images: dict[str, str]) -> "ReportRow":
        after = result.after
        return cls(
            serial, ATTACK_TITLES[result.kind], names[true_label], names[result.before.label],
            result.before.score,
            names[after.label] if after.recognized else "NA",
            after.score if after.recognized else None, after.score,
            result.success, result.l0, result.l2, result.linf, result.iterations_used, images,
        )

    def markdown_cells(self) -> list[str]:
        na = self.after_score is None
        return [
            str(self.serial), self.attack, self.images["orig"], self.before_label,
            percent(self.before_score), self.images["cam_before"], self.images["adv"],
            "NA" if na else percent(self.after_score), "NA" if na else self.after_label,
            self.images["cam_after"],
        ]

    def csv_cells(self) -> list:
        na = self.after_score is None
        return [
            self.serial, self.attack, self.true_label, self.before_label,
            repr(self.before_score), "NA" if na else self.after_label,
            "NA" if na else repr(self.after_score), repr(self.after_confidence),
            str(self.success).lower(),
            self.l0, repr(self.l2), repr(self.linf), self.iterations,
            self.images["orig"], self.images["noise"], self.images["adv"],
            self.images["cam_before"], self.images["cam_after"],
        ]


CSV_COLUMNS = (
    "serial", "attack", "true_label", "before_label", "before_score", "after_label",
    "after_score", "after_confidence", "success", "l0", "l2", "linf", "iterations",
    "orig", "noise", "adv", "cam_before", "cam_after",
)


def render_markdown(rows: list[ReportRow], seed: int | None = None,
                    reject_threshold: float | None = None) -> str:
    def cell(text: str) -> str:
        return text.replace("|", "\\|")

    lines = [
        "| " + " | ".join(REPORT_COLUMNS) + " |",
        "|" + "|".join("---" for _ in REPORT_COLUMNS) + "|",
    ]
    for r in rows:
        lines.append("| " + " | ".join(map(cell, r.markdown_cells())) + " |")
    if seed is not None:
        lines += ["", f"NA: top-class probability below {reject_threshold!r}. "
                      f"Split and attack seed: {seed}."]
    return "\n".join(lines) + "\n"


def recognized_test_images(model: Model, data: DatasetSplit,
                           reject: float) -> list[tuple[np.ndarray, int]]:
    """Test examples the clean model labels correctly and recognizes."""
    if not data.test:
        return []
    images, labels = stack(data.test)
    preds = predict_batch(model, images, reject)
    return [(images[i], int(labels[i])) for i, p in enumerate(preds)
            if p.recognized and p.label == labels[i]]


def explain_image(model: Model, image: np.ndarray, target_class: int,
                  settings: ExplainSettings) -> np.ndarray:
    cam = gradcam(model, image, target_class, settings.layer or None)
    return explanation_triptych(image, cam, settings.region_threshold, settings.blend)


def cmd_attack(cfg: ExperimentConfig, out_dir, weights=None) -> list[ReportRow]:
    """One report row per configured attack, plus image artifacts."""
    if not cfg.attacks:
        raise ConfigError("no [attack KIND] sections in the config")
    out_dir = Path(out_dir)
    model = load_weights(weights_path(out_dir, weights))
    data = build_dataset(cfg)
    names = data.class_names
    reject = cfg.reject_threshold
    pool = recognized_test_images(model, data, reject)
    if not pool:
        raise RuntimeError("no correctly classified test images to attack")

    rows = []
    with staged_output(out_dir) as stage:
        (stage / "img").mkdir()
        for serial, (acfg, index) in enumerate(zip(cfg.attacks, cfg.image_indices), start=1):
            image, label = pool[(serial - 1 if index is None else index) % len(pool)]
            universal = None
            if acfg.kind == "UAP":
                tx, ty = stack(data.train)
                vx = stack(data.val)[0] if data.val else None
                universal = atk.uap(model, tx, ty, acfg.epsilon, vx, reject)
            result = atk.run_attack(model, image, label, acfg, reject, universal)
            after_class = result.after.label if result.after.recognized else result.before.label
            panels = {
                "orig": image,
                "noise": noise_image(result.perturbation),
                "adv": result.adversarial_image,
                "cam_before": explain_image(model, image, result.before.label, cfg.explain),
                "cam_after": explain_image(model, result.adversarial_image, after_class,
                                           cfg.explain),
            }
            paths = {}
            for key, img in panels.items():
                rel = f"img/{serial:03d}_{key}.ppm"
                write_ppm(stage / rel, img)
                paths[key] = rel
            rows.append(ReportRow.from_result(serial, result, label, names, paths))
        (stage / "report.md").write_text(render_markdown(rows, cfg.seed, reject),
                                          encoding="utf-8")
        _write_csv(stage / "report.csv", CSV_COLUMNS, [r.csv_cells() for r in rows])
    return rows


def cmd_sweep(cfg: ExperimentConfig, out_dir, weights=None) -> list[tuple[str, float, float]]:
    """Success rate per (attack, epsilon) on the first ``slice`` test images."""
    out_dir = Path(out_dir)
    model = load_weights(weights_path(out_dir, weights))
    data = build_dataset(cfg)
    images, labels = stack(data.test[:cfg.sweep.slice])
    train_x, train_y = stack(data.train)
    eps = sorted(set(cfg.sweep.epsilons))
    table = []
    for kind in sorted(set(cfg.sweep.attacks)):
        points = atk.epsilon_sweep(model, kind, images, labels, eps, cfg.seed,
                                   cfg.sweep.iterations, train_x, train_y,
                                   cfg.reject_threshold)
        table += [(kind, p.epsilon, p.success_rate) for p in points]
    with staged_output(out_dir) as stage:
        _write_csv(stage / "sweep.csv", ("attack", "epsilon", "success_rate"),
                   [(k, repr(e), repr(r)) for k, e, r in table])
    for kind in sorted(set(cfg.sweep.attacks)):
        rates = [r for k, _, r in table if k == kind]
        print(f"{kind}: success rate min {min(rates):.3f} max {max(rates):.3f}")
    return table


def cmd_explain(weights, image_path, out_path, target_class: int | None = None,
                layer: str | None = None, cfg: ExperimentConfig | None = None) -> str:
    """Write the triptych for one image and return the ``LABEL SCORE%`` line."""
    model = load_weights(weights)
    settings = cfg.explain if cfg is not None else ExplainSettings()
    if layer:
        settings = ExplainSettings(layer, settings.region_threshold, settings.blend)
    if settings.layer and settings.layer not in model.conv_layer_names:
        raise ValueError(
            f"layer {settings.layer!r} is not a conv layer; valid: "
            f"{', '.join(model.conv_layer_names)}"
        )
    image = read_ppm(image_path)
    if image.shape[:2] != (model.resolution, model.resolution):
        image = resize_stretch(image, model.resolution)
    reject = cfg.reject_threshold if cfg is not None else DEFAULT_REJECT_THRESHOLD
    pred = predict(model, image, reject)
    cls = pred.label if target_class is None else target_class
    panel = explain_image(model, image, cls, settings)
    out_path = Path(out_path)
    ensure_writable(out_path.parent)
    tmp = out_path.with_name(out_path.name + ".tmp")
    write_ppm(tmp, panel)
    os.replace(tmp, out_path)
    names = class_names(cfg) if cfg is not None else []
    label = names[pred.label] if pred.label < len(names) else f"class_{pred.label}"
    return f"{label} {percent(pred.score)}"
