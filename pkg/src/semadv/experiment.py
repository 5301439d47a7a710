"""Config-driven experiment runs, transfer matrices, defense sweeps and reports.

A run directory looks like::

    <output>/
        config.yaml          resolved configuration
        runs.csv             one row per attacked image
        records/<id>.json    full record per image
        images/<id>_orig.png, images/<id>_adv.png
        defenses.json, table3.csv   (when defenses are configured)
        transfer.csv                (when transfer models are configured)
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .cadv import CadvConfig, cadv_attack
from .defenses import DefenseReport, DefenseSpec, bim_attack, evaluate_defended, write_defense_table
from .imaging import NormReport, load_image, lp_metrics, quantize, save_png
from .models import classify, load_model, registered_tags
from .models.toy import toy_dataset
from .results import AttackAborted, AttackResult
from .tadv import TadvConfig, TextureBank, tadv_attack

logger = logging.getLogger(__name__)

ATTACKS = ("cadv", "tadv", "bim")


class ConfigError(ValueError):
    pass


@dataclass
class DataSlice:
    """``source`` is ``toy`` or a directory holding images plus ``index.csv``.

    ``per_class=None`` keeps every indexed image of the chosen classes.
    """

    source: str = "toy"
    classes: list[int] | None = None
    per_class: int | None = 2
    seed: int = 0
    size: tuple[int, int] | None = None

    def load(self):
        """Returns ``(images, labels, names)``."""
        if self.per_class is not None and self.per_class < 0:
            raise ConfigError("per_class must be non-negative")
        if self.source == "toy":
            n_classes = 10 if self.classes is None else max(self.classes) + 1
            images, labels = toy_dataset(max(self.per_class or 1, 1), n_classes, seed=self.seed)
            names = [f"toy{self.seed}-{i:03d}" for i in range(len(images))]
            entries = list(zip(images, labels, names))
        else:
            root = Path(self.source)
            index = root / "index.csv"
            if not index.exists():
                raise ConfigError(f"dataset index not found: {index}")
            with index.open(newline="") as fh:
                rows = [(r["file"], int(r["label"])) for r in csv.DictReader(fh)]
            entries = [(root / f, y, Path(f).stem) for f, y in rows]
        classes = sorted({e[1] for e in entries}) if self.classes is None else list(self.classes)
        rng = np.random.default_rng(self.seed)
        chosen = []
        for c in classes:
            pool = [e for e in entries if e[1] == c]
            if self.per_class is None:
                chosen += pool
                continue
            if len(pool) < self.per_class:
                raise ConfigError(f"class {c} has {len(pool)} images, {self.per_class} requested")
            picks = sorted(rng.choice(len(pool), size=self.per_class, replace=False)) if pool else []
            chosen += [pool[i] for i in picks]
        images = [e[0] if isinstance(e[0], np.ndarray) else load_image(e[0], self.size) for e in chosen]
        return images, [e[1] for e in chosen], [e[2] for e in chosen]


@dataclass
class ExperimentConfig:
    attack: str
    victim: str
    params: dict = field(default_factory=dict)
    data: DataSlice = field(default_factory=DataSlice)
    bank: DataSlice | None = None
    colorizer: str = "toy-colorizer"
    extractor: str = "toy-extractor"
    transfer: list[str] = field(default_factory=list)
    defenses: list[DefenseSpec] = field(default_factory=list)
    output: str = "runs/experiment"
    seed: int = 0
    weights: str | None = None

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}; expected one of {ATTACKS}")
        if isinstance(self.data, dict):
            self.data = _slice(self.data)
        if isinstance(self.bank, dict):
            self.bank = _slice(self.bank)
        self.defenses = [d if isinstance(d, DefenseSpec) else _defense(d) for d in self.defenses]
        known = set(registered_tags())
        tags = [self.victim] + list(self.transfer)
        tags += [d.params["model"] for d in self.defenses if d.kind == "robust_model"]
        if self.attack == "cadv":
            tags.append(self.colorizer)
        if self.attack == "tadv":
            tags.append(self.extractor)
        missing = [t for t in tags if t not in known]
        if missing:
            raise ConfigError(f"unknown model tags {missing}")
        try:
            self.attack_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad {self.attack} parameters: {exc}") from exc

    def attack_config(self):
        if self.attack == "cadv":
            return CadvConfig(**{"seed": self.seed, **self.params})
        if self.attack == "tadv":
            return TadvConfig(**{"seed": self.seed, **self.params})
        allowed = {"eps", "step", "iters"}
        extra = set(self.params) - allowed
        if extra:
            raise TypeError(f"unexpected BIM parameters {sorted(extra)}")
        return dict(self.params)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(raw) - names
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for d in out["defenses"]:
            if "window" in d["params"]:
                d["params"]["window"] = list(d["params"]["window"])
        return out


def _slice(raw: dict) -> DataSlice:
    try:
        s = DataSlice(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad data slice: {exc}") from exc
    if s.size is not None:
        s.size = tuple(s.size)
    return s


def _defense(raw: dict) -> DefenseSpec:
    raw = dict(raw)
    try:
        kind = raw.pop("kind")
    except KeyError:
        raise ConfigError("defense entries need a 'kind'") from None
    try:
        return DefenseSpec(kind, raw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def assign_targets(labels: Sequence[int], classes: Sequence[int], seed: int) -> list[int]:
    """Round-robin over the other classes of the slice, from a seeded offset."""
    classes = sorted(set(classes))
    n = len(classes)
    if n < 2:
        raise ConfigError("targeted attacks need at least two classes")
    start = int(np.random.default_rng(seed).integers(n - 1))
    pos = {c: i for i, c in enumerate(classes)}
    return [classes[(pos[y] + 1 + (start + i) % (n - 1)) % n] for i, y in enumerate(labels)]


# records --------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items() if not isinstance(v, np.ndarray)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_record(result: AttackResult, out: Path, rid: str, classifier, model_tag: str) -> dict:
    """Persist both images as PNG and a JSON record describing the stored pair."""
    orig_q, adv_q = quantize(result.original), quantize(result.adversarial)
    orig_path = save_png(orig_q, out / "images" / f"{rid}_orig.png")
    adv_path = save_png(adv_q, out / "images" / f"{rid}_adv.png")
    _, pred = classify(classifier, adv_q)
    record = {
        "id": rid,
        "method": result.method,
        "model": model_tag,
        "label": result.label,
        "target": result.target,
        "prediction": pred,
        "success": pred == result.target,
        "success_float": bool(result.success),
        "confidence": result.confidence,
        "norms": lp_metrics(orig_q, adv_q).as_dict(),
        "norms_float": result.norms.as_dict(),
        "iterations": result.iterations,
        "trace": result.trace,
        "info": result.info,
        "wall_clock": result.wall_clock,
        "original": orig_path.name,
        "adversarial": adv_path.name,
    }
    record = _jsonable(record)
    (out / "records").mkdir(parents=True, exist_ok=True)
    (out / "records" / f"{rid}.json").write_text(json.dumps(record, indent=1, sort_keys=True))
    return record


def load_records(run_dir) -> list[dict]:
    """Records of a run directory, each with ``original``/``adversarial`` images loaded."""
    run_dir = Path(run_dir)
    out = []
    for path in sorted((run_dir / "records").glob("*.json")):
        try:
            rec = json.loads(path.read_text())
            rec["original_image"] = load_image(run_dir / "images" / rec["original"])
            rec["adversarial_image"] = load_image(run_dir / "images" / rec["adversarial"])
        except (OSError, ValueError, KeyError) as exc:
            logger.warning("skipping corrupt record %s: %s", path, exc)
            continue
        out.append(rec)
    return out


def record_to_result(rec: dict) -> AttackResult:
    return AttackResult(
        method=rec["method"], original=rec["original_image"], adversarial=rec["adversarial_image"],
        target=rec["target"], success=rec["success"], confidence=rec["confidence"],
        norms=NormReport(**rec["norms"]), label=rec["label"], iterations=rec.get("iterations", 0),
    )


@dataclass
class ExperimentReport:
    output: Path
    records: list[dict]
    failures: list[dict]
    defenses: list[DefenseReport] = field(default_factory=list)
    transfer: "TransferMatrix | None" = None

    @property
    def success_rate(self) -> float:
        if not self.records:
            return 0.0
        return 100.0 * sum(r["success"] for r in self.records) / len(self.records)


_RUN_COLUMNS = ("id", "method", "model", "label", "target", "prediction", "success",
                "confidence", "l0", "l2", "linf", "iterations")


def _write_runs_csv(records, path):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_RUN_COLUMNS)
        for r in records:
            writer.writerow([r["id"], r["method"], r["model"], r["label"], r["target"], r["prediction"],
                             int(r["success"]), f"{r['confidence']:.6f}", f"{r['norms']['l0']:.6f}",
                             f"{r['norms']['l2']:.6f}", f"{r['norms']['linf']:.6f}", r["iterations"]])


def _run_one(cfg, acfg, img, label, target, models):
    victim = models["victim"]
    if cfg.attack == "cadv":
        return cadv_attack(victim, models["colorizer"], img, target, acfg, label=label)
    if cfg.attack == "tadv":
        return tadv_attack(victim, models["extractor"], img, target, models["bank"], acfg, label=label)
    return bim_attack(victim, img, target, label=label, **acfg)


def run_experiment(cfg: ExperimentConfig, models: dict | None = None) -> ExperimentReport:
    """Attack every image of the slice and persist records under ``cfg.output``.

    ``models`` may pre-supply loaded adapters keyed by tag to avoid reloading.
    """
    models = dict(models or {})

    def get(tag):
        if tag not in models:
            models[tag] = load_model(tag, cfg.weights)
        return models[tag]

    out = Path(cfg.output)
    images, labels, names = cfg.data.load()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    if not images:
        logger.warning("data slice is empty; nothing to attack")
        _write_runs_csv([], out / "runs.csv")
        return ExperimentReport(out, [], [])

    acfg = cfg.attack_config()
    classes = cfg.data.classes if cfg.data.classes is not None else sorted(set(labels))
    targets = assign_targets(labels, classes, cfg.seed)
    victim = get(cfg.victim)
    ctx = {"victim": victim}
    if cfg.attack == "cadv":
        ctx["colorizer"] = get(cfg.colorizer)
    elif cfg.attack == "tadv":
        ctx["extractor"] = get(cfg.extractor)
        bank_slice = cfg.bank or DataSlice(seed=cfg.data.seed + 1)
        bank_images, bank_labels, bank_names = bank_slice.load()
        root = None if bank_slice.source == "toy" else Path(bank_slice.source)
        ctx["bank"] = TextureBank(bank_images, bank_labels, root, bank_names)

    records, failures, results = [], [], []
    for i, (img, label, name, target) in enumerate(zip(images, labels, names, targets)):
        rid = f"{i:04d}_{name}"
        _, pred = classify(victim, img)
        if pred != label:
            logger.info("%s is misclassified before the attack (%d vs %d)", rid, pred, label)
        try:
            result = _run_one(cfg, acfg, img, label, target, ctx)
        except (AttackAborted, ValueError) as exc:
            logger.warning("attack on %s failed: %s", rid, exc)
            failures.append({"id": rid, "error": str(exc)})
            continue
        rec = write_record(result, out, rid, victim, cfg.victim)
        rec["clean_prediction"] = pred
        records.append(rec)
        results.append(record_to_result({**rec, "original_image": quantize(result.original),
                                         "adversarial_image": quantize(result.adversarial)}))
        logger.info("%s: target %d success %s confidence %.3f", rid, target, rec["success"],
                    rec["confidence"])
    _write_runs_csv(records, out / "runs.csv")
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=1))
    report = ExperimentReport(out, records, failures)

    if results and cfg.defenses:
        report.defenses = defend(results, cfg.defenses, victim, get)
        write_defense_reports(report.defenses, out)
    if results and cfg.transfer:
        tags = [cfg.victim] + [t for t in cfg.transfer if t != cfg.victim]
        report.transfer = transfer_matrix({cfg.victim: results}, {t: get(t) for t in tags})
        report.transfer.write_csv(out / "transfer.csv")
    return report


def defend(results, specs, classifier, get_model) -> list[DefenseReport]:
    reports = []
    for spec in specs:
        robust = get_model(spec.params["model"]) if spec.kind == "robust_model" else None
        reports.append(evaluate_defended(results, spec, classifier, robust=robust))
    return reports


def write_defense_reports(reports, out: Path):
    (out / "defenses.json").write_text(json.dumps([dataclasses.asdict(r) for r in reports], indent=1))
    write_defense_table(reports, out / "table3.csv")


# transfer --------------------------------------------------------------------------


@dataclass
class TransferMatrix:
    """``cells[i][j]``: % of images attacked on ``sources[i]`` that ``targets[j]`` labels as the target."""

    sources: list[str]
    targets: list[str]
    cells: np.ndarray

    def cell(self, src: str, dst: str) -> float:
        return float(self.cells[self.sources.index(src), self.targets.index(dst)])

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["attacked_on"] + self.targets)
            for src, row in zip(self.sources, self.cells):
                writer.writerow([src] + [f"{v:.2f}" for v in row])


def transfer_matrix(batches: dict[str, Sequence[AttackResult]], models: dict) -> TransferMatrix:
    """Reclassify every batch on every model.

    A batch's own model is always evaluated too, so the diagonal equals its
    whitebox success.
    """
    targets = list(models)
    for src in batches:
        if src not in models:
            raise ValueError(f"batch attacked on {src!r} but that model was not supplied")
    cells = np.zeros((len(batches), len(targets)))
    for i, (src, batch) in enumerate(batches.items()):
        if not batch:
            raise ValueError(f"empty batch for model {src!r}")
        for j, dst in enumerate(targets):
            hits = sum(classify(models[dst], r.adversarial)[1] == r.target for r in batch)
            cells[i, j] = 100.0 * hits / len(batch)
    return TransferMatrix(list(batches), targets, cells)


# report ----------------------------------------------------------------------------


def perturbation_image(orig, adv) -> np.ndarray:
    """Mid-gray where unchanged, brighter or darker by the signed difference."""
    return np.clip(0.5 + (np.asarray(adv, dtype=np.float64) - np.asarray(orig, dtype=np.float64)), 0.0, 1.0)


def report(results_dir, out_dir=None) -> dict:
    """Scan run directories under ``results_dir`` and emit summary tables.

    Writes ``table1.csv`` (success per attack and model), ``table4.csv``
    (mean norms recomputed from the stored PNGs), ``table3.csv`` (defense
    rates, if any run has them) and perturbation images.
    """
    results_dir = Path(results_dir)
    out = Path(out_dir) if out_dir is not None else results_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple[str, str], list] = {}
    defense_reports = []
    run_dirs = sorted({p.parent.parent for p in results_dir.rglob("records/*.json")})
    for run in run_dirs:
        for rec in load_records(run):
            norms = lp_metrics(rec["original_image"], rec["adversarial_image"])
            groups.setdefault((rec["method"], rec["model"]), []).append((rec, norms))
            pert = perturbation_image(rec["original_image"], rec["adversarial_image"])
            save_png(pert, out / "perturbations" / run.name / f"{rec['id']}.png")
        dpath = run / "defenses.json"
        if dpath.exists():
            try:
                defense_reports += [DefenseReport(**d) for d in json.loads(dpath.read_text())]
            except (ValueError, TypeError) as exc:
                logger.warning("skipping corrupt defense file %s: %s", dpath, exc)

    table1 = [("attack", "model", "n", "success")]
    table4 = [("attack", "model", "n", "l0", "l2", "linf")]
    for (method, model) in sorted(groups):
        entries = groups[(method, model)]
        n = len(entries)
        table1.append((method, model, n, f"{100.0 * sum(r['success'] for r, _ in entries) / n:.2f}"))
        means = [np.mean([getattr(nr, k) for _, nr in entries]) for k in ("l0", "l2", "linf")]
        table4.append((method, model, n) + tuple(f"{m:.6f}" for m in means))
    for name, rows in (("table1.csv", table1), ("table4.csv", table4)):
        with (out / name).open("w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    if defense_reports:
        write_defense_table(defense_reports, out / "table3.csv")
    return {"table1": table1[1:], "table4": table4[1:], "runs": [str(r) for r in run_dirs],
            "defenses": defense_reports}

