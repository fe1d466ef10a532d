"""Staged experiment pipeline: generate, train, defend, eval.

Stages can run in memory (``run_pipeline``) or against a ``RunDir``, an
append-only output directory whose manifest records a sha256 per artifact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import evaluation as ev
from .config import ExperimentConfig
from .defense import (PartitionResult, UBTConfig, UBTResult, abl_defend, clean_finetune_defend,
                      partition_suspicious, retrain_oracle, suspicious_count, topk_count, ubt_defend)
from .model import DualEncoderModel, checkpoint_bytes, init_model, load_checkpoint
from .objectives import LossReport, PairView, train

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DATA_FILES = ("pretrain", "train", "poisoned", "eval", "heldout")
TRAIN_STAGES = ("pretrain", "poison", "retrain")


class MissingArtifact(FileNotFoundError):
    pass


class ArtifactConflict(RuntimeError):
    """Raised instead of overwriting an artifact with different content."""


# ---------------------------------------------------------------- pure stages

@dataclass
class DataBundle:
    pretrain: dg.Dataset
    train: dg.Dataset
    poisoned: dg.Dataset
    eval: dg.Dataset
    heldout: dg.Dataset

    def items(self):
        return [(name, getattr(self, name)) for name in DATA_FILES]


def trigger_spec(cfg: ExperimentConfig) -> dg.TriggerSpec:
    a = cfg.attack
    return dg.make_trigger(a.kind, cfg.data.image_size, a.target_class, seed=cfg.seed("trigger"),
                           patch_size=a.patch_size, alpha=a.alpha, frequency=a.frequency,
                           amplitude=a.amplitude, sample_templates=a.sample_templates)


def prompts_for(cfg: ExperimentConfig, vocab) -> list[np.ndarray]:
    return dg.class_prompts(cfg.data.class_count, vocab)


def build_datasets(cfg: ExperimentConfig) -> DataBundle:
    """Pretraining, training, eval and held-out sets share class prototypes."""
    d = cfg.data
    common = dict(class_count=d.class_count, image_size=d.image_size, vocab_size=d.vocab_size,
                  prototype_seed=cfg.seed("prototypes"))
    pretrain = dg.generate_dataset(per_class=d.pretrain_per_class, sigma=d.sigma,
                                   seed=cfg.seed("pretrain_data"), **common)
    clean = dg.generate_dataset(per_class=d.per_class, sigma=d.sigma, seed=cfg.seed("train_data"),
                                caption_noise=d.caption_noise, **common)
    evalset = dg.generate_dataset(per_class=cfg.eval.per_class, sigma=d.sigma,
                                  seed=cfg.seed("eval_data"), **common)
    heldout = dg.generate_dataset(per_class=cfg.eval.heldout_per_class, sigma=cfg.eval.heldout_sigma,
                                  seed=cfg.seed("heldout_data"), **common)
    poisoned = dg.poison_dataset(clean, trigger_spec(cfg), cfg.attack.poison_count,
                                 seed=cfg.seed("poison_pick"))
    return DataBundle(pretrain, clean, poisoned, evalset, heldout)


def initial_model(cfg: ExperimentConfig) -> DualEncoderModel:
    m = cfg.model
    return init_model(cfg.data.image_size, cfg.data.vocab_size, hidden=m.hidden,
                      embed_dim=m.embed_dim, tau=m.tau, seed=cfg.seed("init"))


def train_stage(cfg: ExperimentConfig, stage: str, data: DataBundle,
                start: DualEncoderModel) -> tuple[DualEncoderModel, LossReport]:
    """pretrain: clean pretraining set; poison: poisoned training set;
    retrain: the training set's clean subset, from the same start as poison."""
    if stage == "pretrain":
        return train(start, PairView.from_dataset(data.pretrain), "contrastive",
                     cfg.train_config("pretrain"), stage="pretrain")
    if stage == "poison":
        return train(start, PairView.from_dataset(data.poisoned), "contrastive",
                     cfg.train_config("poison"), stage="poison")
    if stage == "retrain":
        return retrain_oracle(start, data.poisoned.clean_subset(), cfg.train_config("retrain"))
    raise ValueError(f"unknown training stage {stage!r}")


def selection_sizes(cfg: ExperimentConfig, n: int) -> tuple[int, int]:
    """(s_susp, k) for a training set of n pairs."""
    s_susp = min(suspicious_count(n, cfg.defense.s_susp_fraction), n - 1)
    if cfg.defense.k_rule == "sqrt_susp":
        k = max(1, int(round(math.sqrt(s_susp))))
    else:
        k = topk_count(n, cfg.defense.k_fraction)
    return s_susp, min(k, s_susp)


def ubt_config(cfg: ExperimentConfig, n: int) -> UBTConfig:
    s_susp, k = selection_sizes(cfg, n)
    df = cfg.defense
    return UBTConfig(s_susp, k, cfg.train_config("overfit"), cfg.train_config("unlearn"),
                     mask_threshold=df.mask_threshold, poison_gate=df.poison_gate,
                     include_masks=df.include_masks)


@dataclass
class DefenseOutcome:
    method: str
    model: DualEncoderModel
    refused: bool = False
    ubt: UBTResult | None = None
    partition: PartitionResult | None = None
    reports: dict[str, LossReport] = field(default_factory=dict)


def defend_stage(cfg: ExperimentConfig, method: str, poisoned_model: DualEncoderModel,
                 reference_model: DualEncoderModel, data: DataBundle) -> DefenseOutcome:
    ds = data.poisoned
    if method == "none":
        return DefenseOutcome("none", poisoned_model)
    if method == "ubt":
        res = ubt_defend(poisoned_model, reference_model, ds, ubt_config(cfg, len(ds)))
        return DefenseOutcome("ubt", res.model, res.refused, res, res.partition, dict(res.reports))
    if method == "abl":
        s_susp, _ = selection_sizes(cfg, len(ds))
        part = partition_suspicious(reference_model, ds, s_susp)
        model, rep = abl_defend(poisoned_model, ds, part, cfg.train_config("abl"))
        return DefenseOutcome("abl", model, partition=part, reports={"abl": rep})
    if method == "cleanft":
        model, rep = clean_finetune_defend(poisoned_model, data.heldout, cfg.train_config("cleanft"))
        return DefenseOutcome("cleanft", model, reports={"cleanft": rep})
    raise ValueError(f"unknown defense method {method!r}")


def evaluate(cfg: ExperimentConfig, model: DualEncoderModel, data: DataBundle, stage: str,
             retrain: DualEncoderModel | None = None) -> ev.MetricsRecord:
    prompts = prompts_for(cfg, data.eval.vocab)
    spec = trigger_spec(cfg)
    ca = ev.clean_accuracy(model, data.eval, prompts)
    asr = ev.attack_success_rate(model, ev.non_target(data.eval, spec.target_class), spec, prompts)
    kl = None if retrain is None else ev.model_kl(model, retrain, data.eval, prompts)
    return ev.MetricsRecord(stage, cfg.data.seed, ca, asr, kl)


@dataclass
class PipelineResult:
    data: DataBundle
    models: dict[str, DualEncoderModel]
    outcomes: dict[str, DefenseOutcome]
    metrics: dict[str, ev.MetricsRecord]


def run_pipeline(cfg: ExperimentConfig, methods=("ubt",), with_retrain: bool = False,
                 data: DataBundle | None = None,
                 pretrained: DualEncoderModel | None = None) -> PipelineResult:
    """In-memory generate -> pretrain -> poison -> defend -> eval chain.

    ``data`` and ``pretrained`` may be passed in to share work between runs
    that differ only downstream of them.
    """
    cfg.validate()
    data = data or build_datasets(cfg)
    if pretrained is None:
        pretrained, _ = train_stage(cfg, "pretrain", data, initial_model(cfg))
    poisoned, _ = train_stage(cfg, "poison", data, pretrained)
    models = {"pretrain": pretrained, "poison": poisoned}
    if with_retrain:
        models["retrain"], _ = train_stage(cfg, "retrain", data, pretrained)
    retrain = models.get("retrain")
    metrics = {"pretrain": evaluate(cfg, pretrained, data, "pretrain", retrain),
               "poison": evaluate(cfg, poisoned, data, "poison", retrain)}
    outcomes = {}
    for method in methods:
        out = defend_stage(cfg, method, poisoned, pretrained, data)
        outcomes[method] = out
        models[f"defended-{method}"] = out.model
        metrics[f"defended-{method}"] = evaluate(cfg, out.model, data, f"defended-{method}", retrain)
    if retrain is not None:
        metrics["retrain"] = evaluate(cfg, retrain, data, "retrain", retrain)
    return PipelineResult(data, models, outcomes, metrics)


# ---------------------------------------------------------------- run directory

def sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


class RunDir:
    """Append-only artifact store.  Re-writing identical bytes is a no-op;
    different bytes under an existing name raise ArtifactConflict."""

    def __init__(self, root, cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)
        mpath = self.root / MANIFEST
        if mpath.exists():
            self.manifest = json.loads(mpath.read_text())
            if self.manifest.get("config_hash") != cfg.hash():
                raise ArtifactConflict(f"{self.root} holds a run with a different config")
        else:
            self.manifest = {"config_hash": cfg.hash(), "artifacts": {}, "metrics": []}
        self.put_bytes("config.ini", cfg.to_ini().encode("utf-8"), "config")

    def path(self, name: str) -> Path:
        return self.root / name

    def has(self, name: str) -> bool:
        return name in self.manifest["artifacts"] and self.path(name).exists()

    def require(self, name: str) -> Path:
        if not self.has(name):
            raise MissingArtifact(f"{self.path(name)} is missing; run the producing command first")
        return self.path(name)

    def put_bytes(self, name: str, blob: bytes, stage: str) -> str:
        digest = sha256(blob)
        target = self.path(name)
        if target.exists():
            if sha256(target.read_bytes()) != digest:
                raise ArtifactConflict(f"{target} exists with different content")
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(blob)
        self.manifest["artifacts"][name] = {"sha256": digest, "stage": stage}
        self._save()
        return digest

    def put_csv(self, name: str, writer, stage: str) -> str:
        """``writer(path)`` renders into a scratch file whose bytes are then stored."""
        scratch = self.path(name + ".partial")
        scratch.parent.mkdir(parents=True, exist_ok=True)
        try:
            writer(scratch)
            blob = scratch.read_bytes()
        finally:
            scratch.unlink(missing_ok=True)
        return self.put_bytes(name, blob, stage)

    def put_dataset(self, name: str, ds: dg.Dataset) -> str:
        rel = f"data/{name}.ubtd"
        self.put_bytes(rel + ".txt", dg.dataset_sidecar(ds).encode("utf-8"), "generate")
        return self.put_bytes(rel, dg.dataset_bytes(ds), "generate")

    def load_dataset(self, name: str) -> dg.Dataset:
        return dg.load_dataset(self.require(f"data/{name}.ubtd"))

    def put_model(self, name: str, model: DualEncoderModel, stage: str) -> str:
        return self.put_bytes(f"ckpt/{name}.ckpt", checkpoint_bytes(model), stage)

    def load_model(self, name: str) -> DualEncoderModel:
        return load_checkpoint(self.require(f"ckpt/{name}.ckpt"))

    def add_metrics(self, record: ev.MetricsRecord) -> None:
        ev.append_metrics(self.path("metrics.csv"), record)
        self.manifest["metrics"].append(dict(zip(ev.MetricsRecord.FIELDS, record.row())))
        self._save()

    def verify(self) -> list[str]:
        """Problems found when re-hashing every listed artifact (empty when intact)."""
        problems = []
        for name, meta in self.manifest["artifacts"].items():
            p = self.path(name)
            if not p.exists():
                problems.append(f"{name}: missing")
            elif sha256(p.read_bytes()) != meta["sha256"]:
                problems.append(f"{name}: hash mismatch")
        return problems

    def _save(self) -> None:
        self.path(MANIFEST).write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")


def load_bundle(run: RunDir) -> DataBundle:
    return DataBundle(*(run.load_dataset(name) for name in DATA_FILES))


# ---------------------------------------------------------------- on-disk stages

def cmd_generate(cfg: ExperimentConfig, run: RunDir) -> DataBundle:
    data = build_datasets(cfg)
    for name, ds in data.items():
        run.put_dataset(name, ds)
    return data


def cmd_train(cfg: ExperimentConfig, run: RunDir, stage: str) -> DualEncoderModel:
    if stage not in TRAIN_STAGES:
        raise ValueError(f"stage must be one of {TRAIN_STAGES}")
    data = load_bundle(run)
    if stage == "pretrain":
        start = initial_model(cfg)
        run.put_model("init", start, "pretrain")
    else:
        start = run.load_model("pretrain")
    model, report = train_stage(cfg, stage, data, start)
    run.put_model(stage, model, stage)
    run.put_csv(f"losses/{stage}.csv", report.write_csv, stage)
    return model


def cmd_defend(cfg: ExperimentConfig, run: RunDir, method: str | None = None) -> DefenseOutcome:
    method = method or cfg.defense.method
    data = load_bundle(run)
    poisoned = run.load_model("poison")
    reference = run.load_model("pretrain")
    out = defend_stage(cfg, method, poisoned, reference, data)
    tag = f"defend-{method}"
    if out.partition is not None:
        run.put_csv(f"{tag}/partition.csv", out.partition.write_csv, tag)
    if out.ubt is not None:
        res = out.ubt
        run.put_csv(f"{tag}/topk.csv", lambda p: res.topk.write_csv(p, res.partition), tag)
        run.put_csv(f"{tag}/unlearn_set.csv", lambda p: res.unlearn_set.write_csv(p, data.poisoned), tag)
        run.put_model(f"overfit-{method}", res.overfit_model, tag)
        run.put_bytes(f"{tag}/gate.txt",
                      f"gate_similarity = {res.gate_similarity!r}\nthreshold = {cfg.defense.poison_gate!r}\n"
                      f"refused = {str(res.refused).lower()}\n".encode("utf-8"), tag)
    for stage, report in out.reports.items():
        run.put_csv(f"{tag}/losses_{stage}.csv", report.write_csv, tag)
    run.put_model(f"defended-{method}", out.model, tag)
    return out


def resolve_checkpoint(run: RunDir, name: str) -> tuple[str, DualEncoderModel]:
    """A run-relative checkpoint name (``poison``) or a filesystem path."""
    p = Path(name)
    if p.suffix == ".ckpt" or p.exists():
        if not p.exists():
            raise MissingArtifact(f"{p} not found")
        return p.stem, load_checkpoint(p)
    return name, run.load_model(name)


def cmd_eval(cfg: ExperimentConfig, run: RunDir, checkpoint: str, plot: bool = True) -> ev.MetricsRecord:
    label, model = resolve_checkpoint(run, checkpoint)
    data = load_bundle(run)
    retrain = run.load_model("retrain") if run.has("ckpt/retrain.ckpt") else None
    record = evaluate(cfg, model, data, label, retrain)
    hist = ev.similarity_histogram(model, data.poisoned, bins=cfg.eval.bins)
    run.put_csv(f"hist/{label}.csv", hist.write_csv, "eval")
    if plot:
        from .plotting import histogram_png
        run.put_bytes(f"hist/{label}.png", histogram_png(hist, title=label), "eval")
    run.add_metrics(record)
    return record


SWEEP_AXES = {"poison_count": ("attack", "poison_count"), "dataset_size": ("data", "per_class")}
SWEEP_FIELDS = ("axis", "value", "samples", "poison_count", "s_susp", "k", "topk_precision",
                "gate_similarity", "refused", "ca_poisoned", "asr_poisoned", "ca_defended",
                "asr_defended")


class SweepError(RuntimeError):
    def __init__(self, label: str, cause: Exception):
        super().__init__(f"sweep point {label} failed: {cause}")
        self.label, self.cause = label, cause


def sweep_point_config(cfg: ExperimentConfig, axis: str, value: int) -> ExperimentConfig:
    section, key = SWEEP_AXES[axis]
    point = cfg.with_updates(section, **{key: int(value)})
    point.output = str(Path(cfg.output) / f"sweep-{axis}-{value}")
    return point


def run_sweep_point(cfg: ExperimentConfig, axis: str, value: int, root=None) -> dict:
    """Full generate -> pretrain -> poison -> defend -> eval for one sweep value."""
    point = sweep_point_config(cfg, axis, value)
    if root is None:
        res = run_pipeline(point, methods=(point.defense.method,))
        data, out = res.data, res.outcomes[point.defense.method]
        before, after = res.metrics["poison"], res.metrics[f"defended-{point.defense.method}"]
    else:
        run = RunDir(Path(root) / f"sweep-{axis}-{value}", point)
        data = cmd_generate(point, run)
        cmd_train(point, run, "pretrain")
        cmd_train(point, run, "poison")
        out = cmd_defend(point, run)
        before = cmd_eval(point, run, "poison")
        after = cmd_eval(point, run, f"defended-{point.defense.method}")
    s_susp, k = selection_sizes(point, len(data.poisoned))
    ubt = out.ubt
    precision = (float(data.poisoned.poisoned[ubt.topk.topk_indices].mean())
                 if ubt is not None and ubt.topk is not None else float("nan"))
    return {"axis": axis, "value": int(value), "samples": len(data.poisoned),
            "poison_count": point.attack.poison_count, "s_susp": s_susp, "k": k,
            "topk_precision": precision,
            "gate_similarity": ubt.gate_similarity if ubt is not None else float("nan"),
            "refused": int(out.refused), "ca_poisoned": before.ca, "asr_poisoned": before.asr,
            "ca_defended": after.ca, "asr_defended": after.asr}


def write_sweep_csv(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_sweep(cfg: ExperimentConfig, axis: str, values, root=None) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {tuple(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for value in values:
        label = f"{axis}={value}"
        try:
            rows.append(run_sweep_point(cfg, axis, value, root))
        except Exception as exc:
            raise SweepError(label, exc) from exc
        log.info("sweep %s: asr %.3f -> %.3f", label, rows[-1]["asr_poisoned"], rows[-1]["asr_defended"])
    if root is not None:
        Path(root).mkdir(parents=True, exist_ok=True)
        write_sweep_csv(rows, Path(root) / f"sweep-{axis}.csv")
    return rows
