"""End-to-end orchestration: adapter -> pretrain -> finetune -> evaluate.

Every stage writes ``stage.json`` with a hash of its own config plus the
hashes of the stages it consumes. A rerun skips stages whose hash matches and
refuses (unless ``force``) to overwrite a stage produced by another config.
"""
import dataclasses
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import yaml

from ._utils import config_hash, module_checksum
from .adapter import AdapterTrainConfig, freeze, load_adapter, save_adapter, train_adapter
from .data import (DilutionSpec, SPLITS, dilute, load_manifest, load_pairs, save_mask,
                   write_dilution_sidecar)
from .encoder import ClipSpec, FrozenFullEncoder, clip_encoder
from .exceptions import ConfigurationError, StageMismatchError
from .finetune import ChangeDetectionNet, FinetuneConfig, finetune, predict_proba
from .metrics import ConfusionCounts, accumulate, metrics_report
from .pretrain import PretrainConfig, load_pretrained, pretrain

logger = logging.getLogger(__name__)

STAGES = ("adapter", "pretrain", "finetune", "evaluate")


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    dilution_ratio: float = 1.0
    # splits whose images (labels unused) feed the adapter and pre-training
    unlabeled_splits: tuple = SPLITS
    eval_split: str = "test"


@dataclass(frozen=True)
class TransferConfig:
    clip: bool = True
    keep_count: int = 3


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    adapter: AdapterTrainConfig = field(default_factory=AdapterTrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw or {})
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
        seed = int(raw.get("seed", 0))
        sections = {}
        for f in dataclasses.fields(cls):
            if f.name in ("out_dir", "seed"):
                continue
            section_cls = f.default_factory
            values = dict(raw.get(f.name) or {})
            names = {g.name for g in dataclasses.fields(section_cls)}
            bad = set(values) - names
            if bad:
                raise ConfigurationError(f"unknown keys in [{f.name}]: {sorted(bad)}")
            if "seed" in names:
                values["seed"] = seed
            for g in dataclasses.fields(section_cls):
                if g.name in values and isinstance(g.default, tuple):
                    values[g.name] = tuple(values[g.name])
            try:
                sections[f.name] = section_cls(**values)
            except TypeError as exc:
                raise ConfigurationError(str(exc)) from exc
        return cls(out_dir=str(raw.get("out_dir", cls.out_dir)), seed=seed, **sections)

    def to_dict(self):
        return _plain(asdict(self))

    def replace(self, **overrides):
        """Return a copy with dotted-key overrides, e.g. ``{"pretrain.alpha": 0.3}``."""
        raw = self.to_dict()
        for key, value in overrides.items():
            apply_override(raw, key, value)
        return RunConfig.from_dict(raw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def apply_override(raw, dotted, value):
    *parents, leaf = dotted.split(".")
    node = raw
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def load_config(path, overrides=None):
    raw = yaml.safe_load(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        apply_override(raw, key, value)
    return RunConfig.from_dict(raw)


def save_config(config, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


# -- stage bookkeeping ---------------------------------------------------------

def stage_hashes(config):
    d = asdict(config.data)
    uses_pretrained = config.finetune.use_pretrained
    uses_adapter = uses_pretrained and not config.pretrain.disable_adapter
    hashes = {}
    if uses_adapter:
        hashes["adapter"] = config_hash({"data": d, "adapter": asdict(config.adapter)})
    if uses_pretrained:
        hashes["pretrain"] = config_hash({"data": d, "upstream": hashes.get("adapter"),
                                          "pretrain": asdict(config.pretrain)})
    hashes["finetune"] = config_hash({"data": d, "upstream": hashes.get("pretrain"),
                                      "transfer": asdict(config.transfer) if uses_pretrained else None,
                                      "finetune": asdict(config.finetune)})
    hashes["evaluate"] = config_hash({"upstream": hashes["finetune"], "split": config.data.eval_split})
    return hashes


def _stage_state(stage_dir, expected, force):
    """'skip' when a matching stage exists, otherwise 'run'."""
    meta = stage_dir / "stage.json"
    if not meta.exists():
        return "run"
    found = json.loads(meta.read_text())["hash"]
    if found == expected:
        return "skip"
    if not force:
        raise StageMismatchError(f"{stage_dir} was produced by a different config "
                                 f"({found[:12]} != {expected[:12]}); pass force to recompute")
    return "run"


def _finish_stage(stage_dir, digest, payload):
    (stage_dir / "stage.json").write_text(json.dumps({"hash": digest, **payload}, indent=1))


def _reuse(stage, stage_dir, digest, reuse_from):
    for other in reuse_from or ():
        candidate = Path(other) / stage
        meta = candidate / "stage.json"
        if meta.exists() and json.loads(meta.read_text())["hash"] == digest:
            if stage_dir.exists():
                shutil.rmtree(stage_dir)
            shutil.copytree(candidate, stage_dir)
            return True
    return False


# -- data helpers ----------------------------------------------------------------

def unlabeled_t1_t2(config):
    t1s, t2s = [], []
    for split in config.data.unlabeled_splits:
        if (Path(config.data.root) / split).is_dir():
            t1, t2, _ = load_pairs(load_manifest(config.data.root, split))
            t1s.append(t1)
            t2s.append(t2)
    if not t1s:
        raise ConfigurationError(f"no unlabeled splits found under {config.data.root}")
    return torch.cat(t1s), torch.cat(t2s)


def labeled_split(config, split):
    manifest = load_manifest(config.data.root, split)
    if split != "test" and config.data.dilution_ratio < 1.0:
        manifest = dilute(manifest, DilutionSpec(config.data.dilution_ratio, config.seed))
    return manifest


def build_extractor(config, ssl_model):
    if config.transfer.clip:
        return clip_encoder(ssl_model.encoder, ClipSpec(config.transfer.keep_count))
    return FrozenFullEncoder(ssl_model.encoder)


# -- driver ----------------------------------------------------------------------

def run_pipeline(config, force=False, reuse_from=None):
    """Execute (or resume) every needed stage; returns the run directory."""
    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.yaml")
    hashes = stage_hashes(config)
    artifacts = {"hashes": hashes, "stages": {}}

    adapter = ssl_model = extractor = None
    unlabeled = None

    if "adapter" in hashes:
        sdir = run_dir / "adapter"
        if _stage_state(sdir, hashes["adapter"], force) == "run" and \
                not _reuse("adapter", sdir, hashes["adapter"], reuse_from):
            sdir.mkdir(exist_ok=True)
            unlabeled = unlabeled_t1_t2(config)
            t0 = time.time()
            adapter = freeze(train_adapter(*unlabeled, config.adapter))
            save_adapter(adapter, sdir / "adapter.pt")
            _finish_stage(sdir, hashes["adapter"], {"seconds": time.time() - t0,
                                                    "g1_checksum": module_checksum(adapter.g1)})
            artifacts["stages"]["adapter"] = "ran"
        else:
            artifacts["stages"]["adapter"] = "skipped"
        adapter = adapter or load_adapter(sdir / "adapter.pt")

    if "pretrain" in hashes:
        sdir = run_dir / "pretrain"
        if _stage_state(sdir, hashes["pretrain"], force) == "run" and \
                not _reuse("pretrain", sdir, hashes["pretrain"], reuse_from):
            unlabeled = unlabeled or unlabeled_t1_t2(config)
            t0 = time.time()
            ssl_model, report = pretrain(unlabeled[0], adapter, config.pretrain, out_dir=sdir)
            _finish_stage(sdir, hashes["pretrain"], {"seconds": time.time() - t0,
                                                     "final_loss": report.total[-1],
                                                     "final_code_std": report.code_std[-1]})
            artifacts["stages"]["pretrain"] = "ran"
        else:
            artifacts["stages"]["pretrain"] = "skipped"
        if ssl_model is None:
            ssl_model, _ = load_pretrained(sdir / "last.pt")
        extractor = build_extractor(config, ssl_model)

    train_m = labeled_split(config, "train")
    val_m = labeled_split(config, "val")
    test_m = load_manifest(config.data.root, config.data.eval_split)
    image_size = train_m.patch_size

    sdir = run_dir / "finetune"
    model = None
    if _stage_state(sdir, hashes["finetune"], force) == "run" and \
            not _reuse("finetune", sdir, hashes["finetune"], reuse_from):
        sdir.mkdir(exist_ok=True)
        for m in (train_m, val_m):
            write_dilution_sidecar(m, DilutionSpec(config.data.dilution_ratio, config.seed),
                                   sdir / f"dilution_{m.split}.json")
        t0 = time.time()
        result = finetune(load_pairs(train_m), load_pairs(val_m), extractor, config.finetune, out_dir=sdir)
        model = result.model
        _finish_stage(sdir, hashes["finetune"], {"seconds": time.time() - t0,
                                                 "best_epoch": result.best_epoch,
                                                 "best_val_f1": result.best_f1,
                                                 "train_size": len(train_m), "val_size": len(val_m)})
        artifacts["stages"]["finetune"] = "ran"
    else:
        artifacts["stages"]["finetune"] = "skipped"
    if model is None:
        model = ChangeDetectionNet(image_size, extractor, config.finetune.fusion,
                                   config.finetune.align_channels, config.finetune.base_width)
        model.load_state_dict(torch.load(sdir / "baseline.pt", map_location="cpu",
                                         weights_only=False)["state_dict"])
        model.eval()

    sdir = run_dir / "evaluate"
    if _stage_state(sdir, hashes["evaluate"], force) == "run":
        pred_dir = sdir / "pred"
        pred_dir.mkdir(parents=True, exist_ok=True)
        t1, t2, gt = load_pairs(test_m)
        pred = predict_proba(model, t1, t2) > config.finetune.threshold
        counts = ConfusionCounts()
        for entry, p, g in zip(test_m.entries, pred, gt):
            save_mask(p[0].numpy(), pred_dir / entry.name)
            counts = accumulate(p[0], g[0].bool(), counts)
        (sdir / "metrics.json").write_text(json.dumps(metrics_report(counts), indent=1))
        _finish_stage(sdir, hashes["evaluate"], {})
        artifacts["stages"]["evaluate"] = "ran"
    else:
        artifacts["stages"]["evaluate"] = "skipped"

    artifacts["metrics"] = json.loads((sdir / "metrics.json").read_text())
    (run_dir / "artifacts.json").write_text(json.dumps(artifacts, indent=1))
    return run_dir


# -- ablations -------------------------------------------------------------------

ABLATION_AXES = ("adapter", "clipping", "branches", "fusion", "alpha")
DEFAULT_ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


def ablation_arms(axis, grid=None):
    """(row label, overrides) pairs for one ablation axis."""
    if axis == "adapter":
        return [("w/o Domain Adapter", {"pretrain.disable_adapter": True}),
                ("w/ Domain Adapter", {"pretrain.disable_adapter": False})]
    if axis == "clipping":
        return [("w/o Encoder Clipping", {"transfer.clip": False}),
                ("w/ Encoder Clipping", {"transfer.clip": True})]
    if axis == "branches":
        return [("Spa. no / Cha. no", {"finetune.use_pretrained": False}),
                ("Spa. no / Cha. yes", {"pretrain.disable_spatial": True}),
                ("Spa. yes / Cha. no", {"pretrain.disable_channel": True}),
                ("Spa. yes / Cha. yes", {})]
    if axis == "fusion":
        return [(m.capitalize(), {"finetune.fusion": m})
                for m in ("concatenate", "add", "multiply", "deconvolution")]
    if axis == "alpha":
        return [(f"alpha={a:g}", {"pretrain.alpha": float(a)}) for a in (grid or DEFAULT_ALPHA_GRID)]
    raise ConfigurationError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def reproduce_ablation(base_config, axis, out_dir=None, grid=None, force=False):
    """Run every arm of ``axis`` with the shared seed; returns the table rows.

    Stages shared between arms (e.g. the adapter on the alpha axis) are
    trained once and copied.
    """
    out_dir = Path(out_dir or Path(base_config.out_dir) / f"ablation-{axis}")
    rows, done = [], []
    for i, (label, overrides) in enumerate(ablation_arms(axis, grid)):
        cfg = base_config.replace(out_dir=str(out_dir / f"arm{i}"), **overrides)
        run_dir = run_pipeline(cfg, force=force, reuse_from=done)
        done.append(run_dir)
        metrics = json.loads((run_dir / "evaluate" / "metrics.json").read_text())
        ft = json.loads((run_dir / "finetune" / "stage.json").read_text())
        rows.append({"arm": label, "f1": metrics["f1"], "iou": metrics["iou"],
                     "precision": metrics["precision"], "recall": metrics["recall"],
                     "best_val_f1": ft["best_val_f1"], "run_dir": str(run_dir)})
    write_table(rows, out_dir, axis)
    return rows


def write_table(rows, out_dir, axis):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "table.json").write_text(json.dumps(rows, indent=1))
    lines = [f"| {axis} arm | F1 | IoU |", "|---|---|---|"]
    lines += [f"| {r['arm']} | {100 * r['f1']:.2f} | {100 * r['iou']:.2f} |" for r in rows]
    (out_dir / "table.md").write_text("\n".join(lines) + "\n")
