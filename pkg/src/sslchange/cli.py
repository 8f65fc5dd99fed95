"""``sslchange`` command-line interface.

Failures exit non-zero and print ``{"error": ..., "message": ...}`` on stderr.
"""
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch
import yaml
from PIL import Image

from .adapter import AdapterTrainConfig, freeze, load_adapter, save_adapter, train_adapter
from .data import (DilutionSpec, StyleShift, SynthSceneConfig, dilute, load_image_dir,
                   load_manifest, load_pairs, load_split_dir, save_mask, synth_generate,
                   write_dilution_sidecar, _list_images)
from .encoder import ClipSpec, FrozenFullEncoder, clip_encoder
from .exceptions import ConfigurationError, DataError, SSLChangeError
from .finetune import FinetuneConfig, finetune, predict_proba
from .metrics import ConfusionCounts, accumulate, metrics_report
from .pipeline import ABLATION_AXES, load_config, reproduce_ablation, run_pipeline
from .pretrain import PretrainConfig, load_pretrained, pretrain

OVERLAY_COLORS = {"tp": (255, 255, 255), "tn": (0, 0, 0), "fp": (255, 0, 0), "fn": (0, 0, 255)}


def _echo_json(obj):
    click.echo(json.dumps(obj, indent=1))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
def cli(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")


@cli.command()
@click.option("--out", "out_root", required=True, type=click.Path(file_okay=False))
@click.option("--canvas-size", default=64, show_default=True)
@click.option("--train", "n_train", default=140, show_default=True)
@click.option("--val", "n_val", default=40, show_default=True)
@click.option("--test", "n_test", default=20, show_default=True)
@click.option("--min-objects", default=4, show_default=True)
@click.option("--max-objects", default=8, show_default=True)
@click.option("--change-fraction", default=0.5, show_default=True)
@click.option("--identity-style", is_flag=True, help="No style shift between acquisitions.")
@click.option("--seed", default=0, show_default=True)
def synth(out_root, canvas_size, n_train, n_val, n_test, min_objects, max_objects,
          change_fraction, identity_style, seed):
    """Generate a synthetic bi-temporal dataset."""
    cfg = SynthSceneConfig(canvas_size=canvas_size, num_objects=(min_objects, max_objects),
                           change_fraction=change_fraction,
                           style_shift=StyleShift.identity() if identity_style else None,
                           seed=seed, split_sizes={"train": n_train, "val": n_val, "test": n_test})
    manifests = synth_generate(cfg, out_root)
    _echo_json({split: len(m) for split, m in manifests.items()})


@cli.command("dilute")
@click.option("--root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", required=True, type=click.Choice(["train", "val", "test"]))
@click.option("--ratio", required=True, type=float)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Sidecar path (default <root>/<split>/dilution.json).")
def dilute_cmd(root, split, ratio, seed, out_path):
    """Select a seeded subset of a split and record it in a sidecar file."""
    spec = DilutionSpec(ratio, seed)
    manifest = dilute(load_manifest(root, split), spec)
    path = write_dilution_sidecar(manifest, spec, out_path)
    _echo_json({"selected": len(manifest), "sidecar": str(path)})


@cli.command("adapter-train")
@click.option("--t1-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--t2-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--epochs", default=20, show_default=True)
@click.option("--lr", default=2e-4, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--cycle-weight", default=10.0, show_default=True)
@click.option("--identity-weight", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def adapter_train(t1_dir, t2_dir, epochs, lr, batch_size, cycle_weight, identity_weight, seed, out_path):
    """Train and freeze the domain adapter."""
    t1, _ = load_image_dir(t1_dir)
    t2, _ = load_image_dir(t2_dir)
    cfg = AdapterTrainConfig(epochs, lr, cycle_weight, identity_weight, batch_size, seed)
    bundle = freeze(train_adapter(t1, t2, cfg))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_adapter(bundle, out_path)
    _echo_json({"checkpoint": out_path, "final": bundle.log[-1]})


@cli.command("pretrain")
@click.option("--t1-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--adapter-ckpt", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--epochs", default=100, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--lr", default=0.001, show_default=True)
@click.option("--alpha", default=0.5, show_default=True)
@click.option("--disable-adapter", is_flag=True)
@click.option("--disable-spatial", is_flag=True)
@click.option("--disable-channel", is_flag=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def pretrain_cmd(t1_dir, adapter_ckpt, epochs, batch_size, lr, alpha, disable_adapter,
                 disable_spatial, disable_channel, seed, out_dir):
    """Self-supervised pre-training on single-temporal images."""
    if adapter_ckpt is None and not disable_adapter:
        raise ConfigurationError("--adapter-ckpt is required unless --disable-adapter is set")
    t1, _ = load_image_dir(t1_dir)
    adapter = load_adapter(adapter_ckpt) if adapter_ckpt else None
    cfg = PretrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, alpha=alpha, seed=seed,
                         disable_adapter=disable_adapter, disable_spatial=disable_spatial,
                         disable_channel=disable_channel)
    _, report = pretrain(t1, adapter, cfg, out_dir=out_dir)
    _echo_json({"checkpoint": report.checkpoint_path, "final": report.epochs[-1]})


@cli.command("finetune")
@click.option("--train-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--val-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--encoder-ckpt", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--no-pretrained", is_flag=True, help="Plain supervised baseline.")
@click.option("--no-clip", is_flag=True, help="Transfer the full encoder output instead of shallow taps.")
@click.option("--keep-count", default=3, show_default=True)
@click.option("--fusion", default="concat", show_default=True,
              type=click.Choice(["concat", "add", "multiply", "deconv"]))
@click.option("--pos-weight", default=2.0, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--epochs", default=30, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def finetune_cmd(train_dir, val_dir, encoder_ckpt, no_pretrained, no_clip, keep_count, fusion,
                 pos_weight, batch_size, epochs, lr, seed, out_dir):
    """Supervised fine-tuning; writes the checkpoint, metrics.csv and val change maps."""
    extractor = None
    if not no_pretrained:
        if encoder_ckpt is None:
            raise ConfigurationError("--encoder-ckpt is required unless --no-pretrained is set")
        model, _ = load_pretrained(encoder_ckpt)
        extractor = (FrozenFullEncoder(model.encoder) if no_clip
                     else clip_encoder(model.encoder, ClipSpec(keep_count)))
    train_m, val_m = load_split_dir(train_dir, sidecar=True), load_split_dir(val_dir, sidecar=True)
    val = load_pairs(val_m)
    cfg = FinetuneConfig(epochs=epochs, lr=lr, batch_size=batch_size, pos_weight=pos_weight,
                         seed=seed, use_pretrained=not no_pretrained, fusion=fusion)
    result = finetune(load_pairs(train_m), val, extractor, cfg, out_dir=out_dir)
    pred_dir = Path(out_dir) / "pred"
    pred_dir.mkdir(exist_ok=True)
    probs = predict_proba(result.model, val[0], val[1])
    for entry, p in zip(val_m.entries, probs):
        save_mask((p[0] > cfg.threshold).numpy(), pred_dir / entry.name)
    _echo_json({"checkpoint": result.checkpoint_path, "best_epoch": result.best_epoch,
                "best_val_f1": result.best_f1})


def _read_binary(path):
    return np.asarray(Image.open(path).convert("L")) > 127


def _matched_masks(pred_dir, gt_dir):
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = _list_images(pred_dir)
    if not preds:
        raise DataError(f"no prediction masks in {pred_dir}")
    for p in preds:
        g = gt_dir / p.name
        if not g.exists():
            raise DataError(f"no ground truth for prediction {p.name} in {gt_dir}")
        yield p.name, _read_binary(p), _read_binary(g)


@cli.command("evaluate")
@click.option("--pred-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--gt-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def evaluate_cmd(pred_dir, gt_dir, out_path):
    """Precision, recall, F1 and IoU over a directory of predicted masks."""
    counts = ConfusionCounts()
    for _, pred, gt in _matched_masks(pred_dir, gt_dir):
        counts = accumulate(pred, gt, counts)
    report = metrics_report(counts)
    Path(out_path).write_text(json.dumps(report, indent=1))
    _echo_json(report)


@cli.command("overlay")
@click.option("--pred-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--gt-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def overlay_cmd(pred_dir, gt_dir, out_dir):
    """Colour-coded agreement maps: TP white, TN black, FP red, FN blue."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for name, pred, gt in _matched_masks(pred_dir, gt_dir):
        Image.fromarray(overlay(pred, gt)).save(out_dir / name)
        n += 1
    _echo_json({"written": n, "out_dir": str(out_dir)})


def overlay(pred, gt):
    rgb = np.zeros(pred.shape + (3,), dtype=np.uint8)
    rgb[pred & gt] = OVERLAY_COLORS["tp"]
    rgb[pred & ~gt] = OVERLAY_COLORS["fp"]
    rgb[~pred & gt] = OVERLAY_COLORS["fn"]
    return rgb


def _parse_sets(pairs):
    overrides = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(value)
    return overrides


@cli.command("run")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True, help="Override a config key, e.g. pretrain.alpha=0.3")
@click.option("--force", is_flag=True, help="Recompute stages whose config changed.")
def run_cmd(config_path, sets, force):
    """Run adapter -> pretrain -> finetune -> evaluate from one config file."""
    config = load_config(config_path, _parse_sets(sets))
    run_dir = run_pipeline(config, force=force)
    _echo_json(json.loads((run_dir / "artifacts.json").read_text()))


@cli.command("reproduce-ablation")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True)
@click.option("--axis", required=True, type=click.Choice(ABLATION_AXES))
@click.option("--grid", default=None, help="Comma-separated alpha values (alpha axis only).")
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True)
def ablation_cmd(config_path, sets, axis, grid, out_dir, force):
    """Run every arm of one ablation axis and write table.md / table.json."""
    config = load_config(config_path, _parse_sets(sets))
    values = [float(v) for v in grid.split(",")] if grid else None
    rows = reproduce_ablation(config, axis, out_dir=out_dir, grid=values, force=force)
    _echo_json(rows)


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="sslchange", standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(130)
    except click.ClickException as exc:
        _fail(exc, exc.format_message(), exc.exit_code)
    except (SSLChangeError, OSError) as exc:
        _fail(exc, str(exc), 1)
    return 0


def _fail(exc, message, code):
    click.echo(json.dumps({"error": type(exc).__name__, "message": message}), err=True)
    sys.exit(code)


if __name__ == "__main__":
    main()
