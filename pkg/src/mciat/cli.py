"""Command-line front end.

    mciat generate | pretrain | finetune | probe | associate | select-stats | report
          [--config FILE] [--set key.path=value ...] [--out DIR] [--seed N]

Exit status: 0 success, 1 user error (bad config, missing inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import plots
from .analysis import (
    MetricsReport,
    classification_metrics,
    extract_layer_features,
    linear_probe,
    pca_project,
    read_csv,
    run_association,
    write_association_csv,
    write_csv,
    write_pca_csv,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .encoder import ViTEncoder
from .mats import FinetuneModel, finetune, predict, selection_frequency, write_selection_dump
from .pretrain import NothingToOptimize, PretrainModel, epoch_means, train
from .synth import Phantom, build_dataset, load_dataset, save_dataset
from .volume import PatchGrid, patchify

log = logging.getLogger("mciat")

COMMANDS = ("generate", "pretrain", "finetune", "probe", "associate", "select-stats", "report")
LOSS_COLUMNS = ("step", "epoch", "L_sd", "L_pixel", "L_age", "L_adv_D", "L_adv_G", "total", "lr")
METRIC_COLUMNS = ("mode", "iat", "k") + MetricsReport.FIELDS
PROBE_COLUMNS = ("mode", "layer") + MetricsReport.FIELDS
SPLITS = ("pretrain", "finetune", "association")


class UserError(Exception):
    """Problem the user can fix: missing inputs, bad arguments."""


# ---------------------------------------------------------------------------
# paths and data


def data_dir(out: Path, split: str) -> Path:
    return out / "data" / split


def mode_dir(out: Path, command: str, mode: int) -> Path:
    return out / command / f"mode{mode}"


def _load_split(out: Path, split: str) -> list[Phantom]:
    d = data_dir(out, split)
    if not (d / "index.json").exists():
        raise UserError(f"dataset {d} not found; run `generate` first")
    return load_dataset(d)[1]


def _patches(cfg: ExperimentConfig, phantoms: list[Phantom]) -> np.ndarray:
    grid = PatchGrid(cfg.phantom.patch, cfg.phantom.shape)
    return np.stack([patchify(p.volume, grid) for p in phantoms])


def _finetune_split(cfg: ExperimentConfig, phantoms):
    n_train = cfg.data.n_finetune_train
    return phantoms[:n_train], phantoms[n_train:]


# ---------------------------------------------------------------------------
# model persistence


def _ckpt_dir(out: Path, command: str, mode: int) -> Path:
    return mode_dir(out, command, mode) / "checkpoint"


def save_pretrained(path: Path, model: PretrainModel, cfg: ExperimentConfig, step: int) -> None:
    meta = {"mode": cfg.pretrain.mode, "age_mean": model.age_mean, "age_std": model.age_std}
    save_checkpoint(path, Checkpoint(model.state_dict(), {}, cfg.to_dict(), step, meta))


def load_pretrained_encoder(out: Path, cfg: ExperimentConfig, mode: int) -> ViTEncoder:
    """Encoder for ``mode``: random initialisation for mode 0, else the pretrained weights."""
    encoder = ViTEncoder(cfg.encoder, cfg.rng("init"))
    if mode == 0:
        return encoder
    path = _ckpt_dir(out, "pretrain", mode)
    if not (path / "manifest.json").exists():
        raise UserError(f"no pretraining checkpoint at {path}; run `pretrain` with pretrain.mode={mode} first")
    ckpt = load_checkpoint(path)
    prefix = "encoder."
    encoder.load_state_dict({k[len(prefix) :]: v for k, v in ckpt.params.items() if k.startswith(prefix)})
    return encoder


def build_finetune(out: Path, cfg: ExperimentConfig) -> FinetuneModel:
    encoder = load_pretrained_encoder(out, cfg, cfg.pretrain.mode)
    return FinetuneModel(encoder, cfg.finetune.mats, cfg.rng("init", 1), iat=cfg.finetune.iat)


def load_finetuned(out: Path, cfg: ExperimentConfig) -> FinetuneModel:
    path = _ckpt_dir(out, "finetune", cfg.pretrain.mode)
    if not (path / "manifest.json").exists():
        raise UserError(f"no fine-tuning checkpoint at {path}; run `finetune` first")
    ckpt = load_checkpoint(path, expected_config=cfg.to_dict())
    model = FinetuneModel(
        ViTEncoder(cfg.encoder, cfg.rng("init")), cfg.finetune.mats, cfg.rng("init", 1), iat=cfg.finetune.iat
    )
    model.load_state_dict(ckpt.params)
    for name, value in ckpt.buffers.items():
        if getattr(model, name).shape != value.shape:
            raise UserError(f"buffer {name!r}: checkpoint shape {value.shape} != model shape {getattr(model, name).shape}")
        setattr(model, name, value.astype(getattr(model, name).dtype))
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: ExperimentConfig, out: Path) -> None:
    d = cfg.data
    sizes = {
        "pretrain": d.n_pretrain,
        "finetune": d.n_finetune_train + d.n_finetune_test,
        "association": d.n_association,
    }
    for i, split in enumerate(SPLITS):
        phantoms = build_dataset(cfg.phantom, sizes[split], cfg.seed("data", i))
        save_dataset(phantoms, data_dir(out, split), cfg.phantom)
        log.info("wrote %d phantoms to %s", len(phantoms), data_dir(out, split))


def cmd_pretrain(cfg: ExperimentConfig, out: Path) -> None:
    pc = cfg.pretrain
    if not pc.ablation.any():
        raise NothingToOptimize("nothing to optimize: mode 0 has no pretraining task")
    phantoms = _load_split(out, "pretrain")
    patches = _patches(cfg, phantoms)
    ages = np.array([p.age for p in phantoms])
    model = PretrainModel(pc, cfg.rng("init"))

    def progress(epoch, recs):
        log.info("epoch %d total %.5f", epoch, float(np.mean([r["total"] for r in recs])))

    records = train(model, patches, ages, pc, cfg.seed("mask"), log=progress)
    target = mode_dir(out, "pretrain", pc.mode)
    save_pretrained(target / "checkpoint", model, cfg, len(records))
    write_csv(target / "losses.csv", LOSS_COLUMNS, [[r.get(c) for c in LOSS_COLUMNS] for r in records])
    epochs = sorted({r["epoch"] for r in records})
    keys = ("total", "L_sd", "L_pixel", "L_age", "L_adv_D", "L_adv_G")
    means = {k: epoch_means(records, k) for k in keys}
    rows = []
    for i, e in enumerate(epochs):
        rows.append([e] + [means[k][i] if len(means[k]) == len(epochs) else None for k in keys])
    write_csv(target / "epoch_losses.csv", ("epoch",) + keys, rows)


def cmd_finetune(cfg: ExperimentConfig, out: Path) -> None:
    mode = cfg.pretrain.mode
    train_set, test_set = _finetune_split(cfg, _load_split(out, "finetune"))
    if not test_set:
        raise UserError("the fine-tuning split has no test samples")
    model = build_finetune(out, cfg)
    x_train, y_train = _patches(cfg, train_set), np.array([p.label for p in train_set])
    x_test, y_test = _patches(cfg, test_set), np.array([p.label for p in test_set])
    history = finetune(model, x_train, y_train, cfg.finetune, cfg.seed("mask", 1))
    probs, sel = predict(model, x_test)
    report = classification_metrics((probs[:, 1] > 0.5).astype(int), y_test, probs[:, 1])

    target = mode_dir(out, "finetune", mode)
    save_checkpoint(
        target / "checkpoint",
        Checkpoint(model.state_dict(), model.buffers(), cfg.to_dict(), len(history), {"mode": mode}),
    )
    ft = cfg.finetune
    write_csv(target / "metrics.csv", METRIC_COLUMNS, [[mode, ft.iat, ft.mats.k] + list(report.as_dict().values())])
    write_csv(target / "history.csv", ("epoch", "loss", "train_acc"), [[h["epoch"], h["loss"], h["train_acc"]] for h in history])
    if sel is not None:
        ids = np.arange(len(train_set), len(train_set) + len(test_set))
        write_selection_dump(target / "selections.jsonl", sel, ids)
    log.info("mode %d test ACC %s", mode, report.acc)


def cmd_probe(cfg: ExperimentConfig, out: Path) -> None:
    mode = cfg.pretrain.mode
    train_set, test_set = _finetune_split(cfg, _load_split(out, "finetune"))
    encoder = load_pretrained_encoder(out, cfg, mode)
    f_train = extract_layer_features(encoder, _patches(cfg, train_set))
    f_test = extract_layer_features(encoder, _patches(cfg, test_set))
    y_train = np.array([p.label for p in train_set])
    y_test = np.array([p.label for p in test_set])
    rows = []
    for layer in range(f_train.shape[0]):
        rep = linear_probe(f_train[layer], y_train, f_test[layer], y_test, cfg.probe.reg, cfg.probe.iterations)
        rows.append([mode, layer + 1] + list(rep.as_dict().values()))
    write_csv(mode_dir(out, "probe", mode) / "probe.csv", PROBE_COLUMNS, rows)


def cmd_associate(cfg: ExperimentConfig, out: Path) -> None:
    mode = cfg.pretrain.mode
    phantoms = _load_split(out, "association")
    encoder = load_pretrained_encoder(out, cfg, mode)
    feats = extract_layer_features(encoder, _patches(cfg, phantoms))
    behavior = np.stack([p.behavior for p in phantoms])
    ages = np.array([p.age for p in phantoms])
    a = cfg.association
    target = mode_dir(out, "associate", mode)
    for age_control, name in ((False, "association.csv"), (True, "association_age_control.csv")):
        result = run_association(
            feats,
            behavior,
            cfg.phantom.behavior_names,
            ages,
            repetitions=a.repetitions,
            folds=a.folds,
            age_control=age_control,
            seed=cfg.seed("folds"),
            components=a.components,
            alpha=a.alpha,
            q=a.q,
            pooled=a.pooled,
        )
        write_association_csv(target / name, result)


def cmd_select_stats(cfg: ExperimentConfig, out: Path) -> None:
    mode = cfg.pretrain.mode
    if not cfg.finetune.iat:
        raise UserError("selection statistics need finetune.iat = true")
    phantoms = _load_split(out, "finetune")
    model = load_finetuned(out, cfg)
    _, sel = predict(model, _patches(cfg, phantoms))
    n_tok = cfg.encoder.n_tokens
    freq = selection_frequency(sel.indices, n_tok)
    n = len(phantoms)
    rows = [[layer + 1, tok, int(freq[layer, tok]), freq[layer, tok] / n] for layer in range(freq.shape[0]) for tok in range(n_tok)]
    target = mode_dir(out, "select-stats", mode)
    write_csv(target / "selection_frequency.csv", ("layer", "token", "count", "frequency"), rows)
    write_selection_dump(target / "selections.jsonl", sel, np.arange(n))
    plots.bar_chart(target / "selection_frequency.svg", freq.sum(axis=0), "token selection frequency", "token", "count")


def cmd_report(cfg: ExperimentConfig, out: Path) -> None:
    target = out / "report"
    rows = []
    for path in sorted((out / "finetune").glob("mode*/metrics.csv")):
        header, body = read_csv(path)
        for r in body:
            d = dict(zip(header, r))
            rows.append([d["mode"], "finetune", "", d["acc"], d["sen"], d["spe"], d["auc"]])
    for path in sorted((out / "probe").glob("mode*/probe.csv")):
        header, body = read_csv(path)
        for r in body:
            d = dict(zip(header, r))
            rows.append([d["mode"], "probe", d["layer"], d["acc"], d["sen"], d["spe"], d["auc"]])
    if not rows and not (out / "pretrain").exists():
        raise UserError(f"nothing to report under {out}; run the other commands first")
    write_csv(target / "summary.csv", ("mode", "kind", "layer", "acc", "sen", "spe", "auc"), rows)

    for path in sorted((out / "pretrain").glob("mode*/epoch_losses.csv")):
        header, body = read_csv(path)
        epochs = [float(r[0]) for r in body]
        series = {}
        for col in ("total", "L_pixel"):
            i = header.index(col)
            if all(r[i] != "" for r in body):
                series[col] = (epochs, [float(r[i]) for r in body])
        plots.line_chart(target / f"loss_{path.parent.name}.svg", series, f"pretraining {path.parent.name}", "epoch", "loss")

    mode = cfg.pretrain.mode
    if (out / "data" / "finetune" / "index.json").exists() and (mode == 0 or (_ckpt_dir(out, "pretrain", mode) / "manifest.json").exists()):
        phantoms = _load_split(out, "finetune")
        encoder = load_pretrained_encoder(out, cfg, mode)
        feats = extract_layer_features(encoder, _patches(cfg, phantoms))[-1]
        labels = [p.label for p in phantoms]
        pca = pca_project(feats, 2)
        write_pca_csv(target / f"pca_mode{mode}.csv", range(len(phantoms)), labels, pca)
        plots.scatter(target / f"pca_mode{mode}.svg", pca.coords[:, 0], pca.coords[:, 1], labels, f"last layer, mode {mode}", "pc1", "pc2")


HANDLERS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "associate": cmd_associate,
    "select-stats": cmd_select_stats,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mciat", description="Collaborative pretraining and adaptive-token fine-tuning on phantom volumes.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config field by dotted path; VALUE is parsed as JSON")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="base seed for the data/init/mask/folds streams")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgError(message)


def main(argv=None) -> int:
    parser = build_parser()
    parser.__class__ = _Parser
    try:
        args = parser.parse_args(argv)
    except _ArgError as exc:
        print(f"mciat: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        HANDLERS[args.command](cfg, args.out)
    except (ConfigError, UserError, NothingToOptimize, FileNotFoundError) as exc:
        print(f"mciat {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"mciat {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
