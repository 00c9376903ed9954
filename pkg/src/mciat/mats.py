"""Mutual-attention token selection and individual-adaptive-token fine-tuning.

A learnable guider token is prepended to the patch tokens. In every layer
the guider's attention toward each token (softmax over row 0) is multiplied
by that token's attention toward the guider (softmax over column 0); the
``k`` best patch tokens per layer are gathered and classified together.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import EncoderConfig, ViTEncoder
from .nn import AttentionMaps, Linear, Module, parameter, trunc_normal
from .optim import AdamW, cosine_warmup_lr

SCORE_SOURCES = ("pre", "post")


@dataclass(frozen=True)
class MATSConfig:
    k: int = 3
    score_source: str = "pre"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.score_source not in SCORE_SOURCES:
            raise ValueError(f"score_source must be one of {SCORE_SOURCES}, got {self.score_source!r}")


@dataclass
class SelectionResult:
    """Per-layer scores over the N patch tokens and the chosen indices.

    ``scores`` has shape (L, B, N); ``indices`` has shape (L, B, k) and holds
    patch-token positions (0-based, guider excluded), ascending per row.
    """

    scores: np.ndarray
    indices: np.ndarray

    @property
    def selected_scores(self) -> np.ndarray:
        return np.take_along_axis(self.scores, self.indices, axis=-1)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def score_factors(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-0 and column-0 softmax of ``a``, each over all N+1 positions."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2] or a.shape[-1] < 2:
        raise ag.ShapeError(f"mutual attention needs (..., N+1, N+1) scores with N >= 1, got {a.shape}")
    return _softmax(a[..., 0, :]), _softmax(a[..., :, 0])


def mutual_attention_scores(a: np.ndarray) -> np.ndarray:
    """S_i for patch tokens i = 1..N, returned at positions 0..N-1."""
    row, col = score_factors(a)
    return row[..., 1:] * col[..., 1:]


def select_tokens(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` positions along the last axis; ties go to the lower index; result ascending."""
    scores = np.asarray(scores)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"cannot select k={k} tokens out of {n}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


def layer_scores(maps: AttentionMaps, source: str = "pre") -> np.ndarray:
    if source == "pre":
        return maps.scores
    if source == "post":
        return maps.weights.mean(axis=1)
    raise ValueError(f"unknown score source {source!r}")


def select_from_records(records: list[AttentionMaps], k: int, source: str = "pre") -> SelectionResult:
    scores = np.stack([mutual_attention_scores(layer_scores(m, source)) for m in records])
    return SelectionResult(scores, select_tokens(scores, k))


def gather_selected(layers: list[Tensor], indices: np.ndarray, offset: int = 1) -> Tensor:
    """Concatenate the selected rows of every layer snapshot in (layer, index) order.

    ``layers`` are (B, n, d) snapshots whose row ``offset + i`` holds patch token ``i``.
    Returns a (B, L*k*d) tensor.
    """
    indices = np.asarray(indices)
    if indices.ndim != 3 or indices.shape[0] != len(layers):
        raise ag.ShapeError(f"selection of shape {indices.shape} does not match {len(layers)} layers")
    b, k = indices.shape[1:]
    parts = []
    for x, idx in zip(layers, indices):
        if idx.min() < 0 or idx.max() + offset >= x.shape[1]:
            raise IndexError(f"selected index out of range for {x.shape[1] - offset} patch tokens")
        parts.append(ag.take_rows(x, idx + offset))
    joined = ag.concat(parts, axis=1)
    return ag.reshape(joined, (b, len(layers) * k * joined.shape[-1]))


def classify_selected(classifier: Linear, layers: list[Tensor], indices: np.ndarray, offset: int = 1) -> Tensor:
    feats = gather_selected(layers, indices, offset)
    if feats.shape[-1] != classifier.weight.shape[0]:
        raise ag.ShapeError(f"classifier expects {classifier.weight.shape[0]} inputs, got {feats.shape[-1]}")
    return classifier(feats)


# ---------------------------------------------------------------------------
# fine-tuning model


class FinetuneModel(Module):
    """Encoder plus guider token and a linear classifier over selected tokens.

    With ``iat=False`` the guider is dropped and the classifier sees the
    mean-pooled, normed output of the last layer instead.
    """

    def __init__(
        self,
        encoder: ViTEncoder,
        mats: MATSConfig,
        rng: np.random.Generator,
        n_classes: int = 2,
        iat: bool = True,
        std: float = 0.02,
    ):
        cfg = encoder.config
        if iat and mats.k > cfg.n_tokens:
            raise ValueError(f"cannot select k={mats.k} tokens out of {cfg.n_tokens}")
        dtype = encoder.pos_embed.dtype
        self.encoder = encoder
        self.mats = mats
        self.iat = iat
        self.n_classes = n_classes
        if iat:
            self.guider = parameter(trunc_normal(rng, (1, cfg.dim), std, dtype))
            self.classifier = Linear(cfg.depth * mats.k * cfg.dim, n_classes, rng, dtype, std=std)
        else:
            self.classifier = Linear(cfg.dim, n_classes, rng, dtype, std=std)
        # fixed per-position standardization of the classifier input; see ``calibrate``
        shape = (cfg.depth, cfg.n_tokens, cfg.dim) if iat else (cfg.dim,)
        self.feat_mean = np.zeros(shape, dtype=dtype)
        self.feat_scale = np.ones(shape, dtype=dtype)

    def _encode(self, patches) -> tuple[Tensor, list[Tensor], list[AttentionMaps] | None]:
        patches = ag.as_tensor(patches, like=self.encoder.pos_embed)
        b, n = patches.shape[:2]
        tokens = self.encoder.embed(patches, np.arange(n))
        if not self.iat:
            enc = self.encoder.encode(tokens)
            return enc.output, enc.layers, None
        guide = ag.gather(self.guider, np.zeros((b, 1), dtype=np.intp))
        enc = self.encoder.encode(ag.concat([guide, tokens], axis=1), collect=True)
        return enc.output, enc.layers, enc.attention

    def forward(self, patches) -> tuple[Tensor, SelectionResult | None]:
        output, layers, maps = self._encode(patches)
        if not self.iat:
            pooled = ag.mean(output, axis=1)
            return self.classifier(ag.mul(ag.sub(pooled, self.feat_mean), 1.0 / self.feat_scale)), None
        sel = select_from_records(maps, self.mats.k, self.mats.score_source)
        normed = []
        for l, (x, idx) in enumerate(zip(layers, sel.indices)):
            rows = ag.take_rows(x, idx + 1)
            normed.append(ag.mul(ag.sub(rows, self.feat_mean[l][idx]), 1.0 / self.feat_scale[l][idx]))
        feats = gather_selected(normed, np.broadcast_to(np.arange(self.mats.k), sel.indices.shape), offset=0)
        return self.classifier(feats), sel

    def __call__(self, patches) -> Tensor:
        return self.forward(patches)[0]

    def calibrate(self, patches, batch_size: int = 32) -> None:
        """Freeze the classifier-input standardization at the current encoder.

        Token features vary between samples far less than they differ from
        zero, so the linear head is badly conditioned on raw snapshots. Each
        patch position in each layer is centred on its mean over ``patches``
        and every layer is divided by the RMS of its centred features.
        """
        chunks = []
        with ag.no_grad():
            for i in range(0, len(patches), batch_size):
                output, layers, _ = self._encode(patches[i : i + batch_size])
                if self.iat:
                    chunks.append(np.stack([x.data[:, 1:] for x in layers], axis=1))
                else:
                    chunks.append(output.data.mean(axis=1))
        feats = np.concatenate(chunks).astype(np.float64)
        mean = feats.mean(axis=0)
        centred = feats - mean
        if self.iat:
            # one scale per layer: near-constant background positions stay small
            rms = np.sqrt((centred**2).mean(axis=(0, 2, 3)))[:, None, None]
        else:
            rms = np.sqrt((centred**2).mean())
        rms = np.where(rms > 1e-12, rms, 1.0)
        self.feat_mean = mean.astype(self.feat_mean.dtype)
        self.feat_scale = np.broadcast_to(rms, mean.shape).astype(self.feat_scale.dtype)

    def buffers(self) -> dict[str, np.ndarray]:
        return {"feat_mean": self.feat_mean, "feat_scale": self.feat_scale}


@dataclass(frozen=True)
class FinetuneConfig:
    mats: MATSConfig = MATSConfig()
    iat: bool = True
    epochs: int = 50
    warmup_epochs: int = 5
    batch_size: int = 16
    lr: float = 1e-3
    encoder_lr_scale: float = 0.01
    weight_decay: float = 0.05
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.encoder_lr_scale < 0:
            raise ValueError(f"encoder_lr_scale must be >= 0, got {self.encoder_lr_scale}")


def check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.all(np.isin(labels, np.arange(n_classes))):
        raise ValueError(f"labels must be integers in 0..{n_classes - 1}")
    return labels.astype(np.intp)


def head_parameters(model: FinetuneModel) -> list[Tensor]:
    """Parameters that are new at fine-tuning time: the classifier and the guider."""
    params = model.classifier.parameters()
    if model.iat:
        params.append(model.guider)
    return params


def finetune(
    model: FinetuneModel,
    patches: np.ndarray,
    labels,
    cfg: FinetuneConfig,
    seed: int,
    log=None,
) -> list[dict]:
    """Train with cross-entropy; selection is recomputed on every forward pass.

    Returns one record per epoch with the mean loss and the training accuracy
    of the predictions made during that epoch.
    """
    labels = check_labels(labels, model.n_classes)
    if len(labels) != len(patches):
        raise ValueError(f"{len(patches)} samples but {len(labels)} labels")
    n = len(patches)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = cfg.epochs * steps_per_epoch
    warm = min(cfg.warmup_epochs * steps_per_epoch, total - 1)
    head_opt = AdamW(head_parameters(model), lr=cfg.lr, weight_decay=cfg.weight_decay)
    enc_lr = 0.0 if cfg.freeze_encoder else cfg.lr * cfg.encoder_lr_scale
    enc_opt = AdamW(model.encoder.parameters(), lr=enc_lr, weight_decay=cfg.weight_decay) if enc_lr > 0 else None
    all_params = model.parameters()
    rng = np.random.default_rng((seed, 0x66696E65))
    step = 0
    records = []
    for epoch in range(cfg.epochs):
        # the encoder moves, so the head-input centring is refreshed every epoch
        model.calibrate(patches)
        order = rng.permutation(n)
        losses, correct = [], 0
        for s in range(steps_per_epoch):
            idx = order[s * bs : (s + 1) * bs]
            logits = model(patches[idx])
            loss = ag.cross_entropy(logits, labels[idx])
            value = float(loss.item())
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite fine-tuning loss at epoch {epoch + 1}")
            for p in all_params:
                p.zero_grad()
            ag.backward(loss, all_params)
            factor = cosine_warmup_lr(step + 1, warm, total, 1.0)
            head_opt.step(cfg.lr * factor)
            if enc_opt is not None:
                enc_opt.step(enc_lr * factor)
            step += 1
            losses.append(value * len(idx))
            correct += int(np.sum(logits.data.argmax(axis=1) == labels[idx]))
        rec = {"epoch": epoch + 1, "loss": sum(losses) / n, "train_acc": correct / n}
        records.append(rec)
        if log is not None:
            log(rec)
    return records


def predict(model: FinetuneModel, patches: np.ndarray, batch_size: int = 32) -> tuple[np.ndarray, SelectionResult | None]:
    """Class probabilities (float64) and the selections made for each sample."""
    probs, scores, indices = [], [], []
    with ag.no_grad():
        for start in range(0, len(patches), batch_size):
            logits, sel = model.forward(patches[start : start + batch_size])
            probs.append(ag.softmax(ag.Tensor(logits.data.astype(np.float64)), axis=-1).data)
            if sel is not None:
                scores.append(sel.scores)
                indices.append(sel.indices)
    result = SelectionResult(np.concatenate(scores, axis=1), np.concatenate(indices, axis=1)) if scores else None
    return np.concatenate(probs), result


def selection_frequency(indices: np.ndarray, n_tokens: int) -> np.ndarray:
    """(L, N) counts of how often each patch token was chosen in each layer."""
    indices = np.asarray(indices)
    out = np.zeros((indices.shape[0], n_tokens), dtype=np.int64)
    for layer, idx in enumerate(indices):
        out[layer] = np.bincount(idx.ravel(), minlength=n_tokens)
    return out


def write_selection_dump(path, selection: SelectionResult, sample_ids) -> Path:
    """One JSON object per (sample, layer): sample id, layer, indices and their scores."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    picked = selection.selected_scores
    lines = []
    for b, sid in enumerate(sample_ids):
        for layer in range(selection.indices.shape[0]):
            row = {
                "sample": int(sid),
                "layer": layer + 1,
                "indices": [int(i) for i in selection.indices[layer, b]],
                "scores": [float(v) for v in picked[layer, b]],
            }
            lines.append(json.dumps(row, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_selection_dump(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def build_finetune_model(
    encoder_cfg: EncoderConfig,
    cfg: FinetuneConfig,
    rng: np.random.Generator,
    encoder_state: dict | None = None,
) -> FinetuneModel:
    """Fresh encoder (optionally loaded from pretrained weights) plus new guider and head."""
    encoder = ViTEncoder(encoder_cfg, rng)
    if encoder_state is not None:
        encoder.load_state_dict(encoder_state)
    return FinetuneModel(encoder, cfg.mats, rng, iat=cfg.iat)
