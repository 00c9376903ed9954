"""Collaborative pretraining: masked reconstruction with two projection heads
(branch A), restoration of distorted visible patches (branch B), age
prediction and an adversarial critic, combined as a weighted sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import EncoderConfig, ViTEncoder
from .nn import MLP, Block, LayerNorm, Linear, Module, parameter, trunc_normal
from .optim import AdamW, cosine_warmup_lr, scaled_lr
from .volume import mask_count, random_distortion, sample_mask

PROB_EPS = 1e-7


class NonFiniteLoss(FloatingPointError):
    """A loss component evaluated to NaN or infinity."""


class NothingToOptimize(ValueError):
    """The ablation mode and weights leave no active loss term."""


@dataclass(frozen=True)
class LossWeights:
    sd: float = 0.005
    pixel: float = 0.79
    age: float = 0.1
    adv: float = 0.1

    def __post_init__(self):
        for name in ("sd", "pixel", "age", "adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class AblationMode:
    res_a: bool = True
    age: bool = True
    res_b: bool = True
    adv: bool = True

    @classmethod
    def from_index(cls, index: int) -> "AblationMode":
        """Rows of the ablation table: each mode adds one task to the previous one."""
        if index not in range(5):
            raise ValueError(f"ablation mode must be 0..4, got {index}")
        flags = [False] * 4
        for i in range(index):
            flags[i] = True
        return cls(*flags)

    @property
    def index(self) -> int | None:
        for i in range(5):
            if AblationMode.from_index(i) == self:
                return i
        return None

    def any(self) -> bool:
        return self.res_a or self.age or self.res_b or self.adv


@dataclass(frozen=True)
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    mode: int = 4
    mask_ratio: float = 0.76
    nonlinear_rate: float = 0.9
    batch_size: int = 16
    epochs: int = 500
    warmup_epochs: int = 20
    lr: float | None = None
    weight_decay: float = 0.05
    adv_dim: int = 32
    adv_depth: int = 2
    adv_heads: int = 2
    adv_mlp_ratio: int = 2
    exclude_diagonal: bool = False

    def __post_init__(self):
        AblationMode.from_index(self.mode)
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.nonlinear_rate <= 1.0:
            raise ValueError(f"nonlinear_rate must lie in [0, 1], got {self.nonlinear_rate}")
        if self.batch_size < 1 or self.epochs < 1 or self.warmup_epochs < 0:
            raise ValueError("batch_size and epochs must be >= 1 and warmup_epochs >= 0")
        if self.lr is not None and self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.adv_dim % self.adv_heads:
            raise ValueError(f"critic width {self.adv_dim} is not divisible by {self.adv_heads} heads")

    @property
    def ablation(self) -> AblationMode:
        return AblationMode.from_index(self.mode)

    @property
    def base_lr(self) -> float:
        return self.lr if self.lr is not None else scaled_lr(self.batch_size)


# ---------------------------------------------------------------------------
# modules


class PixelDecoder(Module):
    """Single transformer block with its own positional embedding and a patch-pixel head."""

    def __init__(self, dim, heads, mlp_ratio, n_tokens, patch_len, rng, dtype=np.float32, std=0.02):
        self.pos_embed = parameter(trunc_normal(rng, (n_tokens, dim), std, dtype))
        self.block = Block(dim, heads, mlp_ratio, rng, dtype, std)
        self.norm = LayerNorm(dim, dtype)
        self.head = Linear(dim, patch_len, rng, dtype, std=std)

    def __call__(self, tokens: Tensor, positions) -> Tensor:
        return self.head(self.features(tokens, positions))

    def features(self, tokens: Tensor, positions) -> Tensor:
        """Normed block output before the pixel head."""
        return ag.add(ag.mul(self.standardized(tokens, positions), self.norm.gain), self.norm.bias)

    def standardized(self, tokens: Tensor, positions) -> Tensor:
        """Block output after layer normalization but before the norm's gain and bias."""
        positions = np.asarray(positions)
        if positions.shape != tokens.shape[:2]:
            positions = np.broadcast_to(positions, tokens.shape[:2])
        x, _ = self.block(ag.add(tokens, ag.gather(self.pos_embed, positions)))
        return ag.layer_norm(x)


class AgeDecoder(Module):
    def __init__(self, dim, heads, mlp_ratio, rng, dtype=np.float32, std=0.02):
        self.block = Block(dim, heads, mlp_ratio, rng, dtype, std)
        self.norm = LayerNorm(dim, dtype)
        self.head = Linear(dim, 1, rng, dtype, std=std)

    def __call__(self, tokens: Tensor) -> Tensor:
        x, _ = self.block(tokens)
        pooled = ag.mean(x, axis=1)
        return ag.reshape(self.head(self.norm(pooled)), (tokens.shape[0],))


class Discriminator(Module):
    """Small transformer critic: patches -> tokens -> blocks -> mean pool -> probability."""

    def __init__(self, n_tokens, patch_len, dim, depth, heads, mlp_ratio, rng, dtype=np.float32, std=0.02):
        self.patch_embed = Linear(patch_len, dim, rng, dtype, std=std)
        self.pos_embed = parameter(trunc_normal(rng, (n_tokens, dim), std, dtype))
        self.blocks = [Block(dim, heads, mlp_ratio, rng, dtype, std) for _ in range(depth)]
        self.norm = LayerNorm(dim, dtype)
        self.head = Linear(dim, 1, rng, dtype, std=std)

    def __call__(self, patches: Tensor) -> Tensor:
        b, n, _ = patches.shape
        x = ag.add(self.patch_embed(patches), self.pos_embed)
        for block in self.blocks:
            x, _ = block(x)
        logit = self.head(self.norm(ag.mean(x, axis=1)))
        return ag.sigmoid(ag.reshape(logit, (b,)))


class PretrainHeads(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32, std=0.02):
        d = cfg.dim
        self.h_a1 = MLP(d, d, d, rng, dtype, std)
        self.h_a2 = MLP(d, d, d, rng, dtype, std)
        self.h_b = MLP(d, d, d, rng, dtype, std)
        self.dec_a = PixelDecoder(d, cfg.heads, cfg.mlp_ratio, cfg.n_tokens, cfg.patch_len, rng, dtype, std)
        self.dec_b = PixelDecoder(d, cfg.heads, cfg.mlp_ratio, cfg.n_tokens, cfg.patch_len, rng, dtype, std)
        self.dec_age = AgeDecoder(d, cfg.heads, cfg.mlp_ratio, rng, dtype, std)
        self.z_mask = parameter(trunc_normal(rng, (1, d), std, dtype))


class PretrainModel(Module):
    def __init__(self, cfg: PretrainConfig, rng: np.random.Generator, dtype=np.float32, std: float = 0.02):
        enc = cfg.encoder
        self.encoder = ViTEncoder(enc, rng, dtype, std)
        self.heads = PretrainHeads(enc, rng, dtype, std)
        self.disc = Discriminator(
            enc.n_tokens, enc.patch_len, cfg.adv_dim, cfg.adv_depth, cfg.adv_heads, cfg.adv_mlp_ratio, rng, dtype, std
        )
        self.age_mean = 0.0
        self.age_std = 1.0

    def generator_parameters(self, mode: AblationMode) -> list[Tensor]:
        h = self.heads
        params = self.encoder.parameters()
        if mode.res_a:
            params += h.h_a1.parameters() + h.h_a2.parameters() + h.dec_a.parameters() + [h.z_mask]
        if mode.res_b:
            params += h.h_b.parameters() + h.dec_b.parameters()
        if mode.age:
            params += h.dec_age.parameters()
        return params


# ---------------------------------------------------------------------------
# losses


def _log_prob(p: Tensor) -> Tensor:
    return ag.log(ag.clip(p, PROB_EPS, 1.0 - PROB_EPS))


def project_dual(heads: PretrainHeads, y_vis: Tensor) -> tuple[Tensor, Tensor]:
    return heads.h_a1(y_vis), heads.h_a2(y_vis)


def semantic_diversity_loss(z_a1: Tensor, z_a2: Tensor, exclude_diagonal: bool = False) -> Tensor:
    """Mean of -log sigmoid(G1) - log(1 - sigmoid(G2)) over Gram entries, G = z z^T."""
    if z_a1.shape != z_a2.shape:
        raise ag.ShapeError(f"semantic diversity: {z_a1.shape} vs {z_a2.shape}")
    g1 = ag.matmul(z_a1, ag.transpose(z_a1))
    g2 = ag.matmul(z_a2, ag.transpose(z_a2))
    terms = ag.add(ag.mul(_log_prob(ag.sigmoid(g1)), -1.0), ag.mul(_log_prob(ag.sub(1.0, ag.sigmoid(g2))), -1.0))
    if not exclude_diagonal:
        return ag.mean(terms)
    n = terms.shape[-1]
    if n < 2:
        raise ValueError("excluding the Gram diagonal needs at least two tokens")
    off = 1.0 - np.eye(n, dtype=terms.dtype)
    batch = int(np.prod(terms.shape[:-2])) if terms.ndim > 2 else 1
    return ag.mul(ag.sum_(ag.mul(terms, off)), 1.0 / (batch * n * (n - 1)))


@dataclass
class BatchPlan:
    """Mask plans stacked for a batch: every sample has the same visible/masked counts."""

    visible: np.ndarray  # (B, n_vis)
    masked: np.ndarray  # (B, n_mask)

    @classmethod
    def from_plans(cls, plans) -> "BatchPlan":
        return cls(np.stack([p.visible for p in plans]), np.stack([p.masked for p in plans]))

    @property
    def restore(self) -> np.ndarray:
        return np.argsort(np.concatenate([self.visible, self.masked], axis=1), axis=1, kind="stable")

    @property
    def n_tokens(self) -> int:
        return self.visible.shape[1] + self.masked.shape[1]


def _fill_mask_tokens(z_mask: Tensor, batch: int, count: int) -> Tensor:
    return ag.gather(z_mask, np.zeros((batch, count), dtype=np.intp))


def _scatter_to_grid(z_vis: Tensor, z_mask: Tensor, plan: BatchPlan) -> Tensor:
    b, nm = plan.masked.shape
    seq = ag.concat([z_vis, _fill_mask_tokens(z_mask, b, nm)], axis=1)
    return ag.take_rows(seq, plan.restore)


def decode_masked_branch_a(heads: PretrainHeads, z_a1: Tensor, z_a2: Tensor, plan: BatchPlan) -> Tensor:
    """D_A(z_A1 + mask tokens) - D_A(z_A2 + mask tokens), read at the masked positions."""
    if z_a1.shape[:2] != plan.visible.shape:
        raise ag.ShapeError(f"branch A: embeddings {z_a1.shape} do not match plan {plan.visible.shape}")
    b = z_a1.shape[0]
    both = BatchPlan(np.concatenate([plan.visible, plan.visible]), np.concatenate([plan.masked, plan.masked]))
    grid = _scatter_to_grid(ag.concat([z_a1, z_a2], axis=0), heads.z_mask, both)
    feats = heads.dec_a.standardized(grid, np.arange(plan.n_tokens))
    diff = ag.sub(ag.gather(feats, np.arange(b)), ag.gather(feats, np.arange(b, 2 * b)))
    # the norm's shift and the pixel head's bias both cancel in the difference
    diff = ag.mul(ag.take_rows(diff, plan.masked), heads.dec_a.norm.gain)
    return ag.matmul(diff, heads.dec_a.head.weight)


def restore_visible_branch_b(model: PretrainModel, distorted_vis, plan: BatchPlan) -> Tensor:
    y = model.encoder(distorted_vis, plan.visible).output
    return model.heads.dec_b(model.heads.h_b(y), plan.visible)


def predict_age(heads: PretrainHeads, y_vis: Tensor) -> Tensor:
    if y_vis.shape[1] == 0:
        raise ValueError("age prediction needs at least one visible token")
    return heads.dec_age(y_vis)


def assemble_patches(masked_preds: Tensor, visible_preds: Tensor, plan: BatchPlan) -> Tensor:
    """Full patch set in grid order from the two disjoint prediction sets."""
    return ag.take_rows(ag.concat([visible_preds, masked_preds], axis=1), plan.restore)


def critic_loss(disc: Discriminator, x_real, x_fake: Tensor) -> Tensor:
    """-[log D(x) + log(1 - D(x_restored))] with the restoration detached."""
    x_real = ag.as_tensor(x_real, like=x_fake)
    b = x_real.shape[0]
    probs = disc(ag.concat([x_real, x_fake.detach()], axis=0))
    p_real = ag.gather(probs, np.arange(b))
    p_fake = ag.gather(probs, np.arange(b, 2 * b))
    return ag.mul(ag.mean(ag.add(_log_prob(p_real), _log_prob(ag.sub(1.0, p_fake)))), -1.0)


def generator_loss(disc: Discriminator, x_fake: Tensor) -> Tensor:
    """Non-saturating generator term -log D(x_restored)."""
    return ag.mul(ag.mean(_log_prob(disc(x_fake))), -1.0)


def adversarial_losses(disc: Discriminator, x_real, x_fake: Tensor) -> tuple[Tensor, Tensor]:
    return critic_loss(disc, x_real, x_fake), generator_loss(disc, x_fake)


def total_pretrain_loss(components: dict, weights: LossWeights, mode: AblationMode) -> Tensor:
    """Weighted sum over active components (keys ``sd``, ``pixel``, ``age``, ``adv``)."""
    for name in ("sd", "pixel", "age", "adv"):
        if getattr(weights, name) < 0:
            raise ValueError(f"loss weight {name} must be >= 0")
    active = {
        "sd": mode.res_a,
        "pixel": mode.res_a or mode.res_b,
        "age": mode.age,
        "adv": mode.adv,
    }
    total = None
    for name, on in active.items():
        if not on or components.get(name) is None:
            continue
        term = ag.mul(components[name], getattr(weights, name))
        total = term if total is None else ag.add(total, term)
    if total is None:
        return Tensor(np.zeros((), dtype=np.float64))
    return total


# ---------------------------------------------------------------------------
# forward pass over a batch


@dataclass
class PretrainBatch:
    patches: np.ndarray  # (B, N, P) ground truth
    ages: np.ndarray  # (B,) normalized targets
    plan: BatchPlan
    distorted: np.ndarray  # (B, n_vis, P) T(x_vis)


def make_batch(patches: np.ndarray, ages_norm: np.ndarray, mask_ratio: float, nonlinear_rate: float, rng) -> PretrainBatch:
    n = patches.shape[1]
    plans = [sample_mask(n, mask_ratio, rng) for _ in range(len(patches))]
    plan = BatchPlan.from_plans(plans)
    x_vis = np.take_along_axis(patches, plan.visible[:, :, None], axis=1)
    distorted = np.stack([random_distortion(v, nonlinear_rate, rng) for v in x_vis])
    return PretrainBatch(patches, np.asarray(ages_norm), plan, distorted.astype(patches.dtype))


def forward_components(model: PretrainModel, batch: PretrainBatch, cfg: PretrainConfig) -> tuple[dict, Tensor | None]:
    """Generator-side loss components and the assembled restoration (as patches)."""
    mode = cfg.ablation
    heads = model.heads
    plan = batch.plan
    x_all = batch.patches
    x_vis = np.take_along_axis(x_all, plan.visible[:, :, None], axis=1)
    x_mask = np.take_along_axis(x_all, plan.masked[:, :, None], axis=1)
    comps: dict = {}
    y_vis = None
    if mode.res_a or mode.age:
        y_vis = model.encoder(x_vis, plan.visible).output
    if mode.res_a:
        z1, z2 = project_dual(heads, y_vis)
        comps["sd"] = semantic_diversity_loss(z1, z2, cfg.exclude_diagonal)
        masked_pred = decode_masked_branch_a(heads, z1, z2, plan)
    else:
        masked_pred = Tensor(x_mask)
    if mode.res_b:
        visible_pred = restore_visible_branch_b(model, batch.distorted, plan)
    else:
        visible_pred = Tensor(x_vis)
    fake = None
    if mode.res_a or mode.res_b:
        fake = assemble_patches(masked_pred, visible_pred, plan)
        comps["pixel"] = ag.mse_loss(fake, x_all)
    if mode.age:
        comps["age"] = ag.mse_loss(predict_age(heads, y_vis), batch.ages.astype(x_all.dtype))
    return comps, fake


def composite_loss(model: PretrainModel, batch: PretrainBatch, cfg: PretrainConfig) -> Tensor:
    """Full weighted objective with the generator-side adversarial term."""
    comps, fake = forward_components(model, batch, cfg)
    if cfg.ablation.adv:
        fake = fake if fake is not None else Tensor(batch.patches)
        comps["adv"] = generator_loss(model.disc, fake)
    return total_pretrain_loss(comps, cfg.weights, cfg.ablation)


# ---------------------------------------------------------------------------
# training


def _check_trainable(cfg: PretrainConfig) -> None:
    mode, w = cfg.ablation, cfg.weights
    live = (
        (mode.res_a and (w.sd > 0 or w.pixel > 0))
        or (mode.res_b and w.pixel > 0)
        or (mode.age and w.age > 0)
        or (mode.adv and w.adv > 0)
    )
    if not live:
        raise NothingToOptimize("nothing to optimize: ablation mode and loss weights leave no active term")


@dataclass
class PretrainState:
    model: PretrainModel
    cfg: PretrainConfig
    gen_opt: AdamW
    disc_opt: AdamW | None
    total_steps: int
    warmup_steps: int
    step: int = 0

    @classmethod
    def create(cls, model: PretrainModel, cfg: PretrainConfig, steps_per_epoch: int) -> "PretrainState":
        _check_trainable(cfg)
        mode = cfg.ablation
        gen = AdamW(model.generator_parameters(mode), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
        disc = AdamW(model.disc.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay) if mode.adv else None
        total = max(1, cfg.epochs * steps_per_epoch)
        warm = min(cfg.warmup_epochs * steps_per_epoch, total - 1)
        return cls(model, cfg, gen, disc, total, warm)

    def lr(self) -> float:
        # +1 so the very first update does not use a zero learning rate
        return cosine_warmup_lr(self.step + 1, self.warmup_steps, self.total_steps, self.cfg.base_lr)


def _finite(name: str, t: Tensor) -> float:
    v = float(t.item())
    if not math.isfinite(v):
        raise NonFiniteLoss(f"non-finite loss in component {name}: {v}")
    return v


def pretrain_step(batch: PretrainBatch, state: PretrainState) -> dict:
    """One critic update (fake detached) followed by one encoder/decoder update."""
    model, cfg = state.model, state.cfg
    mode = cfg.ablation
    _check_trainable(cfg)
    lr = state.lr()
    comps, fake = forward_components(model, batch, cfg)
    record = {"step": state.step + 1, "L_sd": None, "L_pixel": None, "L_age": None, "L_adv_D": None, "L_adv_G": None}
    if mode.adv:
        fake = fake if fake is not None else Tensor(batch.patches)
        state.disc_opt.zero_grad()
        loss_d = critic_loss(model.disc, batch.patches, fake)
        record["L_adv_D"] = _finite("adv_D", loss_d)
        ag.backward(loss_d, state.disc_opt.params)
        state.disc_opt.step(lr)
        comps["adv"] = generator_loss(model.disc, fake)
        record["L_adv_G"] = _finite("adv_G", comps["adv"])
    for key, col in (("sd", "L_sd"), ("pixel", "L_pixel"), ("age", "L_age")):
        if key in comps:
            record[col] = _finite(key, comps[key])
    total = total_pretrain_loss(comps, cfg.weights, mode)
    record["total"] = _finite("total", total)
    state.gen_opt.zero_grad()
    ag.backward(total, state.gen_opt.params)
    state.gen_opt.step(lr)
    # the generator pass also reached the critic; drop those gradients
    if state.disc_opt is not None:
        state.disc_opt.zero_grad()
    state.step += 1
    record["lr"] = lr
    return record


def normalize_ages(model: PretrainModel, ages: np.ndarray) -> np.ndarray:
    return (np.asarray(ages, dtype=float) - model.age_mean) / model.age_std


def train(
    model: PretrainModel,
    patches: np.ndarray,
    ages: np.ndarray,
    cfg: PretrainConfig,
    mask_seed: int,
    log=None,
) -> list[dict]:
    """Run ``cfg.epochs`` epochs of pretraining; returns one record per step."""
    n = len(patches)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    model.age_mean = float(np.mean(ages))
    model.age_std = float(np.std(ages)) or 1.0
    targets = normalize_ages(model, ages)
    state = PretrainState.create(model, cfg, steps_per_epoch)
    rng = np.random.default_rng((mask_seed, 0x6D61736B))
    records = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * bs : (s + 1) * bs]
            batch = make_batch(patches[idx], targets[idx], cfg.mask_ratio, cfg.nonlinear_rate, rng)
            rec = pretrain_step(batch, state)
            rec["epoch"] = epoch + 1
            records.append(rec)
        if log is not None:
            log(epoch + 1, records[-steps_per_epoch:])
    return records


def epoch_means(records: list[dict], key: str) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for r in records:
        if r.get(key) is not None:
            by_epoch.setdefault(r["epoch"], []).append(r[key])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def predict_ages(model: PretrainModel, patches: np.ndarray, mask_ratio: float, seed: int) -> np.ndarray:
    """Age predictions in years from one seeded random mask per sample."""
    rng = np.random.default_rng((seed, 0x616765))
    n = patches.shape[1]
    out = []
    with ag.no_grad():
        for start in range(0, len(patches), 32):
            chunk = patches[start : start + 32]
            plan = BatchPlan.from_plans([sample_mask(n, mask_ratio, rng) for _ in range(len(chunk))])
            x_vis = np.take_along_axis(chunk, plan.visible[:, :, None], axis=1)
            y = model.encoder(x_vis, plan.visible).output
            out.append(predict_age(model.heads, y).data)
    return np.concatenate(out) * model.age_std + model.age_mean


def visible_count(n_tokens: int, mask_ratio: float) -> int:
    return n_tokens - mask_count(n_tokens, mask_ratio)
