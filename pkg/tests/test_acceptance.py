"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the terminal summary prints under
"acceptance". The pretraining run behind criteria 3, 5 and 6 is shared
through a session fixture.
"""

import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np
import pytest

from mciat import autograd as ag
from mciat.analysis import (
    auc_score,
    age_decorrelate_features,
    classification_metrics,
    extract_layer_features,
    fdr_bh,
    linear_probe,
    pearson_r,
    plsr_fit,
    run_association,
)
from mciat.cli import main
from mciat.config import ExperimentConfig
from mciat.encoder import EncoderConfig, ViTEncoder
from mciat.mats import FinetuneModel, finetune, mutual_attention_scores, predict, select_tokens
from mciat.pretrain import (
    PretrainConfig,
    PretrainModel,
    composite_loss,
    critic_loss,
    epoch_means,
    forward_components,
    generator_loss,
    make_batch,
    predict_ages,
    total_pretrain_loss,
    train,
)
from mciat.synth import build_dataset
from mciat.volume import PatchGrid, patchify, sample_mask

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, str] = {}
TITLES = {
    1: "gradient fidelity",
    2: "structural constants",
    3: "pretraining learns",
    4: "MATS correctness",
    5: "fine-tuning and probe",
    6: "association pipeline",
    7: "statistical oracles",
    8: "CLI determinism",
}


@contextmanager
def criterion(n: int):
    """Record PASS when the block completes, FAIL with the first error otherwise."""
    details: list[str] = []
    try:
        yield details
    except BaseException as exc:
        first = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        RESULTS[n] = f"FAIL  {first}"
        raise
    RESULTS[n] = "PASS  " + "; ".join(details)


# ---------------------------------------------------------------------------
# shared reference run


@dataclass
class Reference:
    cfg: ExperimentConfig
    model: PretrainModel
    records: list
    seconds: float
    splits: dict


def reference_splits(cfg: ExperimentConfig) -> dict:
    """The three datasets the ``generate`` command would write for ``cfg``."""
    d = cfg.data
    sizes = {"pretrain": d.n_pretrain, "finetune": d.n_finetune_train + d.n_finetune_test, "association": d.n_association}
    grid = PatchGrid(cfg.phantom.patch, cfg.phantom.shape)
    out = {}
    for i, (name, n) in enumerate(sizes.items()):
        phantoms = build_dataset(cfg.phantom, n, cfg.seed("data", i))
        out[name] = (phantoms, np.stack([patchify(p.volume, grid) for p in phantoms]))
    return out


def reference_pretraining(cfg: ExperimentConfig, log=None) -> Reference:
    splits = reference_splits(cfg)
    phantoms, patches = splits["pretrain"]
    model = PretrainModel(cfg.pretrain, cfg.rng("init"))
    start = time.perf_counter()
    records = train(model, patches, np.array([p.age for p in phantoms]), cfg.pretrain, cfg.seed("mask"), log=log)
    return Reference(cfg, model, records, time.perf_counter() - start, splits)


def encoder_for(ref: Reference, mode: int) -> ViTEncoder:
    """A fresh copy of the pretrained encoder (mode 4) or of its random initialisation (mode 0)."""
    encoder = ViTEncoder(ref.cfg.encoder, ref.cfg.rng("init"))
    if mode != 0:
        encoder.load_state_dict(ref.model.encoder.state_dict())
    return encoder


@pytest.fixture(scope="session")
def reference():
    return reference_pretraining(ExperimentConfig())


# ---------------------------------------------------------------------------
# 1. gradient fidelity


def test_gradient_fidelity():
    with criterion(1) as details:
        start = time.perf_counter()
        enc = EncoderConfig(dim=4, depth=1, heads=2, mlp_ratio=2, patch_len=8, n_tokens=8)
        cfg = PretrainConfig(encoder=enc, mask_ratio=0.5, batch_size=2, adv_dim=4, adv_depth=1, adv_heads=2, adv_mlp_ratio=2)
        model = PretrainModel(cfg, np.random.default_rng(0), dtype=np.float64, std=0.5)
        gen = np.random.default_rng(1)
        x = gen.random((2, 8, 8))
        batch = make_batch(x, gen.standard_normal(2), 0.5, 1.0, gen)
        h, encoder = model.heads, model.encoder.parameters()

        def component(key):
            return lambda: forward_components(model, batch, cfg)[0][key]

        def fake():
            return forward_components(model, batch, cfg)[1]

        checks = {
            "sd": (component("sd"), encoder + h.h_a1.parameters() + h.h_a2.parameters()),
            "pixel": (component("pixel"), model.generator_parameters(cfg.ablation)),
            "age": (component("age"), encoder + h.dec_age.parameters()),
            "adv_D": (lambda: critic_loss(model.disc, x, fake()), model.disc.parameters()),
            "adv_G": (lambda: generator_loss(model.disc, fake()), model.parameters()),
            "total": (lambda: composite_loss(model, batch, cfg), model.parameters()),
        }
        errors = {name: ag.grad_check(f, params) for name, (f, params) in checks.items()}
        elapsed = time.perf_counter() - start
        details += [f"max rel err {max(errors.values()):.1e}", f"{elapsed:.0f} s"]
        for name, err in errors.items():
            assert err < 1e-5, f"{name}: relative error {err:.2e}"
        assert elapsed < 120, f"grad checks took {elapsed:.0f} s"


# ---------------------------------------------------------------------------
# 2. structural constants


def test_structural_constants():
    with criterion(2) as details:
        cfg = ExperimentConfig()
        grid = PatchGrid(cfg.phantom.patch, cfg.phantom.shape)
        assert grid.n_patches == cfg.encoder.n_tokens == 150
        volume = build_dataset(cfg.phantom, 1, 0)[0].volume
        assert volume.shape == (30, 36, 30) and patchify(volume, grid).shape == (150, 216)
        plan = sample_mask(grid.n_patches, cfg.pretrain.mask_ratio, np.random.default_rng(0))
        assert (plan.masked.size, plan.visible.size) == (114, 36)
        assert cfg.pretrain.mask_ratio == 0.76
        w = cfg.pretrain.weights
        assert (w.sd, w.pixel, w.age, w.adv) == (0.005, 0.79, 0.1, 0.1)

        gen = np.random.default_rng(0)
        comps = {k: ag.Tensor(gen.uniform(0.1, 3.0)) for k in ("sd", "pixel", "age", "adv")}
        mode = cfg.pretrain.ablation
        worst = 0.0
        for k in comps:
            doubled = replace(w, **{k: 2 * getattr(w, k)})
            diff = total_pretrain_loss(comps, doubled, mode).item() - total_pretrain_loss(comps, w, mode).item()
            worst = max(worst, abs(diff - getattr(w, k) * comps[k].item()))
        details += ["150 tokens, 114/36 split", f"linearity err {worst:.1e}"]
        assert worst < 1e-9


# ---------------------------------------------------------------------------
# 3. pretraining


def test_pretraining_learns(reference):
    with criterion(3) as details:
        pixel = epoch_means(reference.records, "L_pixel")
        ratio = pixel[-1] / pixel[0]
        held_out, patches = reference.splits["finetune"]
        held_out, patches = held_out[-32:], patches[-32:]
        pred = predict_ages(reference.model, patches, reference.cfg.pretrain.mask_ratio, reference.cfg.seed("mask", 2))
        r, _ = pearson_r(pred, [p.age for p in held_out])
        minutes = reference.seconds / 60
        details += [f"pixel ratio {ratio:.3f}", f"age r {r:.3f}", f"{minutes:.1f} min"]
        assert len(pixel) == reference.cfg.pretrain.epochs == 500
        assert ratio < 0.5
        assert r > 0.8
        assert minutes < 30


# ---------------------------------------------------------------------------
# 4. MATS


def test_mats_correctness():
    with criterion(4) as details:
        gen = np.random.default_rng(4)
        worst = 0.0
        for _ in range(1000):
            n = int(gen.integers(2, 20))
            a = gen.standard_normal((n, n)) * gen.uniform(0.1, 10)
            c = gen.uniform(-100, 100)
            worst = max(worst, float(np.abs(mutual_attention_scores(a + c) - mutual_attention_scores(a)).max()))
            # the guider scores itself highest, yet only patch tokens come back
            a[0, 0] = a.max() + 50
            idx = select_tokens(mutual_attention_scores(a), min(3, n - 1))
            assert idx.min() >= 0 and idx.max() < n - 1 and np.all(np.diff(idx) > 0)
        assert worst < 1e-9, f"shift changed scores by {worst:.1e}"

        e = math.e
        a = np.array([[0.0, 1.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        hand = [(e / (2 + e)) * (e**2 / (2 + e**2)), (1 / (2 + e)) * (1 / (2 + e**2))]
        err = float(np.abs(mutual_attention_scores(a) - hand).max())
        details += [f"shift err {worst:.1e} over 1000", f"3x3 err {err:.1e}"]
        assert err < 1e-12


# ---------------------------------------------------------------------------
# 5. fine-tuning and probe


def _metric_row(tag, rep):
    return f"{tag}: " + " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in rep.as_dict().items())


def test_finetune_and_probe(reference):
    with criterion(5) as details:
        cfg = reference.cfg
        phantoms, patches = reference.splits["finetune"]
        n_train = cfg.data.n_finetune_train
        labels = np.array([p.label for p in phantoms])
        x_train, y_train, x_test, y_test = patches[:n_train], labels[:n_train], patches[n_train:], labels[n_train:]
        assert (len(x_train), len(x_test)) == (64, 32)

        model = FinetuneModel(encoder_for(reference, 4), cfg.finetune.mats, cfg.rng("init", 1), iat=True)
        finetune(model, x_train, y_train, cfg.finetune, cfg.seed("mask", 1))
        probs, sel = predict(model, x_test)
        assert sel.indices.max() < cfg.encoder.n_tokens
        ft = classification_metrics((probs[:, 1] > 0.5).astype(int), y_test, probs[:, 1])
        print(_metric_row("finetune mode4", ft))

        probe = {}
        for mode in (4, 0):
            encoder = encoder_for(reference, mode)
            f_train = extract_layer_features(encoder, x_train)
            f_test = extract_layer_features(encoder, x_test)
            reports = [
                linear_probe(f_train[l], y_train, f_test[l], y_test, cfg.probe.reg, cfg.probe.iterations)
                for l in range(len(f_train))
            ]
            for l, rep in enumerate(reports):
                print(_metric_row(f"probe mode{mode} layer{l + 1}", rep))
            probe[mode] = reports[-1].acc
        details += [f"fine-tune ACC {ft.acc:.3f}", f"probe ACC mode4 {probe[4]:.3f} vs mode0 {probe[0]:.3f}"]
        assert ft.acc >= 0.9
        assert probe[4] >= probe[0]


# ---------------------------------------------------------------------------
# 6. association


def _assoc(feats, behavior, names, **kw):
    return run_association(feats, behavior, names, repetitions=20, folds=10, **kw)


def test_association_pipeline(reference):
    with criterion(6) as details:
        cfg = reference.cfg
        phantoms, patches = reference.splits["association"]
        assert len(phantoms) == 200
        names = list(cfg.phantom.behavior_names)
        behavior = np.stack([p.behavior for p in phantoms])
        ages = np.array([p.age for p in phantoms])
        feats = extract_layer_features(encoder_for(reference, 4), patches)
        last = feats.shape[0]

        # planted signal on encoder features
        plain = _assoc(feats, behavior, names, ages=ages, seed=cfg.seed("folds"))
        for name in names:
            row = plain.lookup(last, name)
            assert row.mean_r > 0.5 and row.fdr_significant, f"{name}: r={row.mean_r:.3f}, significant={row.fdr_significant}"
        details.append("last-layer r " + "/".join(f"{plain.lookup(last, n).mean_r:.2f}" for n in names))

        # pure-noise behaviour over 20 experiment seeds
        hits = 0
        for s in range(20):
            noise = np.random.default_rng((s, 0x6E6F)).standard_normal(behavior.shape)
            res = _assoc(feats, noise, names, seed=s)
            hits += any(r.fdr_significant for r in res.rows)
        details.append(f"noise significant in {hits}/20")
        assert hits <= 2

        # age control on encoder features: the age-driven score weakens, the other persists
        controlled = _assoc(feats, behavior, names, ages=ages, age_control=True, seed=cfg.seed("folds"))
        before, after = plain.lookup(last, "age_linked"), controlled.lookup(last, "age_linked")
        assert after.p > before.p and after.mean_r < before.mean_r
        kept = controlled.lookup(last, "contrast_linked")
        assert kept.fdr_significant and kept.mean_r > 0.5
        details.append(f"age-controlled age_linked r {before.mean_r:.2f}->{after.mean_r:.2f}")

        # age control on a planted feature set: age proxies go, the score loses significance
        gen = np.random.default_rng(cfg.seed("folds", 1))
        latents = np.stack([p.latents for p in phantoms])
        n = len(phantoms)
        age_proxy = latents[:, :1] * gen.uniform(0.5, 1.5, 8) + 0.3 * gen.standard_normal((n, 8))
        contrast_proxy = latents[:, 1:2] * gen.uniform(0.5, 1.5, 8) + 0.3 * gen.standard_normal((n, 8))
        planted = np.c_[age_proxy, contrast_proxy, gen.standard_normal((n, 16))]
        np.testing.assert_array_equal(age_decorrelate_features(planted, ages), np.arange(8, 32))
        p_plain = _assoc(planted[None], behavior, names, ages=ages, seed=cfg.seed("folds"))
        p_ctrl = _assoc(planted[None], behavior, names, ages=ages, age_control=True, seed=cfg.seed("folds"))
        assert p_plain.lookup(1, "age_linked").fdr_significant
        assert not p_ctrl.lookup(1, "age_linked").fdr_significant
        assert p_ctrl.lookup(1, "contrast_linked").fdr_significant
        details.append(
            f"planted age_linked r {p_plain.lookup(1, 'age_linked').mean_r:.2f}->{p_ctrl.lookup(1, 'age_linked').mean_r:.2f}"
        )


# ---------------------------------------------------------------------------
# 7. statistical oracles


def test_statistical_oracles():
    with criterion(7) as details:
        gen = np.random.default_rng(7)
        x = gen.standard_normal((60, 6))
        y = x @ gen.standard_normal(6) + 0.5 * gen.standard_normal(60)
        design = np.c_[np.ones(60), x]
        beta, *_ = np.linalg.lstsq(design, y, rcond=None)
        pls_err = float(np.abs(plsr_fit(x, y, 6).predict(x) - design @ beta).max())
        assert pls_err < 1e-6

        assert fdr_bh([0.01, 0.02, 0.03, 0.04], 0.05).all()
        for _ in range(200):
            p = gen.uniform(0, 0.2, 30)
            lo, hi = np.sort(gen.uniform(0.001, 0.2, 2))
            assert np.all(fdr_bh(p, hi)[fdr_bh(p, lo)])

        labels = np.r_[1, 0, gen.integers(0, 2, 48)]
        scores = gen.standard_normal(50)
        auc = auc_score(scores, labels)
        for t in (np.exp, lambda s: 3 * s - 1, lambda s: s**3):
            assert abs(auc_score(t(scores), labels) - auc) < 1e-12

        r = classification_metrics([1] * 47 + [0] * 30 + [0] * 80 + [1] * 14, [1] * 77 + [0] * 94)
        table = tuple(round(100 * v, 2) for v in (r.acc, r.sen, r.spe))
        details += [f"PLS vs OLS {pls_err:.1e}", f"back-solve {table[0]}/{table[1]}/{table[2]}"]
        assert table == (74.27, 61.04, 85.11)


# ---------------------------------------------------------------------------
# 8. CLI determinism

CLI_CONFIG = {
    "data": {"n_pretrain": 16, "n_finetune_train": 8, "n_finetune_test": 8, "n_association": 8},
    "encoder": {"dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2},
    "pretrain": {"epochs": 2, "warmup_epochs": 1, "batch_size": 8, "adv_dim": 8, "adv_depth": 1},
    "finetune": {"epochs": 2, "warmup_epochs": 1, "batch_size": 8},
}


def test_cli_determinism(tmp_path):
    with criterion(8) as details:
        config = tmp_path / "config.json"
        config.write_text(json.dumps(CLI_CONFIG))
        for run in ("a", "b"):
            for command in ("generate", "pretrain", "finetune"):
                assert main([command, "--config", str(config), "--out", str(tmp_path / run)]) == 0, command
        compared = 0
        for stage in ("pretrain", "finetune"):
            files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / stage).rglob("*") if p.is_file())
            assert any(f.name == "weights.bin" for f in files) and any(f.suffix == ".csv" for f in files)
            for rel in files:
                assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), str(rel)
                compared += 1
        details.append(f"{compared} checkpoint and CSV files byte-identical")
