"""
Mutual-attention token selection
================================

During fine-tuning a learnable guider token joins the sequence. Each patch
token is scored by how much the guider attends to it times how much it
attends to the guider, and the top k tokens of every layer feed the
classifier.
"""

import numpy as np

from mciat.encoder import EncoderConfig
from mciat.mats import (
    FinetuneConfig,
    MATSConfig,
    build_finetune_model,
    finetune,
    mutual_attention_scores,
    predict,
    select_tokens,
    selection_frequency,
)
from mciat.synth import PhantomSpec, build_dataset
from mciat.volume import PatchGrid, patchify

# a 3-token toy: row 0 and column 0 belong to the guider
a = np.array([[0.0, 1.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
s = mutual_attention_scores(a)
print("scores", s, "top-1", select_tokens(s, 1))
print("adding a constant changes nothing:", np.allclose(mutual_attention_scores(a + 5.0), s))

# a small encoder on real phantoms
spec = PhantomSpec()
grid = PatchGrid(spec.patch, spec.shape)
phantoms = build_dataset(spec, 24, seed=4)
x = np.stack([patchify(p.volume, grid) for p in phantoms])
y = np.array([p.label for p in phantoms])

enc = EncoderConfig(dim=32, depth=2, heads=2, mlp_ratio=2)
cfg = FinetuneConfig(mats=MATSConfig(k=3), epochs=3, warmup_epochs=1, batch_size=8)
model = build_finetune_model(enc, cfg, np.random.default_rng(0))
history = finetune(model, x[:16], y[:16], cfg, seed=0)
print("training loss per epoch", [round(h["loss"], 3) for h in history])

probs, sel = predict(model, x[16:])
print("selected tokens of the first test sample, per layer:", sel.indices[:, 0].tolist())
freq = selection_frequency(sel.indices, enc.n_tokens)
print("most selected tokens:", np.argsort(-freq.sum(axis=0))[:5].tolist())
