# %% [markdown]
# # A short semi-supervised run
# Four labeled scenes, 32 unlabeled, 16 for validation. Forty epochs with the
# teacher switched on after 25, then a look at what the teacher gates.

# %%
import numpy as np

from tokenmix.data import SplitSpec, evaluate, make_splits
from tokenmix.model import ModelConfig
from tokenmix.trainer import AugConfig, SSLTrainer, TrainConfig, pseudo_label

spec = SplitSpec(n_labeled=4, n_unlabeled=32, n_val=16, seed=1)
labeled, unlabeled, val = make_splits(spec)
train = TrainConfig(epochs=40, burn_in_epochs=25, seed=1)
steps = 32 // train.batch_unlabeled
tr = SSLTrainer(ModelConfig(), train, AugConfig(), total_iters=steps * train.epochs,
                burn_in_steps=steps * train.burn_in_epochs)

# %%
for epoch in range(train.epochs):
    ms = tr.fit_epoch(labeled, unlabeled)
    if epoch % 5 != 4:
        continue
    score, _ = evaluate(tr.student, val)
    print(f"epoch {epoch}  l_sup {np.mean([m.l_sup for m in ms]):.3f}  "
          f"gate {np.mean([m.gate_frac for m in ms]):.2f}  theta {ms[-1].theta}  val mIoU {score:.3f}")

# %%
# which pixels survive the 0.95 threshold, by predicted class
images = np.stack([s.image for s in unlabeled])
y, conf = pseudo_label(tr.teacher, images)
kept = conf > train.rho
for c in range(4):
    n = int((y == c).sum())
    print(f"class {c}: {n:6d} pixels predicted, {int((kept & (y == c)).sum()):6d} kept")
