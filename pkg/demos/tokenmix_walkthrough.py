# %% [markdown]
# # Token exchange on one pair of scenes
# Embed a labeled and an unlabeled scene, swap a quarter of their tokens,
# run the encoder on both mixed sets and put the borrowed rows back.

# %%
import numpy as np

from tokenmix import augment as A
from tokenmix.data import gen_scene
from tokenmix.model import ModelConfig, SegmenterModel, encode, patch_embed

rng = np.random.default_rng(0)
cfg = ModelConfig()
model = SegmenterModel.init(cfg, rng)
labeled, unlabeled = gen_scene(rng), gen_scene(rng)
print("label classes present:", np.unique(labeled.label))

# %%
g_l = patch_embed(labeled.image, model)  # 16 x 64, row-major patches
g_u = patch_embed(unlabeled.image, model)
mask = A.gen_token_mask(cfg.n_tokens, 0.25, rng)
print("mask", mask.to_string(), "popcount", mask.popcount)
print(mask.m.reshape(4, 4))

# %%
x_u, x_l = A.token_exchange(g_u, g_l, mask)
sel = mask.m.astype(bool)
print("swapped rows came from the labeled scene:", np.array_equal(x_u.data[sel], g_l.data[sel]))
print("token sums unchanged:", np.array_equal(x_u.data + x_l.data, g_u.data + g_l.data))

# %%
# after the encoder the unlabeled stream takes its own rows back from the labeled stream
f_u, f_l = encode(x_u, model), encode(x_l, model)
restored = A.token_swap_back(f_u, f_l, mask)
changed = np.abs(restored.data - encode(g_u, model).data).sum(axis=1) > 0
print("token rows that differ from an unmixed pass:", np.flatnonzero(changed))
# every row differs: attention has already mixed information across tokens

# %%
# the block-structured variant swaps whole 2x2 token squares
star = A.tokenmix_star_mask(4, 2, 0.25, rng)
print(star.m.reshape(4, 4))
