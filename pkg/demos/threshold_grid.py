# %% [markdown]
# # Confidence-threshold grid on a tiny model
# Same mechanics as `tokenmix grid`, small enough to finish in seconds.

# %%
import tempfile

from tokenmix.experiment import loads_config, run_ablation_grid

base = loads_config("""
model.image_size=16
model.patch_size=4
model.embed_dim=16
model.num_layers=1
model.num_heads=2
data.n_labeled=2
data.n_unlabeled=16
data.n_val=8
data.seed=0
train.seed=0
train.epochs=3
train.burn_in_epochs=1
train.batch_labeled=2
""")

# %%
with tempfile.TemporaryDirectory() as out:
    table = run_ablation_grid(base.replace("output_dir", out), "rho", [0.0, 0.5, 0.9, 0.95, 0.99], [0, 1])
print(table.render())
print("missing cells:", table.missing(), "failed cells:", table.failed())
