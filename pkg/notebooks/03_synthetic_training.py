# %% [markdown]
# # Training on synthetic scenes
#
# Each class has its own background brightness and the count task places
# bright patch-aligned blocks. The desk encoder learns both in a few
# hundred epochs.

# %%
from spatialnet_vit.data import SyntheticSpec, generate_synthetic
from spatialnet_vit.encoder import preset_config
from spatialnet_vit.model import SpatialNetViT
from spatialnet_vit.trainer import TrainConfig, train

spec = SyntheticSpec(seed=1, noise=0.1)
data = generate_synthetic(spec)
model = SpatialNetViT(preset_config("desk"), spec.tasks(), seed=1)
log = train(model, data.dataset("train"), TrainConfig(lr=1e-4, epochs=200, seed=1, preset="desk"),
            eval_set=data.dataset("test"))

# %%
for rec in log.epochs[::40] + log.epochs[-1:]:
    print(rec.epoch, round(rec.losses["final"], 4), rec.metrics)
