# %% [markdown]
# # Patch encoder
#
# Images are split into P x P patches, flattened in (row, col, channel)
# order, embedded, then passed through L attention + feed-forward layers.

# %%
import numpy as np

from spatialnet_vit.encoder import patchify, preset_config, unpatchify
from spatialnet_vit.heads import TaskSet, TaskSpec
from spatialnet_vit.model import SpatialNetViT

cfg = preset_config("desk")
print(cfg)
img = np.random.default_rng(0).uniform(size=cfg.image_shape)
patches = patchify(img, cfg)
print(patches.shape, np.array_equal(unpatchify(patches, cfg), img))

# %% [markdown]
# The full-size geometry: 256 x 256 x 3 images with P = 16.

# %%
paper = preset_config("paper")
print(paper.num_patches, paper.patch_len)

# %%
tasks = TaskSet([TaskSpec("class", "classification", 3), TaskSpec("count", "regression")])
model = SpatialNetViT(cfg, tasks, seed=0)
z = model.encode(img)
print(z.shape, model.num_scalars())
print({k: v.data.round(3) for k, v in model.forward(img[None]).items()})
