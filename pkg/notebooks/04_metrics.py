# %% [markdown]
# # Caption and VQA metrics

# %%
from spatialnet_vit import metrics as M

print(M.bleu("a b c", ["a b d"], 2))
print(M.rouge_l("a b c", ["a c"]))
print(M.meteor_lite("the roofs are red", ["the roof is red"]))

# %% [markdown]
# CIDEr weights n-grams by how rare they are across images, so a corpus
# of a single image scores zero.

# %%
corpus = [("a b c", ["a b c"]), ("d e", ["d e"])]
print(M.cider(corpus[:1]), M.cider(corpus))
print(M.caption_report(corpus).table())

# %% [markdown]
# VQA accuracy: per category, their unweighted Average, and the pooled
# Overall.

# %%
records = [M.VqaRecord("1", "count", "3", "3"), M.VqaRecord("2", "presence", "yes", "no"),
           M.VqaRecord("3", "comparison", "no", "no"), M.VqaRecord("4", "urban-rural", "rural", "rural")]
print(M.vqa_accuracy(records).table())
print(M.round_half_up(M.average_accuracy([67.01, 87.46, 81.50, 90.00])))
