# %% [markdown]
# # Neighborhood meta-representations
#
# A row from any table becomes a fixed-width vector once we look at it
# through its nearest neighbors: the sorted distances to the K closest
# rows of each class, each paired with a label slot.  Tables with different
# columns end up in the same space.

# %%
import numpy as np

from tabmeta.data import EncodedDataset
from tabmeta.metarep import build_meta_batch, full_meta_rep
from tabmeta.metric import MetricSpec

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

# two Gaussian classes in 3 dimensions
X = np.vstack([rng.normal(0.0, 1.0, size=(20, 3)), rng.normal(3.0, 1.0, size=(20, 3))])
y = np.repeat([0, 1], 20)
ds = EncodedDataset(X, y, "classification", n_classes=2)
spec = MetricSpec.uniform("euclidean", 3)

# %% [markdown]
# A query near class 0 sees small distances in the class-0 block and large
# ones in the class-1 block.  Label slots are constant 1 for classification.

# %%
rep = full_meta_rep(np.zeros(3), ds, [spec], K=4, normalize=False)
print("class 0 block:", rep.block(0))
print("class 1 block:", rep.block(1))

# %% [markdown]
# By default each instance divides its distances by the largest one it
# sees, so the scale of the original columns drops out.

# %%
rep = full_meta_rep(np.zeros(3), ds, [spec], K=4)
print("normalized:\n", rep.blocks)
scaled = EncodedDataset(X * 1000.0, y, "classification", 2)
same = full_meta_rep(np.zeros(3), scaled, [spec], K=4).blocks
print("unchanged after rescaling the table:", np.allclose(rep.blocks, same))

# %% [markdown]
# Several distance kinds are concatenated inside each class block, and a
# class with fewer than K members repeats its last pair.

# %%
kinds = [MetricSpec.uniform(k, 3) for k in ("manhattan", "euclidean", "braycurtis")]
rep = full_meta_rep(np.zeros(3), ds.subset([0, 1, 2, 20, 21, 22, 23, 24, 25]), kinds, K=4)
print("blocks shape (classes, kinds * 2K):", rep.blocks.shape)
print("class 0, manhattan part (3 members, K=4):", rep.block(0, kind=0))

# %% [markdown]
# Training rows are described with themselves left out, otherwise every
# row would see a zero distance to itself.

# %%
with_self = build_meta_batch(X[:3], ds, [spec], K=3, normalize=False)
without = build_meta_batch(X[:3], ds, [spec], K=3, exclude=np.arange(3), normalize=False)
print("first distance with self:   ", with_self[:, 0, 0])
print("first distance without self:", without[:, 0, 0])
