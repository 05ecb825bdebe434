# %% [markdown]
# # Which earlier layers does each layer use?
#
# For every dense layer we split its 3x3 kernel by source layer and take the
# mean absolute weight of each slice.  Row s, column l of a block's matrix is
# how strongly layer l reads the output of source s (row 0 is the block input).

# %%
import numpy as np

from densekit.analysis import heatmap_export, weight_heatmap
from densekit.data import parse_data_spec
from densekit.model import init_model
from densekit.plan import ArchConfig
from densekit.trainer import TrainConfig, train

np.set_printoptions(precision=3, suppress=True, linewidth=120)

# %% [markdown]
# ## At initialization every entry sits near the half-normal mean
#
# He initialization draws each weight from N(0, 2/fan_in), so before training
# the only structure is the fan-in of each column.

# %%
fresh = weight_heatmap(init_model(ArchConfig(depth_L=22, growth_k=8), 42))
print(fresh.matrices[0])

# %% [markdown]
# ## After a short training run
#
# Trained weights spread out: some sources are read strongly, others barely.
# The block input stays in use by every layer.

# %%
train_set, test_set = parse_data_spec("synthetic:1000", 42)
model = init_model(ArchConfig(depth_L=22, growth_k=8), 42)
report = train(model, train_set, test_set, TrainConfig(epochs=3, batch_size=64, seed=42))
trained = weight_heatmap(report.model)
print(trained.matrices[0])
print("row 0 strictly positive in every block:", all(np.all(m[0] > 0) for m in trained.matrices))

# %% [markdown]
# ## Export
#
# One CSV for all blocks plus a grayscale PGM image per block.

# %%
for path in heatmap_export(trained, "/tmp/densekit_heatmap", "both"):
    print(path)
