# %% [markdown]
# # Training at desk scale
#
# Full CIFAR runs take hundreds of epochs.  On one CPU core we instead check two
# properties: a tiny network can memorize a small set, and a small network beats
# chance comfortably on held-out synthetic images.

# %%
import time

from densekit.data import parse_data_spec, synth_dataset
from densekit.model import init_model
from densekit.plan import ArchConfig
from densekit.trainer import TrainConfig, lr_schedule, train

# %% [markdown]
# ## The step schedule
#
# The learning rate drops tenfold at half and at three quarters of training.

# %%
print([lr_schedule(e, 300, 0.1) for e in (0, 149, 150, 224, 225)])

# %% [markdown]
# ## Memorizing 64 images
#
# One dense block of four layers with growth 8.  Train accuracy is measured in
# evaluation mode (running batch-norm statistics, no dropout).

# %%
data = synth_dataset(64, 42)
model = init_model(ArchConfig(depth_L=6, growth_k=8, block_layers=(4,)), 42)
cfg = TrainConfig(epochs=200, batch_size=16, augment=False, seed=42, eval_train=True)
start = time.perf_counter()
report = train(model, data, None, cfg)
errors = [r["train_eval_err"] for r in report.records]
print("first epoch with zero train error:", next(i + 1 for i, e in enumerate(errors) if e == 0.0))
print(f"{time.perf_counter() - start:.0f} s")

# %% [markdown]
# ## Held-out error after a short run
#
# A reduced version of the generalization check: fewer images and epochs.

# %%
train_set, test_set = parse_data_spec("synthetic:1000", 42)
model = init_model(ArchConfig(depth_L=22, growth_k=8), 42)
report = train(model, train_set, test_set, TrainConfig(epochs=3, batch_size=64, seed=42))
for record in report.records:
    print(record["epoch"], record["lr"], round(record["train_loss"], 3), record["test_err"])
