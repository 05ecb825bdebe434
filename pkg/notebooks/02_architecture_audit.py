# %% [markdown]
# # Architecture plans and their cost
#
# A configuration compiles to a flat list of layer specs.  The audit walks that
# list and sums parameters and FLOPs (one multiply-add counts as two FLOPs).

# %%
from densekit.audit import count_flops, count_params
from densekit.plan import ArchConfig, build_plan, densenet_bc, densenet_imagenet

# %% [markdown]
# ## The CIFAR configurations

# %%
configs = [
    ArchConfig(depth_L=40, growth_k=12),
    ArchConfig(depth_L=100, growth_k=12),
    ArchConfig(depth_L=100, growth_k=24),
    densenet_bc(100, 12),
    densenet_bc(250, 24),
    densenet_bc(190, 40),
    ArchConfig(family="resnet_preact", depth_L=164),
    ArchConfig(family="resnet_preact", depth_L=1001),
]
for cfg in configs:
    report = count_params(build_plan(cfg))
    print(f"{cfg.variant:14s} L={cfg.depth_L:<5d} k={cfg.growth_k:<3d}"
          f" {report.total_params:>11,d} params  ({report.params_millions()}M)")

# %% [markdown]
# ## Where the parameters go
#
# In a plain DenseNet almost everything sits in the 3x3 convolutions; the
# channel count entering layer l grows linearly, so later layers are wider.

# %%
plan = build_plan(ArchConfig(depth_L=40, growth_k=12))
print(count_flops(plan).to_table())

# %% [markdown]
# ## ImageNet plans share one spatial schedule

# %%
for depth in (121, 169, 201, 264):
    plan = build_plan(densenet_imagenet(depth))
    report = count_flops(plan)
    print(f"DenseNet-{depth}: blocks {plan.config.block_layers}, spatial {plan.block_spatial},"
          f" {report.params_millions()}M params, {report.total_flops / 1e9:.2f} GFLOPs")
