# %% [markdown]
# # Tape-based gradients and the dense-connectivity identity
#
# Every operation records itself on a tape; ``Tape.backward`` replays the tape in
# reverse.  Here we check one convolution against central differences and then
# show why concatenating features before a convolution is the same as summing
# separate convolutions of each source.

# %%
import numpy as np

from densekit import ops
from densekit.autodiff import Tape, Tensor, precision

rng = np.random.default_rng(0)

# %% [markdown]
# ## A convolution gradient against finite differences

# %%
with precision(np.float64):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ops.total(ops.relu(ops.conv2d(x, w, stride=1, padding=1)))
        tape.backward(loss)

    def loss_at(wdata):
        return float(ops.total(ops.relu(ops.conv2d(Tensor(x.data), Tensor(wdata), 1, 1))).data)

    h = 1e-6
    idx = (1, 0, 2, 1)
    up, down = w.data.copy(), w.data.copy()
    up[idx] += h
    down[idx] -= h
    print("tape gradient   ", w.grad[idx])
    print("central diff    ", (loss_at(up) - loss_at(down)) / (2 * h))

# %% [markdown]
# ## Concatenate-then-convolve equals the sum of per-source convolutions
#
# A dense layer sees the channel-wise concatenation of all earlier outputs.
# Splitting its kernel along the input channels shows the layer is a sum of one
# convolution per source, which is what makes per-source weight analysis possible.

# %%
a, b = rng.standard_normal((2, 4, 6, 6)), rng.standard_normal((2, 3, 6, 6))
wa, wb = rng.standard_normal((5, 4, 3, 3)), rng.standard_normal((5, 3, 3, 3))
joint = ops.conv2d(ops.concat_channels([Tensor(a), Tensor(b)]), Tensor(np.concatenate([wa, wb], 1)), 1, 1)
split = ops.add(ops.conv2d(Tensor(a), Tensor(wa), 1, 1), ops.conv2d(Tensor(b), Tensor(wb), 1, 1))
print("max difference:", np.abs(joint.data - split.data).max())
