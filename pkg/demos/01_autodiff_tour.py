"""A short tour of the tape-based autodiff core.

Run with ``python demos/01_autodiff_tour.py``.
"""

# %%
import numpy as np

from promptreg import numcore as nc
from promptreg.numcore import Graph, Tensor

rng = np.random.default_rng(0)

# %% [markdown]
# Parameters are tensors with requires_grad=True.  Everything else is a
# read-only constant.  Ops record themselves on the active Graph only when
# some input needs a gradient.

# %%
W = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
x = Tensor(rng.normal(size=(5, 4)))

with Graph() as g:
    h = nc.gelu(x @ W)
    p = nc.softmax_rows(h)
    loss = nc.mean(nc.log(p))
    print("ops on tape:", len(g))
    grads = nc.backward(loss)

print("loss", loss.item())
print("dL/dW\n", np.round(grads[W], 4))

# %% [markdown]
# The same gradient from central differences.  The check returns the
# worst relative error over every parameter entry.

# %%
err = nc.finite_difference_check(lambda: nc.mean(nc.log(nc.softmax_rows(nc.gelu(x @ W)))), [W])
print(f"finite-difference relative error {err:.2e}")

# %% [markdown]
# Batched tensors broadcast over leading axes, and gradients are summed back
# to each input's shape -- here one bias row shared by a (2, 5, 3) batch.

# %%
b = Tensor(np.zeros(3), requires_grad=True)
xb = Tensor(rng.normal(size=(2, 5, 3)))
with Graph():
    out = nc.sum(nc.layer_norm(xb + b) * xb)
    gb = nc.backward(out)[b]
print("bias gradient shape", gb.shape)

# %% [markdown]
# Outside a graph, or inside ``no_grad``, nothing is recorded, which is how
# the frozen encoders are evaluated.

# %%
with nc.no_grad():
    y = x @ W
print("recorded anything?", y._record is not None)
