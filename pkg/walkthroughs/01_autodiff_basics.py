"""A tour of the tensor engine: forward ops, the tape, and gradients."""

# %%
import numpy as np

from mfpn import tensor as T
from mfpn.analysis import numeric_grad, relative_error
from mfpn.tensor import Parameter, Tensor

rng = np.random.default_rng(0)

# %% Nearest upsampling and max-pooling undo each other on piecewise-constant maps
x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
up = T.upsample_nearest_x2(x)
print(up.data[0, 0])
print(T.maxpool_2x2(up).data[0, 0])

# %% A small conv layer and its weight gradient
img = Tensor(rng.standard_normal((1, 2, 6, 6)))
w = Parameter("w", rng.standard_normal((3, 2, 3, 3)))
b = Parameter("b", np.zeros((1, 3, 1, 1)))


def loss():
    return T.sum_squares(T.relu(T.conv2d(img, w, b)))


L = loss()
L.backward()
print("loss", L.data.item())
print("ops on tape:", [rec.op for rec in L.graph.records])

# %% Compare against central differences
w_grad = w.grad.copy()
print("relative error vs finite differences:", relative_error(w_grad, numeric_grad(loss, w)))

# %% Gradients accumulate until cleared
w.zero_grad()
L = loss()
L.backward()
L.backward()
print("doubled:", np.allclose(w.grad, 2 * w_grad))
