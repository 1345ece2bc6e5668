# %% [markdown]
# # Reverse-mode autodiff
#
# Every tensor remembers its parents and a gradient closure. `backward`
# walks the recorded graph in reverse topological order.

# %%
import numpy as np

from spatialnet_vit.gradcheck import gradcheck
from spatialnet_vit.tensor import Tensor, backward, matmul, relu, softmax_rows, tsum

x = Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)
w = Tensor(np.eye(3) * 2.0, requires_grad=True)
loss = tsum(softmax_rows(relu(matmul(x, w))))
gx, gw = backward(loss, [x, w])
print(loss.item(), gx)

# %% [markdown]
# Softmax rows always sum to one, so the gradient above is zero up to
# rounding. A loss that is not shift invariant gives a real signal:

# %%
loss = tsum(relu(matmul(x, w)) * Tensor(np.array([1.0, 2.0, 3.0])))
print(backward(loss, [x])[0])

# %% [markdown]
# `gradcheck` compares analytic gradients with central differences. When
# a step crosses a ReLU kink it retries with a smaller step.

# %%
params = {"x": x, "w": w}
report = gradcheck(params, lambda: tsum(relu(matmul(x, w)) * 0.5))
print(report.passed, report.max_error, report.kink_retries)
