"""
Gradients with the numpy autodiff engine
========================================

Build a small graph, run reverse mode, and compare against central
differences. Everything below runs in a second or two.
"""

import numpy as np

from layoutgen import numerics as nx
from layoutgen.numerics import functional as F
from layoutgen.numerics.gradcheck import check_gradients

# a leaf tensor that wants a gradient
x = nx.parameter(np.array([1.0, -2.0, 3.0]))
loss = nx.sum_(nx.square(x))
grads = nx.backward(loss)
print("d/dx sum(x^2) =", grads[x])  # 2x

# the recorded graph, in the order backward replays it (reversed)
for node in nx.computation_record(loss):
    print(node)

###############################################################################
# Finite differences
# ------------------
# check_gradients runs both paths in float64 and returns the worst
# componentwise relative error.

rng = np.random.default_rng(0)
q, k, v = (rng.normal(size=(1, 2, 5, 4)) for _ in range(3))
r = rng.normal(size=(1, 2, 5, 4))
err = check_gradients(lambda a, b, c: nx.sum_(nx.mul(F.causal_attention(a, b, c), nx.constant(r))), [q, k, v])
print(f"causal attention: max relative error {err:.2e}")

w = rng.normal(size=(3, 3, 2, 4))
img = rng.normal(size=(1, 6, 6, 2))
err = check_gradients(lambda a, b: nx.sum_(nx.square(F.conv2d(a, b, padding=1))), [img, w])
print(f"conv2d: max relative error {err:.2e}")

###############################################################################
# A two-layer net and Adam
# ------------------------

X = rng.normal(size=(64, 2))
y = (X[:, 0] * X[:, 1] > 0).astype(np.int64)
lin1, lin2 = nx.Linear(rng, 2, 16, std=0.5), nx.Linear(rng, 16, 2, std=0.5)
opt = nx.Adam(lin1.parameters() + lin2.parameters(), lr=0.05)
for step in range(200):
    opt.zero_grad()
    loss = F.softmax_cross_entropy(lin2(nx.tanh(lin1(nx.Tensor(X)))), y)
    nx.backward(loss)
    opt.step()
    if step % 50 == 0:
        print(step, round(loss.item(), 4))
print("final", round(loss.item(), 4))
