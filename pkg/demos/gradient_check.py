"""Check the closed-form gradients of both model families against
central finite differences.
"""

import numpy as np

from fedspectra import (
    DeepLinearParams,
    LabeledBatch,
    TwoLayerParams,
    grad_two_layer,
    grads_deep_linear,
    init_deep_linear,
    init_two_layer,
    loss_of,
)


def finite_difference(f, x0, step=1e-6):
    g = np.zeros_like(x0)
    for j in range(x0.size):
        x = x0.copy()
        x[j] = x0[j] + step
        hi = f(x)
        x[j] = x0[j] - step
        lo = f(x)
        g[j] = (hi - lo) / (2.0 * step)
    return g


rng = np.random.default_rng(0)

# deep linear: flatten all layers into one vector and probe every coordinate
p = init_deep_linear(depth=3, width=8, d_in=4, d_out=2, seed=0)
batch = LabeledBatch(X=rng.standard_normal((4, 5)), Y=rng.standard_normal((2, 5)))


def linear_loss(flat):
    layers, at = [], 0
    for W in p.layers:
        layers.append(flat[at:at + W.size].reshape(W.shape))
        at += W.size
    return loss_of(DeepLinearParams(layers=tuple(layers), width=p.width), batch)


flat = np.concatenate([W.ravel() for W in p.layers])
fd = finite_difference(linear_loss, flat)
closed = np.concatenate([g.ravel() for g in grads_deep_linear(p, batch)])
err = np.linalg.norm(fd - closed) / np.linalg.norm(closed)
print(f"deep linear   ({flat.size} parameters): relative error {err:.3e}")

# ReLU: the loss is only piecewise smooth, so pick a start point whose
# activations sit away from zero before trusting finite differences
q = init_two_layer(width=16, dim=6, seed=0)
X = rng.standard_normal((6, 8))
assert np.min(np.abs(q.hidden @ X)) > 1e-4
rbatch = LabeledBatch(X=X, Y=rng.standard_normal(8))


def relu_loss(flat):
    q2 = TwoLayerParams(hidden=flat.reshape(q.hidden.shape), signs=q.signs)
    return loss_of(q2, rbatch)


fd = finite_difference(relu_loss, q.hidden.ravel())
closed = grad_two_layer(q, rbatch).ravel()
err = np.linalg.norm(fd - closed) / np.linalg.norm(closed)
print(f"two-layer ReLU ({q.hidden.size} parameters): relative error {err:.3e}")
