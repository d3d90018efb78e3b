"""Train a model that maps controls straight to the solved voltage state,
skipping the iterative solver at inference time.

Two feature maps are compared: plain linear regression as the baseline and
a small two-layer network. The interesting part is the residual check at
the end; because the model predicts the full state, we can push any
prediction back through the physics and measure how consistent it is.
"""

import numpy as np

from rpf.dataset import SamplingConfig, generate_dataset
from rpf.network import case9
from rpf.neural import TrainConfig, predict, predict_residual_and_grad, train
from rpf.residual import ControlLayout

net = case9()
layout = ControlLayout.for_network(net)
ds_train = generate_dataset(net, SamplingConfig(400, seed=3), threads=4)
ds_test = generate_dataset(net, SamplingConfig(100, seed=3, stream=1),
                           threads=4)


def median_v_err(model):
    errs = [np.abs(predict(model, rec.u).magnitudes - rec.v_star.magnitudes)
            for rec in ds_test.records]
    return float(np.median(np.concatenate(errs)))


lin, rep = train(net, ds_train, TrainConfig(features="linear"))
print(f"linear baseline (closed form): "
      f"median |V| test error {median_v_err(lin):.2e}")

cfg = TrainConfig(features="mlp", widths=(40, 40), max_epochs=800, seed=0)
mlp, rep = train(net, ds_train, cfg)
print(f"mlp {cfg.widths}: {rep.epochs} epochs, train loss "
      f"{rep.final_train:.2e}, val loss {rep.final_val:.2e}, "
      f"{rep.wall_time_s:.1f}s")
print(f"  median |V| test error {median_v_err(mlp):.2e}")

# physics consistency: evaluate the residual at the predicted state. For a
# feasible input this should be near zero; the model never saw the residual
# during training, so this is a real test, not a tautology.
rec = ds_test.records[0]
rho_hat, grad = predict_residual_and_grad(mlp, net, rec.u)
print(f"\npredicted infeasibility at a feasible OC: {rho_hat:.2e}")

# the same probe at a deliberately unbalanced point
u_bad = rec.u.copy()
u_bad[layout.gen_p_m] *= 1.5
rho_bad, grad = predict_residual_and_grad(mlp, net, u_bad)
print(f"after scaling generation 1.5x: {rho_bad:.2e}")
print("gradient wrt generator setpoints:",
      np.round(grad[layout.gen_p_m], 3))
print("(positive components say backing those units off helps)")
