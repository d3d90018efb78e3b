"""Use a trained model inside three optimization tasks instead of calling
the iterative solver in the loop.

The pattern is the same in all three: the model supplies a differentiable
infeasibility estimate rho_hat(u), and a small optimizer moves the controls
to minimize it (plus whatever the task cares about). Swapping the model for
the exact solver gives ground truth to compare against.
"""

import numpy as np

from rpf.dataset import (SamplingConfig, generate_dataset, rescale_to_lossless,
                         sample_oc)
from rpf.network import case9
from rpf.neural import TrainConfig, train
from rpf.po import (ControlPartition, DroopConfig, ExactPredictor, OpfSpec,
                    solve_po_opf, solve_po_pf, solve_po_qss)
from rpf.residual import ControlLayout, SlackSpec
from rpf.solver import solve_feasible

net = case9()
layout = ControlLayout.for_network(net)

# the optimization tasks probe the model off the feasible set, so train it
# on both sides of the boundary: solved states where a solution exists and
# residual floors where none does
from rpf.dataset import Dataset

ds_f = generate_dataset(net, SamplingConfig(800, seed=5), threads=4)
ds_i = generate_dataset(net, SamplingConfig(800, seed=5, stream=1,
                                            mode="infeasible"), threads=4)
ds = Dataset(records=ds_f.records + ds_i.records,
             network_fingerprint=ds_f.network_fingerprint,
             config={"union": True}, columns=ds_f.columns)
model, _ = train(net, ds, TrainConfig(features="mlp", widths=(60, 60),
                                      max_epochs=1500, seed=0))

# --- task 1: recover the slack adjustment of an unbalanced OC -------------
rng = np.random.default_rng(42)
u0 = rescale_to_lossless(sample_oc(rng, net, SamplingConfig(1, 0)), layout)
slack = SlackSpec.single(0, len(net.generators))

truth = solve_feasible(net, u0, slack)
res = solve_po_pf(model, net, u0, slack=slack)
print("slack recovery:")
print(f"  exact solver: {truth.slack_value:+.6f} pu")
print(f"  via model:    {res.aux['slack_value']:+.6f} pu "
      f"(gap {abs(res.aux['slack_value'] - truth.slack_value):.1e})")

# --- task 2: where does the frequency settle under droop? -----------------
droop = DroopConfig.for_network(net)  # R = 0.04 on every unit
u_over = u0.copy()
u_over[layout.load_p] *= 1.3  # extra demand drags frequency down
res = solve_po_qss(model, net, u_over, droop=droop)
exact = solve_po_qss(ExactPredictor(net), net, u_over, droop=droop)
print("\nfrequency under 30% extra demand:")
print(f"  via model: omega = {res.aux['omega']:.6f} "
      f"(deviation {res.aux['deviation']:+.2e})")
print(f"  exact:     omega = {exact.aux['omega']:.6f}")

# --- task 3: two-generator dispatch with operating limits -----------------
spec = OpfSpec.for_network(net, layout, lam=1e6)
dec = (int(layout.gen_p_m[0]), int(layout.gen_p_m[1]))
part = ControlPartition(dec, layout.size)
u_start = u0.copy()
u_start[list(dec)] = np.clip(u_start[list(dec)], spec.u_min[list(dec)],
                             spec.u_max[list(dec)])

res = solve_po_opf(model, net, spec, part, u_start)
exact = solve_po_opf(ExactPredictor(net), net, spec, part, u_start)
print("\ndispatch of the first two units:")
print(f"  via model: u* = {np.round(res.u_solution[list(dec)], 4)}, "
      f"cost {res.aux['cost']:.2f}")
print(f"  exact:     u* = {np.round(exact.u_solution[list(dec)], 4)}, "
      f"cost {exact.aux['cost']:.2f}")
worst = max(res.violations.values()) if res.violations else 0.0
print(f"  remaining constraint violation: {worst:.2e}")
