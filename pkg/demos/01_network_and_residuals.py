"""Walk through the 9-bus test network and the residual vector that every
other piece of the package is built on.

The state is [voltage magnitude per bus, angle difference per branch]. The
residual stacks the real and imaginary current mismatch at every bus plus
one angle-sum equation per independent loop, so feasibility of an operating
condition is just "can we drive this vector to zero".
"""

import numpy as np

from rpf.network import case9
from rpf.residual import (ControlLayout, assemble_residual, default_controls,
                          flat_state, residual_labels, residual_norm,
                          residual_jacobian)
from rpf.solver import solve_rpf

net = case9()
print(f"network: {net.name}")
print(f"  {net.n_bus} buses, {net.n_branch} branches, {net.n_cycle} loop(s)")
print(f"  {len(net.generators)} generators, {len(net.loads)} loads")

layout = ControlLayout.for_network(net)
print(f"\ncontrols ({layout.size}):")
for k, label in enumerate(layout.labels):
    print(f"  u[{k:2d}] = {label}")

# a flat start: all magnitudes 1.0, all branch angles 0
v = flat_state(net)
u = default_controls(net)
r = assemble_residual(net, v, u, layout)
labels = residual_labels(net)
print(f"\nresidual at the flat start (rho = {residual_norm(r):.4f}):")
for label, val in zip(labels, r):
    print(f"  {label:14s} {val:+.4f}")

# the same vector after solving. Note rho does not hit zero: the nominal
# setpoints carry a few MW of surplus that does not exactly match the line
# losses at the solved voltages, so the best reachable point has a small
# positive floor. That floor is the whole point of this formulation; it
# measures how far from solvable the setpoints are instead of diverging.
sol = solve_rpf(net, u)
r_star = assemble_residual(net, sol.v_star, u, layout)
print(f"\nafter solving: rho = {sol.rho:.3e}, "
      f"max |r| = {np.max(np.abs(r_star)):.3e}")
print("voltage magnitudes:", np.round(sol.v_star.magnitudes, 4))

# 19 equations over 18 state variables: one taller than square, but full
# column rank, which is what the least-squares solver needs
J = residual_jacobian(net, sol.v_star, u, "voltage", layout)
print(f"\nJacobian shape {J.shape}, smallest singular value "
      f"{np.linalg.svd(J, compute_uv=False)[-1]:.3f}")
