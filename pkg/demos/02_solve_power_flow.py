"""Solve the power flow as a least-squares problem, then push it until it
breaks and watch the residual floor tell us the case is infeasible.

solve_rpf minimizes rho = 0.5 * r' W r. When an exact solution exists the
minimum is zero; when it does not, the positive floor is a useful number
in its own right (how far from solvable we are), not just an error code.
"""

import numpy as np

from rpf.network import case9
from rpf.residual import ControlLayout, SlackSpec, default_controls
from rpf.solver import solve_feasible, solve_rpf

net = case9()
layout = ControlLayout.for_network(net)
u = default_controls(net)

sol = solve_rpf(net, u)
print(f"base case: converged={sol.converged}, rho={sol.rho:.3e}, "
      f"{sol.iterations} iterations")

# crank total demand up and watch the floor grow; the third column is how
# much extra power generator 1 would need to make the case exactly solvable.
# Past a point no adjustment helps anymore (voltage collapse) and the
# repair itself reports an empty basin.
from rpf.errors import InfeasibleRegion

print("\nload scale sweep:")
print("  scale   rho floor    slack repair (pu)")
slack1 = SlackSpec.single(0, len(net.generators))
for scale in [1.0, 1.5, 2.0, 2.5, 3.0, 3.5]:
    uu = u.copy()
    uu[layout.load_p] *= scale
    uu[layout.load_q] *= scale
    s = solve_rpf(net, uu)
    try:
        fs = solve_feasible(net, uu, slack1)
        repair = f"{fs.slack_value:+.4f}"
    except InfeasibleRegion:
        repair = "none (collapse)"
    print(f"  {scale:4.1f}   {s.rho:.3e}   {repair}")

# the slack degree of freedom can also be shared across several units
uu = u.copy()
uu[layout.load_p] *= 2.5
uu[layout.load_q] *= 2.5
fs = solve_feasible(net, uu, SlackSpec.distributed((0.4, 0.3, 0.3)))
print(f"\nrepair at scale 2.5 shared 40/30/30 across the units:")
print(f"  slack {fs.slack_value:+.4f} pu, rho after {fs.rho:.3e}, "
      f"feasible={fs.feasible}")
print("  adjusted setpoints:", np.round(fs.u_adjusted[layout.gen_p_m], 4))
