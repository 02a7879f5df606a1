"""The plan gradient of a linear generator against finite differences, and
how its error tracks the inner solver's certificate.

Run with ``python3 demos/gradient_oracle.py``.
"""
# %%
import numpy as np

from regot.analysis import LinearTestbed, gradient_error_scaling_probe
from regot.distributions import DiscreteDistribution
from regot.generators import forward
from regot.regularized_ot import Regularizer, StopCriteria, reg_distance
from regot.training import Oracle, TrainConfig, full_gradient

tb = LinearTestbed.default(0)
reg = Regularizer("kl", 0.5)
tight = StopCriteria(gap=1e-12, max_iters=500, check_every=1)
cfg = TrainConfig(cost_fn="l2sq", reg=reg, disc_stop=tight, oracle=Oracle.EXACT, eval_every=0)


def d(theta):
    gen = DiscreteDistribution(forward(tb.spec, theta, tb.q.support), tb.q.weights)
    return reg_distance(gen, tb.p, "l2sq", reg, stop=tight).reg_distance


# %%
g = full_gradient(tb.spec, tb.theta, tb.q, tb.p, cfg)
h = 1e-5
fd = np.array([(d(tb.theta + h * e) - d(tb.theta - h * e)) / (2 * h) for e in np.eye(tb.theta.size)])
print("plan gradient  ", np.round(g, 6))
print("central diffs  ", np.round(fd, 6))

# %% error against certified accuracy: slope close to 1/2 on log-log axes
rep = gradient_error_scaling_probe(tb.spec, tb.theta, tb.q, tb.p, "l2sq", reg)
for row in rep.details:
    print(f"eps={row['certificate']:.1e}  error={row['error']:.2e}")
print(f"slope {rep.config['slope']:.3f}")
