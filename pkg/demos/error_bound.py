"""
How large can the observer error get?
=====================================

For a residual whose rate stays below ``l_f`` the sampled observer error is
bounded by ``Gamma(omega_o, T_s) * l_f``. Here we tabulate the bound and
check it against a disturbance that hits the rate limit.
"""

import numpy as np

from esoarm.eso import EsoState, error_bound, eso_step, gains_from_bandwidth

t_s, l_f = 1e-4, 1.0

# %%
# The bound falls roughly like 2 / omega_o.
for w in (10.0, 20.0, 40.0, 80.0, 160.0):
    print(f"omega_o = {w:6.1f}  Gamma = {float(error_bound(w, l_f, t_s)[0]):.5f}  2/omega_o = {2 / w:.5f}")

# %%
# A sinusoid of amplitude l_f / w_d has peak rate exactly l_f. The observer
# sees exact velocity samples and nothing else.
w_d, omega = 5.0, 80.0
n = int(3.0 / t_s)
t = np.arange(n + 1) * t_s
f = l_f / w_d * np.sin(w_d * t)
x2 = l_f / w_d ** 2 * (1 - np.cos(w_d * t))
g = gains_from_bandwidth(omega)
s = EsoState(np.array(0.0), np.array(0.0))
err = np.empty(n)
for k in range(n):
    s = eso_step(s, g, 0.0, 0.0, x2[k], t_s)
    err[k] = f[k + 1] - float(s.xhat3)
steady = t[1:] > 0.2
print(f"observed max |f - f_hat| = {np.max(np.abs(err[steady])):.5f}, "
      f"bound = {float(error_bound(omega, l_f, t_s)[0]):.5f}")
