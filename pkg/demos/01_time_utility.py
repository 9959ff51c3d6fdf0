# %% [markdown]
# # Time-utility curves
#
# A request earns its full utility while the robot starts acting before the
# expected response time. After that, utility falls linearly and eventually
# turns negative.

# %%
import numpy as np

from segserve import NORMAL_TUF, URGENT_TUF, eval_tuf_array, eval_tuf_suspended_array

t = np.linspace(0.0, 2.0, 9)
print("latency  normal  urgent")
for ti, n, u in zip(t, eval_tuf_array(NORMAL_TUF, t), eval_tuf_array(URGENT_TUF, t)):
    print(f"{ti:6.2f}  {n:+.3f}  {u:+.3f}")

# %% [markdown]
# The normal curve crosses zero at 1.5 s and the urgent one near 0.5 s.
#
# Follow-up segments use the same slope, but their deadline is the moment the
# robot finishes the previous action. A segment ready early waits a negative
# amount, which counts as zero.

# %%
gaps = np.array([-0.5, 0.0, 0.1, 0.3])
print(dict(zip(gaps.tolist(), eval_tuf_suspended_array(URGENT_TUF, gaps).round(3).tolist())))
