# %% [markdown]
# # Traces and workloads
#
# The built-in library holds scripted plans for drones, a robot arm and a
# chatbot. A workload config turns those traces into a Poisson stream of task
# bursts spread over a fleet of agents.

# %%
import numpy as np

from segserve import PRESETS, builtin_library, compose_workload

lib = builtin_library()
for tr in lib:
    print(f"{tr.trace_id:>4} {tr.category.value:<12} {tr.urgency.kind.value:<7} "
          f"{tr.output_tokens:>3} tokens  {tr.text[:48]}")

# %% [markdown]
# Arrivals for the first preset. Each event starts between one and
# `max_tasks_per_event` tasks on agents that are currently idle.

# %%
spec = PRESETS["WID1"].with_seed(1)
arrivals = compose_workload(spec, lib)
events = sorted({a.event_index for a in arrivals})
gaps = np.diff([0.0] + sorted({a.time for a in arrivals}))
print(f"{len(arrivals)} tasks in {len(events)} events, mean gap {gaps.mean():.2f} s "
      f"(1/rate = {1 / spec.events_per_second:.1f} s)")
