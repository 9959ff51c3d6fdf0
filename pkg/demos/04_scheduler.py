# %% [markdown]
# # Priorities
#
# A queued segment's priority is the utility it would earn if generation
# started now, divided by its generation estimate and by its slack. As the
# clock moves, urgent work whose deadline has passed sinks below normal work
# that can still make it.

# %%
from segserve import NORMAL_TUF, URGENT_TUF, Policy, QueuedTask, TaskQueue

q = TaskQueue(Policy.SEG_PUD, network_latency_s=0.008)
q.push(QueuedTask(0, 0, 0, 0.0, 1.0, NORMAL_TUF, 0.09, 1.0), 0.0)
q.push(QueuedTask(1, 1, 0, 0.0, 0.2, URGENT_TUF, 0.09, 0.2), 0.0)
for t in (0.0, 0.1, 0.5):
    q.update_all_priorities(t)
    print(t, [(x.request_id, round(x.priority, 1)) for x in q.ordered()])
