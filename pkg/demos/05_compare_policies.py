# %% [markdown]
# # Policy comparison
#
# Same workload and seed, five policies. Robot execution times are drawn
# per request and plan item, so every policy sees identical robots.

# %%
from segserve import PRESETS, Policy, SchedulerConfig, SimConfig, aggregate_log, run

spec = PRESETS["WID2"].with_seed(0)
print(f"{'policy':<11} urgent  normal  mean waiting (s)")
for p in Policy:
    log = run(SimConfig(workload=spec, scheduler=SchedulerConfig(p), seed=0)).log
    tab = aggregate_log(log)
    wait = sum(r.mean_waiting_s * r.n for r in tab.rows) / tab.n
    print(f"{p.value:<11} {tab.by_urgency['Urgent']:+.3f}  {tab.by_urgency['Normal']:+.3f}  {wait:.3f}")
