# %% [markdown]
# # Batch-size sweep
#
# Fixed batch caps for the segmented scheduler and the plain batching
# baseline. Small caps queue work. Large caps slow every iteration, and the
# KV memory limit flattens both curves.

# %%
from segserve.cli import Job, run_jobs
from segserve.workload import WID2

sizes = (2, 4, 6, 8, 12, 16)
jobs = [Job(p, WID2.with_seed(0).to_dict(), {}, 0, b) for p in ("SegPUD", "FCFSBatch") for b in sizes]
results = run_jobs(jobs, workers=2)
for p in ("SegPUD", "FCFSBatch"):
    totals = [r.table.total_utility for r in results if r.job.policy == p]
    print(p.ljust(10), " ".join(f"{v:7.1f}" for v in totals))
