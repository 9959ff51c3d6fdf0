# %% [markdown]
# # Exhaustive check on tiny instances
#
# Every feasible single-server schedule is enumerated. The objective sums
# first-segment and follow-up utilities. We then ask whether some objective
# maximizer is also Pareto optimal in completion times and first-segment
# utilities.

# %%
from segserve.oracle import evaluate_schedule, pareto_check, random_instances

insts = random_instances(0, 200)
reports = [pareto_check(i) for i in insts]
print(sum(r.counterexample for r in reports), "of", len(reports), "instances without a Pareto-optimal maximizer")

# %% [markdown]
# Look at one failure. The maximizer delays a first segment a little. Part of
# that delay costs nothing because the curve is flat before the deadline,
# and it shortens a later gap between actions of the same request.

# %%
k = next(i for i, r in enumerate(reports) if r.counterexample)
best, other = reports[k].dominated_pairs[0]
for name, s in (("maximizer", best), ("dominating", other)):
    out = evaluate_schedule(insts[k], s)
    print(name, s, round(out.objective, 3), out.completion, [round(u, 3) for u in out.first_utility])

# %% [markdown]
# With no plateau (deadline at zero waiting) the same generator finds none.

# %%
flat = [pareto_check(i) for i in random_instances(0, 200, plateau=False)]
print(sum(r.counterexample for r in flat), "of", len(flat))
