# %% [markdown]
# # The simulated engine
#
# Tokens come from the scripted plan, one per running request per
# iteration. Latency grows linearly with batch size. A request's first
# iteration also pays for prefill.

# %%
from segserve import Engine, EngineCostModel, GenerationState, StopRule, builtin_library

lib = builtin_library()
model = EngineCostModel()
print([round(model.decode_ms(b), 2) for b in (1, 2, 4, 8, 16)])

# %% [markdown]
# Run one drone plan and stop at every completed skill. Each stop suspends
# the generation and keeps its KV cache. Resuming from GPU memory is free and
# resuming from host memory costs a swap.

# %%
eng = Engine(model, StopRule.skill_pattern(lib.skill_names()))
gen = GenerationState(0, 0, lib[3])
eng.admit(gen, 0.0)
now = 0.0
while True:
    res = eng.step_iteration(now)
    now = res.end
    b = res.boundaries.get(0)
    if b is None:
        continue
    text = eng.segment_text(eng.take_segment(gen))
    print(f"t={now * 1000:7.1f} ms  {b.reason.value:<12} {text}")
    if b.end_of_plan:
        eng.finish(gen)
        break
    receipt = eng.suspend(gen, now)
    eng.resume(gen, now)
print(f"busy {eng.busy_ms:.1f} ms, last snapshot {receipt.snapshot_bytes} bytes")
