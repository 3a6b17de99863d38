"""Standard CE drifts toward new classes; the balanced prior corrects it.

Ten Gaussian classes, five in the base step and one per incremental step,
five exemplars per old class. Runs in about ten seconds.
Run with ``python demos/03_bias_and_balance.py``.
"""
from balanced_il.experiment import ExperimentConfig, execute, sweep, sweep_table

cfg = ExperimentConfig()

records = {}
for mode in ("standard", "balanced"):
    cfg.set("loss.mode", mode)
    records[mode] = execute(cfg)

# old versus newest-class recall after every step
print("step  classes   standard old/new    balanced old/new")
for s, b in zip(records["standard"].reports[1:], records["balanced"].reports[1:]):
    old_s, old_b = s.group(0, s.newest_group[0]), b.group(0, b.newest_group[0])
    print(f"{s.step:4d}  {s.num_classes:7d}   {100 * old_s:5.1f} / {100 * s.newest_accuracy:5.1f}"
          f"      {100 * old_b:5.1f} / {100 * b.newest_accuracy:5.1f}")

for mode, record in records.items():
    print(f"{mode:9s} average incremental accuracy {record.average_incremental_accuracy:.2f}")

# %% alpha below one moves weight toward old classes and protects the base task
cfg.set("loss.mode", "alpha")
print()
print(sweep_table(sweep(cfg, "alpha", [0.1, 0.25, 0.5, 1.0])))
