"""Two variants: no replay memory at all, and a meta-learned alpha.

Run with ``python demos/04_no_memory_and_meta.py``.
"""
from balanced_il.experiment import ExperimentConfig, execute

# %% without memory the balanced prior zeroes out old classes entirely,
# so the network can forget them for free and new classes never compete.
# A small epsilon keeps old logits in the normaliser.
cfg = ExperimentConfig()
cfg.set("memory.size", 0)
for mode in ("balanced", "relaxed"):
    cfg.set("loss.mode", mode)
    final = execute(cfg).final
    print(f"{mode:9s} final base {100 * final.base_accuracy:5.1f}  "
          f"newest {100 * final.newest_accuracy:5.1f}  overall {100 * final.top1_accuracy:5.1f}")

# %% meta mode tunes alpha by a one-step lookahead on held-out exemplars.
# A larger validation share is needed with only five exemplars per class.
cfg = ExperimentConfig()
cfg.set("loss.mode", "meta")
cfg.set("meta.val_fraction", 0.4)
record = execute(cfg)
for report in record.reports[1:]:
    traj = report.alpha_trajectory
    print(f"step {report.step}: {len(traj)} alpha updates, final alpha {traj[-1]:.4f}")
print(f"average incremental accuracy {record.average_incremental_accuracy:.2f}")
