"""A few small incremental-transfer experiments, end to end.

Run with ``python example.py``. Every section finishes in well under a minute
on a laptop.
"""

import numpy as np

from itl_sim.cli import setup_logging
from itl_sim.config import ExperimentConfig, ScenarioConfig
from itl_sim.metrics_report import mean_accuracy, monotonicity, summarize
from itl_sim.runner import run_grid

setup_logging("WARNING")


def small_config(**overrides) -> ExperimentConfig:
    config = ExperimentConfig(name="example", repeats=3)
    config.task.num_classes = 5
    config.task.dim = 16
    config.task.per_center_counts = [40, 10, 10]
    config.model.hidden = [32]
    config.schedule.kind = "swt"
    config.schedule.epochs_per_center = 10
    config.optimizer.batch_size = 20
    config.optimizer.lr = 0.01
    config.monitor.e_val = 3
    config.monitor.e_stop = 6
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


def print_table(results):
    print(f"{'method':<10} {'accuracy':>9} {'std':>6} {'monotonicity':>13} {'vs ft':>8}")
    for s in summarize(results):
        verdict = s.significance.value if s.significance else "-"
        print(f"{s.method:<10} {s.accuracy:>9.2f} {s.std:>6.2f} {s.monotonicity:>13.3f} {verdict:>8}")


# Example 1: sequential transfer over five clean centers
print("== Example 1: SWT over five clean centers ==")
config = small_config(methods=["ft", "ewc", "lwf", "imm-mean"])
print_table(run_grid(config, progress=False))

# Example 2: the last center is noisy
print("\n== Example 2: noisy last center ==")
config = small_config(
    methods=["ft", "mas", "imm-mode"],
    scenarios=[ScenarioConfig("noisy-5", noisy_centers=[5], sigma=50.0)],
)
print_table(run_grid(config, progress=False))

# Example 3: cyclic transfer, one accuracy curve in full
print("\n== Example 3: CWT, five rounds of two epochs ==")
config = small_config(methods=["si"], repeats=1)
config.schedule.kind = "cwt"
config.schedule.transfer_every = 2
config.schedule.iterations = 5
(result,) = run_grid(config, progress=False)
np.set_printoptions(precision=1, suppress=True)
print("mean accuracy after every visit:")
print(np.nanmean(result.matrix.values, axis=0))
print(f"a_mean = {mean_accuracy(result.matrix):.2f}, m_mean = {monotonicity(result.matrix):.3f}")

# Example 4: where the sequential methods sit between the two baselines
print("\n== Example 4: joint and independent baselines ==")
config = small_config(methods=["ft"])
results = run_grid(config, baselines=["joint", "it"], progress=False)
print_table(results)
it_runs = [r for r in results if r.method == "it"]
print(f"independent models: local {np.mean([r.extra['local'] for r in it_runs]):.2f}, "
      f"global {np.mean([r.extra['global'] for r in it_runs]):.2f}")
