"""Train (or load) the desk model set and print what each model reached.

    python demos/01_train_desk_models.py [cache_dir]

First run trains four small models on one CPU core (about 40 minutes);
later runs load the cached checkpoints.
"""
import logging
import sys

from atklab.workbench import load_or_train

logging.basicConfig(level=logging.INFO, format="%(message)s")

cache = sys.argv[1] if len(sys.argv) > 1 else ".model_cache"
models = load_or_train(cache)
for name, rec in models.record.items():
    held = {k: v for k, v in rec.items() if k.startswith("heldout")}
    print(f"{name:9s} epochs {rec['epochs']:3d}  final loss {rec['final_loss']:.4f}  "
          f"cpu {rec['cpu_seconds'] / 60:5.1f} min  {held}")
