"""Do simple purification defenses or a different victim undo the protection?

    python demos/03_defenses_and_transfer.py [cache_dir]
"""
import sys

from atklab.attack import run_attack
from atklab.datagen import generate_set, stack
from atklab.evalkit import delta_row, paired_eval, transfer_eval
from atklab.workbench import EVAL_SEED, desk_config, load_or_train

cache = sys.argv[1] if len(sys.argv) > 1 else ".model_cache"
m = load_or_train(cache)
x = stack(generate_set(8, EVAL_SEED, 32))[0]
adv = run_attack(x, desk_config("atkpdm_plus"), m.victim_a, m.featnet, m.vae).adv

for d in ("none", "crop_resize", "jpeg25"):
    rep = paired_eval(x, adv, m.victim_a, 500, (0, 1), m.featnet, defense=d)
    print(f"defense {d:12s} SSIM_effect {rep.mean('SSIM_effect'):.3f}")

white = paired_eval(x, adv, m.victim_a, 500, (0, 1), m.featnet)
black = transfer_eval(x, adv, m.victim_b, 500, (0, 1), m.featnet)
print("black-box minus white-box:", {k: round(v, 3) for k, v in delta_row(white, black).items()})
