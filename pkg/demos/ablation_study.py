"""Feature-setting ablations at desk scale.

Trains every encoder variant with the desk XE schedule over several seeds and
reports mean test CIDEr-D. Five seeds take roughly an hour on one core.
"""
import argparse

import numpy as np

from dlct.data import generate_corpus
from dlct.metrics import build_corpus_stats
from dlct.model import VARIANTS, ModelConfig
from dlct.training import TrainConfig, Trainer, evaluate

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--seeds", type=int, default=5)
parser.add_argument("--cra", default="full", choices=("full", "pe_only", "none"))
args = parser.parse_args()

ds = generate_corpus(2000, seed=0)
test = ds.splits["test"]
stats = build_corpus_stats([ex.captions for ex in test])
scores = {v: [] for v in VARIANTS}
for seed in range(args.seeds):
    for variant in VARIANTS:
        cfg = ModelConfig.desk(vocab_size=len(ds.vocab), variant=variant, cra=args.cra)
        trainer = Trainer(ds, cfg, TrainConfig.desk(seed=seed, eval_every=1000), phase="xe")
        trainer.run()
        scores[variant].append(evaluate(trainer.model, test, 5, stats)["cider_d"])
        print(f"seed {seed} {variant:>12}: {scores[variant][-1]:.3f}", flush=True)

print()
for variant, s in sorted(scores.items(), key=lambda kv: -np.mean(kv[1])):
    print(f"{variant:>12}: {np.mean(s):.3f} +- {np.std(s):.3f}")
