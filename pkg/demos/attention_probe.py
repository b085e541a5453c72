"""Does the decoder look at the right object when it says a colour?

Trains briefly (or loads ``--ckpt``), then for a few test images prints the
three most attended regions for every generated word, and finally the
colour-word hit rate over 50 images.
"""
import argparse

from dlct.checkpoint import load_model
from dlct.cli import attention_dump, color_alignment
from dlct.data import generate_corpus, region_colors
from dlct.model import ModelConfig
from dlct.training import TrainConfig, Trainer

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--ckpt", default=None, help="checkpoint trained on generate_corpus(600, seed=1)")
args = parser.parse_args()

ds = generate_corpus(600, seed=1)
if args.ckpt:
    model = load_model(args.ckpt)
else:
    trainer = Trainer(ds, ModelConfig.desk(vocab_size=len(ds.vocab)), TrainConfig.desk(eval_every=100), phase="xe")
    trainer.run()
    model = trainer.model

probe = (ds.splits["val"] + ds.splits["test"])[:50]
for ex in probe[:3]:
    colors = region_colors(ex.bundle)
    dump = attention_dump(model, ex.bundle, ds.vocab)
    print("\n" + " ".join(dump["words"]))
    for item in dump["top3"]:
        tops = "  ".join(f"r{r}({colors[r]}) {w:.2f}" for r, w in zip(item["regions"], item["weights"]))
        print(f"  {item['word']:>10}  {tops}")

hits, trials = color_alignment(model, probe, ds.vocab)
print(f"\ncolour words attending to a region of that colour: {hits}/{trials} ({hits / max(trials, 1):.0%})")
