"""Train a desk-scale captioner end to end and look at what it says.

A shortened run by default (a 600-example corpus, 6 XE epochs, 1 SCST epoch)
so it finishes in about a minute. ``--full`` uses the 2000-example desk corpus
and the full desk schedule.
"""
import argparse

from dlct.data import generate_corpus
from dlct.model import ModelConfig
from dlct.training import TrainConfig, Trainer, evaluate

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--full", action="store_true")
parser.add_argument("--out", default=None, help="keep checkpoints and logs here")
args = parser.parse_args()

n, tcfg = (2000, TrainConfig.desk()) if args.full else (600, TrainConfig.desk(xe_epochs=6, scst_epochs=1))
ds = generate_corpus(n, seed=0)
trainer = Trainer(ds, ModelConfig.desk(vocab_size=len(ds.vocab)), tcfg, args.out)

for rec in trainer.run():
    print(f"{rec['phase']:>4} epoch {rec['epoch']}: loss {rec['loss']:8.3f}  "
          f"val loss {rec['val_loss']:.3f}  CIDEr-D {rec['cider_d']:.3f}  BLEU-4 {rec['bleu4']:.3f}")

test = ds.splits["test"]
result = evaluate(trainer.model, test, k=5)
print(f"\ntest CIDEr-D {result['cider_d']:.3f}")
for ex, cap in list(zip(test, result["captions"]))[:5]:
    print("  model:", " ".join(ds.vocab.decode(cap)))
    print("  truth:", " ".join(ds.vocab.decode(ex.captions[0])))
