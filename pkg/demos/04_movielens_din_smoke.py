"""Sanity floor on real data: a DIN-lite base model on MovieLens-1M.

Download and unzip ml-1m yourself (https://grouplens.org/datasets/movielens/1m/),
then:

    python3 demos/04_movielens_din_smoke.py /path/to/ml-1m

Ratings above 4 count as clicks. Genre and user demographics become context
fields, the 30 most recent positive items form the history, and the split is
chronological 8:1:1. There is no LLM knowledge pack here; this only checks
that the backbone and pipeline behave on real logs.
"""
import argparse
import tempfile
import time
from pathlib import Path

from kser import convert_movielens_1m, load_interactions, prepare, train_base
from kser.model import ModelConfig
from kser.training import TrainConfig, make_splits

parser = argparse.ArgumentParser()
parser.add_argument("ml1m", type=Path)
parser.add_argument("--epochs", type=int, default=5)
args = parser.parse_args()

start = time.perf_counter()
with tempfile.TemporaryDirectory() as tmp:
    tsv = Path(tmp) / "ml1m.tsv"
    print(f"converted {convert_movielens_1m(args.ml1m, tsv)} ratings")
    prep = prepare(load_interactions(tsv, "movielens"), history_len=30)
print(f"splits {prep.counts}; positive rate {prep.train.labels.mean():.3f}")

splits = make_splits(prep.train, prep.val, prep.test)
_, rep = train_base(TrainConfig(max_epochs=args.epochs, batch_size=1024), splits, prep.schema,
                    ModelConfig(backbone="din_lite", hidden=[200, 80]))
for h in rep.history:
    print(f"epoch {h['epoch']}: train loss {h['train_loss']:.4f}  val AUC {h['val_auc']:.4f}")
print(f"best val AUC {rep.val_auc:.4f}, test AUC {rep.auc:.4f}, {time.perf_counter() - start:.0f}s")
