"""Look inside the chunk gate after extractor-only training.

Field 0 carries the planted preferences, one chunk per item category. Field 1
is loud item-keyed noise. After training, the gate should lean towards field 0
and, within it, towards the chunk that matches the target item's category.
The script also writes the same export bundle as ``kser diagnostics``.

    python3 demos/02_what_the_gate_learns.py --out /tmp/gate_demo
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from kser import SyntheticSpec, prepare, train_base, train_extractor_only
from kser.experiments import export_diagnostics
from kser.model import ModelConfig
from kser.synthetic import generate
from kser.training import TrainConfig, make_splits

parser = argparse.ArgumentParser()
parser.add_argument("--out", type=Path, default=Path("gate_demo"))
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()
torch.set_num_threads(1)

spec = SyntheticSpec(n_samples=20_000, n_users=8000, n_items=300, n_categories=4, d_k=32, n_chunks=4,
                     noise_scale=3.0)
data = generate(spec, seed=0)
prep = prepare(data.samples, history_len=20)
splits = make_splits(prep.train, prep.val, prep.test, data.pack)
model_cfg = ModelConfig(hidden=[32, 16], chunks=4)
cfg = TrainConfig(max_epochs=10, patience=3, seed=args.seed)
base, _ = train_base(cfg, splits, prep.schema, model_cfg)
model, rep = train_extractor_only(TrainConfig(**{**vars(cfg), "strategy": "extractor_only"}), splits, data.pack,
                                  base, model_cfg)
print(f"extractor-only test AUC {rep.auc:.4f}")

# Gate weights for the whole test split: (samples, chunks, fields).
model.eval()
with torch.no_grad():
    b = splits.test.batch(np.arange(len(splits.test)))
    _, aux = model(b["fields"], b["history"], b["knowledge"], return_aux=True)
w = aux["gate"].numpy()
per_field = w.mean(axis=1)
field_means = {n: round(float(v), 3) for n, v in zip(data.pack.names, per_field.mean(0))}
print(f"mean gate per field: {field_means}")
print(f"field 0 above field 1 on {(per_field[:, 0] > per_field[:, 1]).mean():.1%} of test samples")

# Within field 0, compare the chunk of the item's own category with the rest.
by_id = {s.sample_id: s for s in data.samples}
cats = np.array([int(by_id[i].context["category"][1:]) for i in splits.test.split.sample_ids])
own = w[np.arange(len(cats)), cats, 0]
print(f"field-0 weight on the matching chunk {own.mean():.3f} vs all chunks {w[:, :, 0].mean():.3f}")

manifest = export_diagnostics(model, splits.test, data.pack.names, n_samples=10, seed=args.seed, out=args.out)
print(f"wrote {sorted(manifest['files'].values())} to {args.out}")
