# %% [markdown]
# # One scorer, many tables
#
# Pre-train a small scorer jointly on several synthetic classification
# tables that differ in width and class count, then apply it unchanged to
# tables it never saw.  The iteration count is kept small so the demo
# finishes in seconds; the acceptance suite uses 2000.

# %%
import numpy as np

from tabmeta.data import prepare
from tabmeta.evalbench import knn_predict_batch, make_synthetic_corpus, metrics
from tabmeta.metric import metric_specs
from tabmeta.trainer import TrainConfig, TrainHistory, predict_batch, pretrain

cfg = TrainConfig(task="classification", K=32, hidden_width=128, pretrain_iters=400, patience=0, seed=0)
suite = make_synthetic_corpus("classification", T=6, seed=3, sizes=(300, 800), heldout=2, cfg=cfg)
for m in suite.corpus.members:
    print(f"{m.dataset.name}: d={m.dataset.d:2d} classes={m.dataset.n_classes} rows={m.dataset.n}")

# %%
history = TrainHistory()
params = pretrain(suite.corpus, cfg, history=history)
print(f"mean loss, first 50 iterations {np.mean(history.losses[:50]):.3f}, "
      f"last 50 {np.mean(history.losses[-50:]):.3f}")

# %% [markdown]
# On the held-out tables, the scorer only needs a labeled reference set.
# Compare against kNN with the same weighted distance.

# %%
for table in suite.heldout:
    ds, sp = prepare(table, seed=0)
    specs = metric_specs(ds.X[sp.train], ds.Y[sp.train], "classification", cfg.kind_list)
    direct = predict_batch(params, ds, sp.train, specs, cfg, ds.X[sp.test])
    knn = knn_predict_batch(ds.X[sp.test], ds, specs[0], cfg.k, "classification", "softmax", subset=sp.train)
    truth = ds.Y[sp.test]
    print(f"{table.schema.name}: d={ds.d} classes={ds.n_classes} "
          f"direct {metrics(direct, truth, 'classification'):.3f}  kNN {metrics(knn, truth, 'classification'):.3f}")
