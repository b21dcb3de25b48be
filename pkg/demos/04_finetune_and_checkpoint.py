# %% [markdown]
# # Fine-tuning and checkpoints
#
# A pre-trained scorer can be adapted to one downstream table, either as a
# whole or only through its final linear layer.  Checkpoints are a small
# binary format: magic bytes, a JSON header, then float32 tensors.

# %%
import tempfile
from pathlib import Path

import numpy as np

from tabmeta.data import prepare
from tabmeta.evalbench import make_synthetic_corpus
from tabmeta.trainer import (
    TrainConfig,
    finetune,
    load_checkpoint,
    make_member,
    pretrain,
    save_checkpoint,
    training_loss,
)

cfg = TrainConfig(task="regression", hidden_width=64, pretrain_iters=300, patience=0, finetune_epochs=10)
suite = make_synthetic_corpus("regression", T=4, seed=2, sizes=(300, 600), heldout=1, cfg=cfg)
params = pretrain(suite.corpus, cfg)

ds, sp = prepare(suite.heldout[0], seed=0)
member = make_member(ds, sp, cfg.kind_list)
print(f"before fine-tuning: train loss {training_loss(params, member, cfg):.4f}")
for mode in ("head-only", "all"):
    tuned = finetune(params, member, cfg, mode=mode)
    print(f"after {mode:9s}: train loss {training_loss(tuned, member, cfg):.4f}")

# %%
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "scorer.ckpt"
    save_checkpoint(tuned, cfg, path, specs=member.specs)
    ck = load_checkpoint(path)
    print("header:", {k: ck.header[k] for k in ("task", "K", "kinds", "input_dim", "hidden_width", "depth")})
    print("bit-exact:", all(np.array_equal(a, b) for a, b in zip(tuned.tensors(), ck.params.tensors())))
    print("file size:", path.stat().st_size, "bytes")
