import logging; logging.disable(logging.WARNING)
import sys, time
import numpy as np
from arne import pgm
from arne.model import ArneConfig, ArneModel
from arne.training import loss_components, Adam, choice_accuracy
from arne import tensor as T

bs = int(sys.argv[1]); lr = float(sys.argv[2])
ds = pgm.generate_dataset(64, seed=101, panel_size=32, min_rules=1, max_rules=4)
meta = ds.meta_matrix()
cfg = ArneConfig.desk(dropout_p=0.0, attn_dropout_p=0.0, f_dropout=0.0)
model = ArneModel(cfg, np.random.default_rng(0))
rng = np.random.default_rng(1)
model.set_rng(rng)
opt = Adam(model.named_parameters())
t0 = time.time()
for epoch in range(1, 301):
    order = rng.permutation(64)
    for s in range(0, 64, bs):
        idx = order[s:s+bs]
        out = model.forward_batch(ds.panels[idx])
        total, ce, bce = loss_components(out, ds.targets[idx], meta[idx], 10.0)
        total.backward(); opt.step(lr); model.zero_grads()
    with T.no_grad():
        model.eval()
        out = model.forward_batch(ds.panels)
        acc = choice_accuracy(out.choice_logits, ds.targets)
        total, ce, _ = loss_components(out, ds.targets, meta, 10.0)
        model.train()
    if epoch % 10 == 0 or acc == 1.0:
        print(f'bs={bs} lr={lr} epoch {epoch}: loss={total.item():.4f} ce={ce.item():.4f} acc={acc:.3f} ({time.time()-t0:.0f}s)', flush=True)
    if acc == 1.0:
        print(f'HIT at epoch {epoch}, {time.time()-t0:.0f}s'); break
