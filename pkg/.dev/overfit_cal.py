import logging; logging.disable(logging.WARNING)
import time
import numpy as np
from arne import pgm
from arne.model import ArneConfig, ArneModel
from arne.training import TrainConfig, loss_components, Adam, choice_accuracy
from arne import tensor as T

ds = pgm.generate_dataset(64, seed=101, panel_size=32, min_rules=1, max_rules=4)
meta = ds.meta_matrix()

for lr in (3e-4, 1e-3):
    cfg = ArneConfig.desk(dropout_p=0.0, attn_dropout_p=0.0, f_dropout=0.0)
    model = ArneModel(cfg, np.random.default_rng(0))
    model.set_rng(np.random.default_rng(1))
    opt = Adam(model.named_parameters())
    t0 = time.time()
    hit = None
    for epoch in range(1, 301):
        out = model.forward_batch(ds.panels)
        total, ce, bce = loss_components(out, ds.targets, meta, 10.0)
        total.backward()
        opt.step(lr)
        model.zero_grads()
        acc = choice_accuracy(out.choice_logits, ds.targets)
        if epoch % 20 == 0 or acc == 1.0:
            print(f'lr={lr} epoch {epoch}: loss={total.item():.4f} ce={ce.item():.4f} acc={acc:.3f} ({time.time()-t0:.0f}s)', flush=True)
        if acc == 1.0:
            hit = epoch
            break
    print(f'lr={lr}: 100% at epoch {hit}, {time.time()-t0:.0f}s', flush=True)
