"""Experiment matrix for the in-context color-copying failure."""
import itertools
import time

import numpy as np
import torch

import icgen
from icgen.train import TrainConfig, TaskDescriptor, lr_at, make_optimizer, train_step
from icgen.canvas import sample_palette


def build_batch_custom(ds, rng, cfg, pool, batch, terms="both", self_frac=0.0):
    """AR seg batch with configurable term set and prompt sampling."""
    import icgen.train as T
    quads = []
    for _ in range(batch):
        vols = ds.volumes
        v = vols[int(rng.integers(len(vols)))]
        i = int(rng.integers(len(v)))
        if rng.random() < self_frac:
            u = v
            j = min(max(i + int(rng.integers(-2, 3)), 0), len(v) - 1)
        else:
            u = vols[int(rng.integers(len(vols)))]
            j = int(rng.integers(len(u)))
        palette = sample_palette(range(1, ds.class_count + 1), rng, pool)
        quads.append((u.slices[j], palette.apply(u.labels[j]),
                      v.slices[i], palette.apply(v.labels[i])))
    h, w = quads[0][0].shape
    layout = T._ar_layout(h, w, 16)
    if terms == "last":
        layout = layout[-1:]
    canvases, targets = [], []
    for target_idx, rows, attn, ph, region in layout:
        cnv = np.zeros((batch, 1, rows // 2 * h, 2 * w), dtype=np.float32)
        tgt = np.zeros((batch, 1, h, w), dtype=np.float32)
        for b, (p_img, p_cnv, t_img, t_cnv) in enumerate(quads):
            elems = [p_img, p_cnv, t_img][:target_idx]
            for e_idx, el in enumerate(elems):
                r, c = divmod(e_idx, 2)
                cnv[b, 0, r * h : (r + 1) * h, c * w : (c + 1) * w] = el
            tgt[b, 0] = p_cnv if target_idx == 1 else t_cnv
        canvases.append(cnv)
        targets.append(tgt)
    return {"objective": "ar", "inputs": canvases, "targets": targets, "layout": layout}


def run(name, beta, terms, self_frac, steps, train_ds, test_ds, pool, lr=1e-3):
    cfg = TrainConfig(epochs=1, warmup_epochs=0, steps_per_epoch=steps, batch_size=4,
                      seed=0, beta=beta, peak_lr=lr)
    torch.manual_seed(0)
    model = icgen.PromptCompletionNet(icgen.ModelConfig())
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(0)
    t0 = time.time()
    for step in range(steps):
        lr_now = lr_at(step, steps, int(0.05 * steps), lr)
        b = build_batch_custom(train_ds, rng, cfg, pool, 4, terms, self_frac)
        train_step(model, b, "ar", opt, cfg, lr_now)
        if (step + 1) % 400 == 0:
            sub = icgen.SliceDataset("seg", "segmentation", test_ds.volumes[:2], 1, 3)
            rep = icgen.evaluate_dataset(model, sub, train_ds, mode="ar", scheme="random",
                                         seed=0, value_pool=pool)
            print("[%s] step %d mIoU %.4f %s (%.0fs)" % (
                name, step + 1, rep.miou,
                {k: round(v, 2) for k, v in rep.per_class_iou.items()},
                time.time() - t0), flush=True)
    return model


train_ds = icgen.build_synthetic_suite("segmentation", 24, seed=100, image_size=64,
                                       class_count=3, slice_range=(14, 26))
test_ds = icgen.build_synthetic_suite("segmentation", 6, seed=200, image_size=64,
                                      class_count=3, slice_range=(14, 26))
pool = np.linspace(0.1, 1.0, 10)

configs = [
    ("E1-beta0.1-both", 0.1, "both", 0.0),
    ("E2-beta1-last", 1.0, "last", 0.0),
    ("E3-beta0.1-last", 0.1, "last", 0.0),
    ("E4-beta0.1-both-self30", 0.1, "both", 0.3),
]
for name, beta, terms, sf in configs:
    run(name, beta, terms, sf, 800, train_ds, test_ds, pool)
print("MATRIX DONE", flush=True)
