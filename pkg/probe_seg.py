"""Calibration probe: desk-config segmentation training trajectory."""
import sys
import time

import numpy as np
import torch

import icgen
from icgen.train import TrainConfig, TaskDescriptor, build_batch, lr_at, make_optimizer, train_step

steps_total = int(sys.argv[1]) if len(sys.argv) > 1 else 1200
image = int(sys.argv[2]) if len(sys.argv) > 2 else 64
batch = int(sys.argv[3]) if len(sys.argv) > 3 else 4

train_ds = icgen.build_synthetic_suite("segmentation", 24, seed=100, image_size=image,
                                       class_count=3, slice_range=(14, 26))
test_ds = icgen.build_synthetic_suite("segmentation", 6, seed=200, image_size=image,
                                      class_count=3, slice_range=(14, 26))
print("train slices:", sum(len(v) for v in train_ds.volumes),
      "test slices:", sum(len(v) for v in test_ds.volumes), flush=True)

pool = np.linspace(0.1, 1.0, 10)
cfg = TrainConfig(epochs=1, warmup_epochs=0, steps_per_epoch=steps_total, batch_size=batch, seed=0)
desc = TaskDescriptor(1, "segmentation", "random")
torch.manual_seed(0)
model = icgen.PromptCompletionNet(icgen.ModelConfig())
opt = make_optimizer(model, cfg)
rng = np.random.default_rng(0)

t0 = time.time()
warm = int(0.05 * steps_total)
losses = []
for step in range(steps_total):
    lr = lr_at(step, steps_total, warm, 1e-3)
    b = build_batch(train_ds, desc, "ar", batch, rng, cfg, pool=pool)
    losses.append(train_step(model, b, "ar", opt, cfg, lr))
    if (step + 1) % 100 == 0:
        print("step %d loss(mean50) %.4f lr %.2e elapsed %.0fs"
              % (step + 1, np.mean(losses[-50:]), lr, time.time() - t0), flush=True)
    if (step + 1) % 300 == 0 or step + 1 == steps_total:
        sub = icgen.SliceDataset("seg", "segmentation",
                                 test_ds.volumes[:2] if step + 1 < steps_total else test_ds.volumes,
                                 1, 3)
        rep = icgen.evaluate_dataset(model, sub, train_ds, mode="ar", scheme="random",
                                     seed=0, value_pool=pool)
        print("  eval@%d mIoU %.4f per-class %s" % (
            step + 1, rep.miou, {k: round(v, 3) for k, v in rep.per_class_iou.items()}), flush=True)

torch.save(model.state_dict(), "/tmp/probe_seg_model.pt")
print("TOTAL %.0fs" % (time.time() - t0), flush=True)
