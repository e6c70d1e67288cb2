"""
BYOL next to the supervised loss
================================

With shared views the hard augmentation pipeline produces two views per
image: the supervised loss reads the first, BYOL pairs the two. The target
network is never trained directly; it trails the online encoder and
projector as an exponential moving average.
"""

import tempfile

import numpy as np

from fewshot_ssl import AugmentSet, EncoderConfig, MultiTaskModel, TrainConfig, generate_toy_corpus, ingest, train
from fewshot_ssl.model import make_views

root = tempfile.mkdtemp(prefix="toy_")
data = ingest(generate_toy_corpus(root, n_classes=6, per_class=32, size=32, split=(6, 0, 0)))["train"]
aug = AugmentSet.standard(32, 4)
active = {"supervised", "byol"}

# views per image under each policy
idx = np.arange(8)
for policy in ("separate", "shared"):
    views = make_views(data.images[idx], idx, active, policy, aug, seed=0)
    print(policy, "views per image:", views.n_generated)

model = MultiTaskModel(EncoderConfig(3, 32, (16, 32, 32, 32), "plain_conv", 32), data.num_classes, seed=0)
start = model.target_encoder.stage0.conv.weight.data.copy()

step_times = {}
for policy in ("separate", "shared"):
    trace = []
    cfg = TrainConfig(epochs=2, batch_size=64, decay_epochs=(), active_tasks="sup,byol", view_policy=policy, tau=0.99)
    res = train(cfg, data, model, augment=aug, trace=trace)
    step_times[policy] = float(np.median([s.seconds for s in trace]))
    print(policy, "byol loss per step", [round(v, 3) for v in res.loss_curve("byol")])
print("median step seconds", {k: round(v, 3) for k, v in step_times.items()})

# with tau = 0.99 the target has moved only a little towards the online weights
online = model.encoder.stage0.conv.weight.data
target = model.target_encoder.stage0.conv.weight.data
print("target-online gap", float(np.abs(target - online).mean()), "target drift", float(np.abs(target - start).mean()))
