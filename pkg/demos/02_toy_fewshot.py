"""
Few-shot evaluation on the toy corpus
=====================================

Generate a small synthetic corpus, score a freshly initialised encoder on
5-way 5-shot episodes, train it on the base classes with the supervised
loss and score it again. Takes a minute or two on a laptop.
"""

import tempfile

from fewshot_ssl import (
    AugmentSet,
    EncoderConfig,
    EpisodeSpec,
    MultiTaskModel,
    TrainConfig,
    evaluate,
    generate_toy_corpus,
    ingest,
    train,
)

root = tempfile.mkdtemp(prefix="toy_")
manifest = generate_toy_corpus(root, n_classes=13, per_class=40, size=32, split=(8, 0, 5), seed=0)
data = ingest(manifest)
print({name: (len(ds), ds.num_classes) for name, ds in data.items()})

encoder = EncoderConfig(3, 32, (16, 32, 64, 64), "plain_conv", 64)
model = MultiTaskModel(encoder, data["train"].num_classes, seed=0)
episodes = EpisodeSpec(n_way=5, k_shot=5, q_query=15, n_episodes=100, seed=1)

# random conv features already carry some signal on these images
before = evaluate(model.encoder, data["test"], episodes, data["train"].class_names)
print("fresh encoder  ", before.summary())

cfg = TrainConfig(epochs=25, batch_size=64, lr=0.05, decay_epochs=(18,), active_tasks="sup", seed=0)
train_log = []
train(cfg, data["train"], model, sink=train_log.append, augment=AugmentSet.standard(32, 4))
print("loss by epoch  ", [round(r.loss_total, 3) for r in train_log[::5]])

after = evaluate(model.encoder, data["test"], episodes, data["train"].class_names)
print("trained encoder", after.summary())
