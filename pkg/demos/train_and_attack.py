"""Train a small sign classifier, then hit one image with every attack.

Runs in about a minute. Prints a Table-1-style line per attack: the clean
label and score, then the post-attack label and score ("NA" when the top
probability falls below the reject threshold).
"""

import numpy as np

from signattack import attacks as atk
from signattack.data import stack, synth_signs
from signattack.harness import percent
from signattack.model import ModelConfig, TrainConfig, evaluate, predict, train

data = synth_signs(num_classes=6, per_class=120, resolution=16, seed=1)
names = data.class_names
cfg = ModelConfig(input_resolution=16, num_classes=6, conv_blocks=((16, 3), (32, 3)),
                  dense_width=64)
model, history = train(cfg, data, TrainConfig(epochs=15, seed=1))
acc, confusion = evaluate(model, data.test)
print(f"trained: final loss {history[-1].train_loss:.3f}, test accuracy {acc:.3f}")
print(confusion)

# a test image the model gets right
images, labels = stack(data.test)
i = next(k for k, (x, y) in enumerate(zip(images, labels))
         if predict(model, x).label == y and predict(model, x).recognized)
x, y = images[i], int(labels[i])

train_x, train_y = stack(data.train)
universal = atk.uap(model, train_x, train_y, 16 / 255, stack(data.val)[0])
print(f"UAP fooling rate on val: {universal.fooling_rate:.3f}")

for kind in atk.KINDS:
    res = atk.run_attack(model, x, y, atk.AttackConfig(kind, epsilon=8 / 255), universal=universal)
    after = (f"{names[res.after.label]} {percent(res.after.score)}" if res.after.recognized
             else "NA NA")
    print(f"{kind:9s} {names[res.before.label]} {percent(res.before.score)} -> {after}"
          f"   L2={res.l2:.3f} Linf={res.linf:.3f} L0={res.l0}")
