"""Grad-CAM panels before and after a PGD attack, written as PPM files."""

import sys
from pathlib import Path

from signattack import attacks as atk
from signattack.data import stack, synth_signs
from signattack.gradcam import explanation_triptych, gradcam
from signattack.images import write_ppm
from signattack.model import ModelConfig, TrainConfig, predict, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "explain_demo")
out.mkdir(exist_ok=True)

data = synth_signs(6, 120, 32, seed=3)
cfg = ModelConfig(input_resolution=32, num_classes=6, dense_width=64)
model, _ = train(cfg, data, TrainConfig(epochs=10, seed=3))

images, labels = stack(data.test)
x, y = images[0], int(labels[0])
res = atk.pgd(model, x, y, 8 / 255)

before = gradcam(model, x)  # predicted class, last conv layer
p = predict(model, res.adversarial_image)
after = gradcam(model, res.adversarial_image, p.label if p.recognized else before.target_class)

write_ppm(out / "before.ppm", explanation_triptych(x, before))
write_ppm(out / "after.ppm", explanation_triptych(res.adversarial_image, after))
print(f"class {data.class_names[before.target_class]} -> "
      f"{data.class_names[p.label] if p.recognized else 'NA'}; panels in {out}/")
