"""Success rate against perturbation size for the Linf attacks."""

from signattack import attacks as atk
from signattack.data import stack, synth_signs
from signattack.model import ModelConfig, TrainConfig, train

data = synth_signs(6, 120, 16, seed=2)
cfg = ModelConfig(input_resolution=16, num_classes=6, conv_blocks=((16, 3), (32, 3)),
                  dense_width=64)
model, _ = train(cfg, data, TrainConfig(epochs=15, seed=2))

images, labels = stack(data.test)
train_x, train_y = stack(data.train)
grid = [0, 2 / 255, 4 / 255, 8 / 255, 16 / 255]

print("eps*255 " + " ".join(f"{k:>6s}" for k in atk.SWEEP_KINDS))
rows = {k: atk.epsilon_sweep(model, k, images, labels, grid, iterations=20,
                             uap_images=train_x, uap_labels=train_y)
        for k in atk.SWEEP_KINDS}
for j, eps in enumerate(grid):
    print(f"{eps * 255:7.0f} " + " ".join(f"{rows[k][j].success_rate:6.3f}" for k in atk.SWEEP_KINDS))
