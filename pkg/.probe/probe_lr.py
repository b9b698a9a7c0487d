import sys, logging, torch
logging.basicConfig(level=logging.INFO)
torch.set_num_threads(1)
from capsvqa.train import TrainConfig, train

mask_mode, seed, epochs, lr = sys.argv[1], int(sys.argv[2]), int(sys.argv[3]), float(sys.argv[4])
cfg = TrainConfig(
    mode="mac", steps=4, num_caps=8, d=64, mask_mode=mask_mode,
    train_scenes=2000, val_scenes=200, qa_per_scene=10,
    epochs=epochs, data_seed=0, init_seed=seed, shuffle_seed=seed,
    learning_rate=lr,
)
out = f"/root/pkg/.probe/{mask_mode}_lr{lr:g}_s{seed}"
summary = train(cfg, out)
print("BEST", mask_mode, lr, seed, summary["best_val_accuracy"])
