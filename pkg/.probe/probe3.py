import sys, logging, torch
logging.basicConfig(level=logging.INFO)
torch.set_num_threads(1)
from capsvqa.train import TrainConfig, train

tag, mask_mode, epochs = sys.argv[1], sys.argv[2], int(sys.argv[3])
cfg = TrainConfig(
    mode="mac", steps=4, num_caps=8, d=64, mask_mode=mask_mode,
    train_scenes=2000, val_scenes=200, qa_per_scene=10,
    epochs=epochs, data_seed=0, init_seed=0, shuffle_seed=0,
    learning_rate=1e-3, lr_decay_epoch=22,
)
summary = train(cfg, f"/root/pkg/.probe/{tag}")
print("BEST", tag, summary["best_val_accuracy"])
