import sys, time, torch, numpy as np
import torch.nn.functional as F
torch.set_num_threads(1)
from capsvqa.train import TrainConfig, prepare_data, make_batch, evaluate_accuracy
from capsvqa.text import Vocabulary
from capsvqa.model import VqaModel, init_parameters
from capsvqa.world import gen_dataset

variant = sys.argv[1]
train_ds = gen_dataset(1000, 10, seed=0)
val_ds = gen_dataset(100, 10, seed=10**6)
train_ds.questions = [q for q in train_ds.questions if q.family == "count"]
val_ds.questions = [q for q in val_ds.questions if q.family == "count"]
vocab = Vocabulary(t for q in train_ds.questions for t in q.question_tokens)
cfg = TrainConfig(mask_mode="soft")
tdata = prepare_data(train_ds, vocab, "oracle", "mac", 4)
vdata = prepare_data(val_ds, vocab, "oracle", "mac", 4)
model = VqaModel(cfg.model_config(len(vocab), 10))
init_parameters(model, 0)
lr = 1e-3
if variant == "kproj3":
    with torch.no_grad():
        model.kproj.map.weight.mul_(3.0)
elif variant == "lr2":
    lr = 2e-3
elif variant == "attn_gain":
    with torch.no_grad():
        model.cell.attend.weight.mul_(4.0)
        model.cell.interaction.weight.mul_(2.0)
opt = torch.optim.Adam(model.parameters(), lr=lr)
rng = np.random.default_rng(0)
t0 = time.time()
for epoch in range(1, 61):
    order = rng.permutation(len(tdata))
    for s in range(0, len(order), 64):
        idx = order[s:s+64]
        tokens, lengths, feats, targets, layouts = make_batch(tdata, idx)
        opt.zero_grad()
        out = model(tokens, lengths, feats, layouts)
        loss = F.cross_entropy(out.answer_logits, targets)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 8.0)
        opt.step()
    if epoch % 10 == 0:
        print(f"{variant} ep{epoch}: train {evaluate_accuracy(model, tdata):.3f} val {evaluate_accuracy(model, vdata):.3f} ({time.time()-t0:.0f}s)", flush=True)
