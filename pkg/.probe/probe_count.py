import sys, time, torch, numpy as np
import torch.nn.functional as F
torch.set_num_threads(1)
from capsvqa.train import TrainConfig, prepare_data, make_batch, evaluate_accuracy
from capsvqa.text import Vocabulary
from capsvqa.model import VqaModel, init_parameters
from capsvqa.world import gen_dataset

mask_mode = sys.argv[1] if len(sys.argv) > 1 else "soft"
train_ds = gen_dataset(1000, 10, seed=0)
val_ds = gen_dataset(100, 10, seed=10**6)
train_ds.questions = [q for q in train_ds.questions if q.family == "count"]
val_ds.questions = [q for q in val_ds.questions if q.family == "count"]
print("count-only:", len(train_ds.questions), len(val_ds.questions))
vocab = Vocabulary(t for q in train_ds.questions for t in q.question_tokens)
cfg = TrainConfig(mask_mode=mask_mode)
tdata = prepare_data(train_ds, vocab, "oracle", "mac", 4)
vdata = prepare_data(val_ds, vocab, "oracle", "mac", 4)
model = VqaModel(cfg.model_config(len(vocab), 10))
init_parameters(model, 0)
opt = torch.optim.Adam(model.parameters(), lr=1e-3)
rng = np.random.default_rng(0)
for epoch in range(1, 41):
    order = rng.permutation(len(tdata))
    tot = 0.0
    for s in range(0, len(order), 64):
        idx = order[s:s+64]
        tokens, lengths, feats, targets, layouts = make_batch(tdata, idx)
        opt.zero_grad()
        out = model(tokens, lengths, feats, layouts)
        loss = F.cross_entropy(out.answer_logits, targets)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 8.0)
        opt.step()
        tot += float(loss.detach()) * len(idx)
    if epoch % 4 == 0 or epoch <= 4:
        acc = evaluate_accuracy(model, vdata)
        tacc = evaluate_accuracy(model, tdata)
        print(f"epoch {epoch}: loss {tot/len(order):.4f} train {tacc:.3f} val {acc:.3f}", flush=True)
