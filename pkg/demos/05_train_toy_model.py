"""Train a small model on a synthetic corpus and watch it memorize.

Takes about half a minute on one CPU core.
"""

import tempfile

from wclgen import LossConfig, ModelConfig, RunConfig, SynthSpec, build_vocab, \
    generate_synthetic, tokenize, train
from wclgen.weaklabel import assign_labels, kmeans, tfidf_embed

spec = SynthSpec(seed=21, n_train=32, n_val=8, n_test=8,
                 patch_count=8, feature_dim=24, noise_sigma=0.05)
dataset = generate_synthetic(spec)
train_records = dataset.split_records("train")
corpus = [tokenize(r.report) for r in train_records]
vocab = build_vocab(corpus, min_freq=1)

clusters = kmeans(tfidf_embed(corpus, vocab), k=4, seed=0)
labels = assign_labels(clusters, [r.record_id for r in train_records])

cfg = RunConfig(
    model=ModelConfig(vocab_size=len(vocab), max_len=48, feature_dim=24,
                      d_model=64, heads=4, layers=2, d_proj=32, dropout=0.0),
    loss=LossConfig(lam=0.2, alpha=2.0, tau=1.0, variant="wcl"),
    epochs=30, batch_size=8, lr_other=2e-3, lr_visual=1e-3, lr_decay=0.98, seed=5)

out_dir = tempfile.mkdtemp(prefix="wclgen-demo-")
log = train(cfg, dataset, labels, vocab, out_dir)

print("epoch  ce      wcl     val_bleu4")
for e in log.epochs[::5] + [log.epochs[-1]]:
    print(f"{e.epoch:>5}  {e.ce:.4f}  {e.wcl:.4f}  {e.val_bleu4:.4f}")
print(f"\nbest epoch {log.best_epoch}, checkpoint in {out_dir}")
