"""Weak labeling: TF-IDF report embeddings plus seeded k-means clustering."""

from collections import Counter

from wclgen import SynthSpec, build_vocab, generate_synthetic, kmeans, tfidf_embed, tokenize
from wclgen.weaklabel import assign_labels

spec = SynthSpec(seed=3, n_train=300, n_val=0, n_test=0,
                 patch_count=4, feature_dim=16, noise_sigma=0.05)
dataset = generate_synthetic(spec)
records = dataset.split_records("train")
corpus = [tokenize(r.report) for r in records]
vocab = build_vocab(corpus, min_freq=3)

emb = tfidf_embed(corpus, vocab)
print(f"embedded {emb.rows} reports into {emb.dim}-dim tf-idf space")

model = kmeans(emb, k=14, seed=0)
print(f"k-means: k={model.k}, inertia={model.inertia:.3f}, "
      f"iterations={model.iterations_run}")
print("cluster sizes:", sorted(Counter(model.labels.tolist()).values(), reverse=True))

labels = assign_labels(model, [r.record_id for r in records])
example = records[0]
print(f"\n{example.record_id} -> cluster {labels[example.record_id]}")
print("  text:", example.report)
same = [r for r in records[1:] if labels[r.record_id] == labels[example.record_id]]
if same:
    print("  a same-cluster neighbor (a 'hard' negative during training):")
    print("  text:", same[0].report)
