"""Tokenization, frequency-thresholded vocabulary, and the sequence codec."""

from wclgen import build_vocab, decode_ids, encode, tokenize

reports = [
    "No pleural effusion.",
    "The lungs are clear .",
    "There is a small pleural effusion.",
    "Mild edema is seen.",
    "No pleural effusion or pneumothorax.",
]
corpus = [tokenize(t) for t in reports]
print("tokenized:", corpus[0])

vocab = build_vocab(corpus, min_freq=2)
print(f"vocabulary keeps tokens seen >= 2 times: {vocab.id_to_token}")
print("'edema' seen once ->", "in vocab" if "edema" in vocab else "dropped")

seq = encode(tokenize("no pleural effusion ."), vocab, max_len=10)
print("encoded ids:", seq.ids, "length", seq.length)
print("decoded back:", repr(decode_ids(seq.ids, vocab)))

seq = encode(tokenize("mild edema is seen ."), vocab, max_len=10)
print("out-of-vocab tokens render as:", repr(decode_ids(seq.ids, vocab)))
