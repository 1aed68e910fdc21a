"""Cluster-weighted contrastive training for conditioned report generation.

A small numpy-backed library: a reverse-mode autodiff tensor core, an
encoder-decoder transformer over precomputed patch features, weak cluster
labeling (TF-IDF or external embeddings + k-means), the contrastive training
objectives, greedy/beam decoding, and a corpus evaluation suite.
"""

from .autodiff import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    decay_lr,
    grad_check,
    load_checkpoint,
    log_softmax,
    masked_mean_pool,
    matmul,
    no_grad,
    save_checkpoint,
    softmax,
)
from .datakit import Batch, Dataset, ReportRecord, SynthSpec, generate_synthetic, \
    load_dataset, make_batches, save_dataset
from .decoding import DecodeResult, beam_decode, greedy_decode, greedy_decode_batch
from .metrics import (
    EvalReport,
    KeywordTable,
    LabelVector,
    bleu,
    ce_metrics,
    evaluate_corpus,
    label_report,
    length_histogram,
    meteor_lite,
    rouge_l,
)
from .model import BatchLatents, ModelConfig, ReportGenerator, similarity_matrix
from .objective import LossConfig, ce_loss, mixture_loss, variant_loss, wcl_loss
from .text import EncodedSeq, Vocabulary, build_vocab, decode_ids, encode, tokenize
from .trainer import RunConfig, TrainLog, grid_search, train
from .weaklabel import ClusterModel, EmbeddingMatrix, kmeans, load_embeddings, tfidf_embed

__version__ = "0.1.0"
