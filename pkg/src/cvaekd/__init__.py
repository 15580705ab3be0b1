"""Retrieval-conditioned conditional VAE with knowledge distillation for news-to-report generation."""
from .corpus import (
    EncodedExample,
    NewsReportPair,
    Vocabulary,
    batch_iter,
    build_vocabulary,
    encode_example,
    load_corpus,
    synthetic_corpus,
)
from .latent import GaussianParams, gaussian_head, kl_divergence, product_of_experts, reparameterize
from .metrics import EvalPair, bleu, rouge_l, rouge_n, score_all
from .model import CvaeKdConfig, CvaeKdModel, KnowledgeBase, LossBreakdown, compute_losses, generate, make_batch
from .retrieval import NeighborIndex, build_index, gather_background, query_neighbors
from .teacher import TeacherConfig, TeacherLM, distillation_loss, soft_targets, teacher_embed, train_teacher
from .training import fit, load_model, save_model, train_step

__version__ = "0.1.0"
