"""Attention-aligned adapter tuning on a toy visual decoder.

A small vision-text decoder whose query/key projections carry routed
low-rank expert adapters, trained so that the visual attention of its
most visually active heads concentrates on prompt-selected weak-label
regions. Includes the synthetic planted-RoI benchmark, attention
metrics, and sweep/ablation drivers used to verify the mechanism.
"""

import os as _os

# every matrix here is tiny; BLAS thread pools only add sync overhead
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .adapters import AdapterConfig, AdapterSet, ExpertBank, GatingNetwork, \
    LoRAAdapter, RouterDecision, adapted_projection, kmoe_delta_per_token, \
    qmoe_delta
from .attention import AttentionStack, HeadSelection, Spans, VisualAttentionView, \
    extract_visual_view, mean_map, refined_map, select_heads, visual_ratio
from .autodiff import Tensor, finite_diff_check, no_grad
from .data import DataSpec, SyntheticSample, generate_dataset
from .metrics import MetricsReport, coverage_score, evaluate, intensity_alignment
from .model import ModelConfig, VisualDecoder, VisualInput, load_checkpoint, \
    save_checkpoint
from .training import TASK_PROFILES, AdamW, LossBreakdown, TrainConfig, \
    alignment_loss, compute_weak_labels, total_loss, train
from .weaklabels import EmbedderBackend, Segment, SyntheticOracleBackend, \
    WeakLabelSet, cosine_sim, mask_to_tokens, select_weak_labels

__version__ = "0.1.0"
