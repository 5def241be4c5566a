"""Explainable recommendation at desk scale: graph embeddings, MoE adapters and a frozen toy LM."""
from .adapter import AdapterConfig, MoeAdapter
from .datagen import WorldConfig, generate_world, load_dataset, write_dataset
from .emissions import EmissionsParams, emissions_estimate
from .evaluation import (JudgeConfig, aggregate, detect_numeric_anomaly, embed_sim_score, judge_score,
                         likelihood_score, render_report, usr)
from .graph import EmbeddingTable, GnnConfig, InteractionGraph, KCoreFilter, LightGCN, k_core_filter, train_gnn
from .lm import ToyLm, ToyLmConfig, pretrain_lm
from .pipeline import (AblationFlags, EarlyStopState, TrainConfig, XRecExplainer, assemble_prompt,
                       early_stop_update, generate_explanations, train_adapter)

__version__ = "0.1.0"
