"""Paged KV-cache inference with learned page retrieval.

Long inputs are split into fixed-width pages, each closed by a bookmark
token whose attention state doubles as the page's retrieval index.  At
inference the engine keeps a budgeted working set: sink pages, the most
recent pages, and the top-scoring retrieved pages per layer.  Training
happens in two stages: a contrastive pass that only moves the bookmark
projections and embedding row, then a language-model pass on the sparse
attention views the engine serves.
"""

from .config import (EngineConfig, ModelConfig, TrainConfig, config_snapshot,
                     load_config_file, resolve_configs)
from .data import (NeedleSample, RetrievalSample, VocabLayout, eval_needle,
                   eval_recall, gen_corpus, gen_needle, gen_needle_qa,
                   gen_pairwise, gen_synthetic_qa, load_samples, save_samples)
from .engine import (Engine, GenerateResult, RunTrace, full_attention_oracle,
                     generate)
from .errors import (CorruptPages, EmptyInput, InvalidConfig, InvalidInput,
                     InvalidSelection, InvalidState, MissingPage,
                     NumericalError, RetroPagerError, ShapeError)
from .kernels import backend_name, set_backend, set_num_threads
from .model import (ModelParams, forward, grad_check, init_params,
                    isolation_plan, load_checkpoint, save_checkpoint)
from .paging import (AugmentedSequence, Page, PagedKVStore, PageKV, augment,
                     deaugment, paginate, partition)
from .retriever import (RetrievalSelection, RetrieverSettings,
                        export_score_trace, score_pages, select_pages)
from .training import (AdamW, TrainLog, clear_freeze, frozen_plan,
                       scripted_plan, scripted_plans, stage1_freeze,
                       stage1_loss, stage2_loss, train_stage1, train_stage2)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AugmentedSequence", "CorruptPages", "EmptyInput", "Engine",
    "EngineConfig", "GenerateResult", "InvalidConfig", "InvalidInput",
    "InvalidSelection", "InvalidState", "MissingPage", "ModelConfig",
    "ModelParams", "NeedleSample", "NumericalError", "Page", "PageKV",
    "PagedKVStore", "RetrievalSample", "RetrievalSelection",
    "RetroPagerError", "RetrieverSettings", "RunTrace", "ShapeError",
    "TrainConfig", "TrainLog", "VocabLayout", "augment", "backend_name",
    "clear_freeze", "config_snapshot", "deaugment", "eval_needle",
    "eval_recall", "export_score_trace", "forward", "frozen_plan",
    "full_attention_oracle", "gen_corpus", "gen_needle", "gen_needle_qa",
    "gen_pairwise", "gen_synthetic_qa", "generate", "grad_check",
    "init_params", "isolation_plan", "load_checkpoint", "load_config_file",
    "load_samples", "paginate", "partition", "resolve_configs",
    "save_checkpoint", "save_samples", "score_pages", "scripted_plan",
    "scripted_plans", "select_pages", "set_backend", "set_num_threads",
    "stage1_freeze", "stage1_loss", "stage2_loss", "train_stage1",
    "train_stage2", "__version__",
]
