"""Chorus tokens: one short token span that serves as both a retrieval
embedding and a compressed multimodal context for generation."""
from .data import Dataset, DatasetSpec, VisionGrid, build_dataset, read_dataset, write_dataset
from .harness import EvalReport, answer_accuracy, attention_heatmap, evaluate, precision_at_1
from .inference import (GenerationConfig, cache_ratio, encode, encode_batch, generate_compressed,
                        generate_native)
from .layout import VOCAB, PromptLayout, Sample, SegmentKind, Task, assemble, validate
from .masks import AttentionMask, build_mask, causal_mask
from .model import (ModelConfig, Parameters, check_gradients, forward, init_params, load_checkpoint,
                    save_checkpoint)
from .objectives import GateConfig, LossWeights, PoolingMethod, ScoringConfig, info_nce, total_loss
from .training import TrainConfig, train

__version__ = "0.1.0"
