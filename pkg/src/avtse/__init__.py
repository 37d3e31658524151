"""Audio-visual target speaker extraction with reliability-aware fusion."""

from .autodiff import (AdamState, GradcheckReport, Parameter, Tape, Tensor,
                       adam_step, apply_primitive, backward, gradcheck)
from .fusion import (AttentionParams, FusionOutput, attention_fuse, attention_weights,
                     forced_fuse, normalize_clue, norm_rescale,
                     normalized_attention_fuse, summation_fuse)
from .model import ClueBundle, ExtractionModel, ModelConfig, load_checkpoint, save_checkpoint
from .objectives import (LossWeights, OracleTargets, attention_guided_loss,
                         clue_condition_loss, oracle_attention_for_condition,
                         oracle_reliability, si_sdr, si_sdr_loss, total_loss)

__version__ = "0.1.0"
