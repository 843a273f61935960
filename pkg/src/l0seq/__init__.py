"""Desk-scale sequence-to-sequence toolkit with learned stochastic
pruning of encoder outputs and count-weighted sparse cross-attention.

The public surface re-exports the pieces most programs need; the
submodules stay importable for everything else.
"""

from . import tensor
from .analysis import EntropyReport, MassReport, attention_mass, encoder_entropy
from .data import (BOS, EOS, PAD, UNK, Corpus, Vocab, build_vocab,
                   make_batches, make_toy_corpus, pad_batch)
from .errors import (ConfigError, DataError, DegenerateMemoryError,
                     NumericError, ShapeError)
from .gates import (GateSet, apply_gates_eval, apply_gates_train, gate_report,
                    place_gates, predict_log_alpha, sparsity_rate)
from .hardconcrete import (DEFAULT_PARAMS, HardConcreteParams, expected_gate,
                           expected_l0, open_probability, prob_one, prob_zero,
                           sample_gate)
from .model import (DenseMemory, Model, ModelConfig, beam_decode,
                    greedy_decode)
from .patterns import (FrequencyTable, SparsityPattern, build_drop_set_freq,
                       freq_pattern, group_pattern, mask_corpus, mask_sentence,
                       pattern_decode, tag_pattern)
from .rng import RngState
from .sparse import (BenchRecord, CompactedMemory, attend_with_counts,
                     bench_cross_attention, compact, compact_batch,
                     count_softmax, count_softmax_np)
from .tensor import Tensor, backward, no_grad, set_mode
from .training import (TrainConfig, TrainResult, evaluate, finetune_l0drop,
                       joint_loss, lambda_schedule, lr_schedule, train)

__version__ = "0.1.0"
