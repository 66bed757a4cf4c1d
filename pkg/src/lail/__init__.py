"""CTC speech recognition with a language-aware intermediate loss, on numpy.

Submodules:

- ``tensor``, ``nn``, ``optim``: reverse-mode autodiff and layers (fp64)
- ``encoder``: Conformer / Transformer encoder with intermediate taps
- ``ctc``: CTC loss, brute-force oracle, greedy and prefix-beam decoding
- ``lm``: character tokenizer and a small frozen causal LM
- ``connector``: down-sampling connectors and the intermediate LM loss
- ``data``: synthetic grammar corpus and phoneme-feature rendering
- ``train``: joint training, WER evaluation, ablation grid
- ``config``, ``report``, ``cli``: config files, tables, command line
"""

from .connector import ConnectorStack, LAILConfig, lail_loss, total_loss
from .ctc import ctc_brute_force, ctc_loss, greedy_decode, prefix_beam_search
from .data import DataParams, generate_dataset, load_dataset, save_dataset
from .encoder import ConfigurationError, Encoder, EncoderConfig
from .lm import LM_TIERS, CausalLM, CausalLMConfig, Tokenizer, clm_loss, lm_pretrain
from .tensor import ContractError, DimensionError, NumericError, Tensor
from .train import ASRModel, TrainConfig, evaluate_wer, levenshtein, train_asr

__version__ = "0.1.0"
