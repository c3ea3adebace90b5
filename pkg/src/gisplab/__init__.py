"""Global iterative structured pruning on a tiny trainable transformer.

Library layout:

  autodiff   float64 tensor graphs with reverse-mode differentiation
  model      the tiny decoder transformer, masking, compaction, checkpoints
  importance first-order structure importance and block-wise normalization
  engine     the iterative pruning loop, schedules, traces, reconstruction
  baselines  local weight-activation and global magnitude pruners
  data_eval  byte tokenizer, calibration sampling, synthetic QA, metrics
  textgen    the seeded generator behind the bundled corpus
  cli        command-line entry points (train / prune / eval / sweep / trace)
"""

from . import autodiff, baselines, data_eval, engine, importance, model, textgen

__version__ = "0.1.0"

__all__ = ["autodiff", "baselines", "data_eval", "engine", "importance",
           "model", "textgen", "__version__"]
