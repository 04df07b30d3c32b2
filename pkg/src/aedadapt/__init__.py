"""Attention-based encoder-decoder speech recognition with speaker adaptation.

Modules:

- ``autodiff``: tape-based reverse-mode differentiation over float64 arrays
- ``nn``: GRU, layer norm, linear layers and parameter sets
- ``aed``: the encoder-decoder model, losses, batching, greedy and beam decoding
- ``adapt``: KLD, adversarial (ASA) and multi-task (MTL) speaker adaptation
- ``data``: the synthetic multi-speaker corpus
- ``metrics`` / ``experiment`` / ``pipeline``: WER scoring and the adaptation grid
- ``storage`` / ``config`` / ``cli``: persistence, configuration, command line
"""

__version__ = "0.1.0"
