"""Bidirectional captioning pretraining over paired images and reports.

Subpackages: ``tensor``/``optim``/``rng`` (autodiff engine and optimizer),
``textpipe`` (vocabulary, tokenization, report cleaning), ``model`` (twin
causal decoders over a conv encoder), ``data`` (synthetic corpus and
augmentation), ``training`` (pretraining, checkpoints, linear probing),
``caption`` (nucleus sampling and report modes), ``metrics`` (classification,
text and clinical-efficacy metrics), ``cli`` (command-line workbench).
"""

__version__ = "0.1.0"
