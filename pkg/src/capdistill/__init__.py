"""Knowledge distillation for compact encoder-decoder caption generators.

Library layout:

* :mod:`capdistill.numerics` — tensor substrate with reverse-mode gradients
* :mod:`capdistill.synthworld` — procedural paired / audio-only data
* :mod:`capdistill.model` — teacher and student captioners
* :mod:`capdistill.losses` — supervised, sequence-KD and encoder-KD losses
* :mod:`capdistill.decode` — greedy / beam search, pseudo-labeling
* :mod:`capdistill.distill` — training loops and experiment protocols
* :mod:`capdistill.metrics` — BLEU-4, ROUGE-L, CIDEr-D, corpus evaluation
* :mod:`capdistill.profiling` — parameter/FLOP counts and latency benchmarks
* :mod:`capdistill.cli` — reproducible experiment pipeline commands
"""

__version__ = "0.1.0"
