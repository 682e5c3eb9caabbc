"""drforge: multi-task instruction tuning for chest radiographs at desk scale.

Builds image-instruction-label triplets for classification, localization,
segmentation and report generation, trains a small unified seq2seq model
over one discrete token vocabulary, and evaluates with the full clinical
metric suite (IoU/Dice, CTR/PCR bands, AUC/F1, BLEU/ROUGE/METEOR, CE
entity and attribute metrics) plus a two-protocol reader study service.
"""

__version__ = "0.1.0"
