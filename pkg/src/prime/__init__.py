"""Missing-aware multimodal pretraining with a shared prototype memory bank.

The package bundles a small f64 autodiff core, a synthetic multimodal cohort
generator, the prototype-imputation model (tokenizers, prototype bank, MoE
fusion backbone), self-supervised objectives, survival/classification heads,
evaluation statistics, and a reproducible experiment CLI.
"""

__version__ = "0.1.0"
