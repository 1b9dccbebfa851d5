"""Reference-guided image consistency correction at desk scale.

The package bundles a taped reverse-mode autodiff core, a toy
multi-modal diffusion transformer trained with an attention alignment
objective and a detail encoder, a synthetic triplet forge, an agent
workflow with human review gates, evaluation metrics, and a CLI.
"""

__version__ = "0.1.0"
