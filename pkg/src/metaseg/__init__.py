"""Few-shot binary segmentation from sparse annotations via meta-learning."""

__version__ = "0.1.0"

from .methods import METHODS, build_learner, deploy, meta_step  # noqa: F401
