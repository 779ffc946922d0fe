"""Class-incremental semantic segmentation with evolving knowledge mining.

A frozen-backbone incremental learner: per-input filter banks generated from
the high-level feature mine knowledge out of the low-level features, which is
fused at the feature and prototype levels; supervision combines ground truth,
pseudo-labels from the previous step's frozen model, and unknown-cluster
targets for unlabeled proposals.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config, parse_config
from .protocol import TaskSpec, build_task, filter_images, remap_labels

__all__ = [
    "RunConfig",
    "TaskSpec",
    "build_task",
    "filter_images",
    "load_config",
    "parse_config",
    "remap_labels",
    "__version__",
]
