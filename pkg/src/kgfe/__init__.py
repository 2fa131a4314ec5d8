"""Knowledge-graph guided automated feature engineering.

Exploitation derives domain features from a small knowledge base by forward
chaining; exploration searches transform compositions with a deep Q-network
whose reward trades cross-validated performance against interpretability.
"""

from .decomp import DecompositionGraph, dataset_interpretability, interpretability
from .evaluator import Learner, cross_val, default_learner
from .kg_store import KnowledgeBase, load_demo_kg, map_columns, parse_kg, parse_kg_text
from .reasoner import exploit
from .search_env import (
    PipelineResult,
    SearchConfig,
    exhaustive_oracle,
    random_baseline,
    search_space_size,
    train,
)
from .tabular import Column, Dataset, load_csv, make_folds
from .transforms import CATALOG

__version__ = "0.1.0"
