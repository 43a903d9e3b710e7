"""Differentially private synthesis of relational databases linked by foreign keys."""

from .orchestrator import SynthesisResult, synthesize_database
from .privacy import PrivacyParams
from .relational import Database, Relation, RelationSchema, load_database, write_database
from .synthesis import SynthesisConfig

__version__ = "0.1.0"

__all__ = ["Database", "PrivacyParams", "Relation", "RelationSchema", "SynthesisConfig", "SynthesisResult",
           "load_database", "synthesize_database", "write_database", "__version__"]
