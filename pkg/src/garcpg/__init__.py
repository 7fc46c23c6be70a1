"""Generation-augmented retrieval over clinical-guideline snippets.

A diagnosis plus patient-record context is turned into a weighted query
embedding, matched against a knowledge base of guideline snippets, and
answered with the stored snippet text itself, never with generated prose.
"""

from .embedder import EmbedderFingerprint, EmbeddingVector, HashEmbedder, RemoteEmbedder, cosine_similarity, hash_embed, weighted_combine
from .pipeline import PipelineConfig, answer_case
from .query import Case, DiagnosticOutput, EhrRecord, WeightingConfig, compose_query, embed_query, time_decay_weights
from .retrieval import RetrievalConfig, SystemOutput, fuse, match_topk
from .snippet_kb import Category, KnowledgeBase, Snippet, SnippetMetadata, StructuredText, embed_all, load_kb, save_kb

__version__ = "0.1.0"
