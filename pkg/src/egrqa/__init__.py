"""Retrieval-augmented expand-guess-refine answering for medical multiple-choice questions."""

from .chat import ChatConfig, ChatRequest, ChatResponse, RemoteChat, ScriptedMock
from .corpus import ChunkRecord, SourceDocument, SplitterConfig, ingest_directory, split_document
from .embedding import EmbedderConfig, EmbeddingVector, HashEmbedder, RemoteEmbedder, hash_embed
from .evaluation import EvalReport, EvalRun, SubsetSpec, accuracy, compare_strategies, load_dataset, select_subset
from .index import ScoredChunk, VectorIndex, build_index, load_index, save_index
from .pipeline import McqItem, PipelineConfig, PipelineTrace, extract_letter, run_item, run_item_direct
from .stats import normal_sf, two_proportion_test

__version__ = "0.1.0"

__all__ = [
    "ChatConfig", "ChatRequest", "ChatResponse", "ChunkRecord", "EmbedderConfig", "EmbeddingVector",
    "EvalReport", "EvalRun", "HashEmbedder", "McqItem", "PipelineConfig", "PipelineTrace", "RemoteChat",
    "RemoteEmbedder", "ScoredChunk", "ScriptedMock", "SourceDocument", "SplitterConfig", "SubsetSpec",
    "VectorIndex", "accuracy", "build_index", "compare_strategies", "extract_letter", "hash_embed",
    "ingest_directory", "load_dataset", "load_index", "normal_sf", "run_item", "run_item_direct",
    "save_index", "select_subset", "split_document", "two_proportion_test",
]
