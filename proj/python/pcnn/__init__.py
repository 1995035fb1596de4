"""Python interface to the PCNN re-ranking core.

JSON-valued results come back as dicts; configs may be given as dicts.
"""

import json
from pathlib import Path

from . import _core
from ._core import ClassIndex, Comparator, EmbeddingStore, PcnnError, ProbabilityTable

__all__ = [
    "ClassIndex",
    "Comparator",
    "EmbeddingStore",
    "PcnnError",
    "ProbabilityTable",
    "evaluate_rerank",
    "export_explanations",
    "knn_classify",
    "run_experiment",
    "sample_pairs",
    "sanity_suite",
    "synth_gen",
]


def _dump(cfg):
    if cfg is None:
        return ""
    return cfg if isinstance(cfg, str) else json.dumps(cfg)


def synth_gen(spec=None):
    """Returns (store, train_probs, test_probs, centroids)."""
    return _core.synth_gen(_dump(spec))


def sample_pairs(index, probs, sampler=None):
    """(query, neighbor, positive, source_class, rank) tuples; the split follows `probs`."""
    return _core.sample_pairs(index, probs, _dump(sampler))


def evaluate_rerank(index, probs, scorer="comparator", model=None, rerank=None):
    """Returns (report, ranked_results)."""
    report, ranked = _core.evaluate_rerank(index, probs, scorer, model, _dump(rerank))
    return json.loads(report), json.loads(ranked)


def knn_classify(index, split, query, k=20, scorer="cosine", model=None):
    """Returns (label, neighbor_ids, neighbor_scores)."""
    return _core.knn_classify(index, split, query, k, scorer, model)


def sanity_suite(model, store, split="test", seed=42):
    return json.loads(_core.sanity_suite(model, store, split, seed))


def run_experiment(config, base=None):
    """Runs every seed of `config` (dict or path). Returns (results, ranked, model)."""
    if isinstance(config, (str, Path)) and Path(config).is_file():
        base = base or Path(config).parent
        config = Path(config).read_text()
    results, ranked, model = _core.run_experiment(_dump(config), Path(base or ""))
    return json.loads(results), json.loads(ranked), model


def export_explanations(ranked, store):
    return json.loads(_core.export_explanations(json.dumps(ranked), store))
