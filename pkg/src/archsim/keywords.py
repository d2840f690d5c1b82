"""TF-IDF keywords for clusters, treating each architecture record as a document."""
from __future__ import annotations

import math
from collections import Counter
from typing import Mapping

from archsim.features import COMPONENTS, ArchFeatureRecord


def idf_table(records: Mapping[str, ArchFeatureRecord]) -> dict[str, float]:
    n = len(records)
    df = Counter(tok for r in records.values() for tok in set(r.tokens()))
    return {tok: math.log(n / c) for tok, c in df.items()}


def tfidf_keywords(labels: Mapping[str, int], records: Mapping[str, ArchFeatureRecord],
                   top_k: int = 5) -> dict[int, list[tuple[str, float]]]:
    """Top-k ``component=value`` tokens per cluster by mean TF-IDF over its members.

    ``labels`` maps model name to cluster index; every labelled model needs a
    record.  Zero-score tokens are never reported.
    """
    missing = [n for n in labels if n not in records]
    if missing:
        raise KeyError(f"no architecture record for {missing}")
    docs = {n: records[n] for n in labels}
    idf = idf_table(docs)
    tf = 1.0 / len(COMPONENTS)
    out = {}
    for c in sorted(set(labels.values())):
        members = [n for n in labels if labels[n] == c]
        totals = Counter()
        for n in members:
            for tok in docs[n].tokens():
                totals[tok] += tf * idf[tok]
        scored = [(tok, s / len(members)) for tok, s in totals.items() if s > 0]
        scored.sort(key=lambda t: (-round(t[1], 12), t[0]))
        out[c] = scored[:top_k]
    return out


def keyword_table(assignment, records, top_k: int = 5) -> list[dict]:
    """Rows shaped like a cluster keyword table: cluster, members, top-k keywords."""
    labels = dict(zip(assignment.model_names, (int(l) for l in assignment.labels)))
    kw = tfidf_keywords(labels, records, top_k)
    return [{"cluster": c, "members": [n for n in assignment.model_names if labels[n] == c],
             "keywords": [t for t, _ in kw[c]], "scores": [round(s, 6) for _, s in kw[c]]}
            for c in sorted(kw)]
