"""
Choosing the number of sources
==============================

Each candidate rank is summarized by its core consistency, the size of the
cluster holding the IED-like source, the correlation with the reference and
the peak pseudo-t. Ranks failing the consistency or stability filters drop
out; the best correlation among the rest wins.
"""

from scmtf import RankDiagnostics, select_rank

rows = [
    RankDiagnostics(1, None, 14, 0.10, 8.7),
    RankDiagnostics(2, 100.0, 23, 0.93, 17.0),
    RankDiagnostics(3, 94.9, 27, 0.95, 23.4),
    RankDiagnostics(4, 58.0, 26, 0.83, 22.6),
    RankDiagnostics(5, 19.6, 17, 0.96, 17.7),
]
choice = select_rank(rows)
print("selected rank", choice.rank, "| survivors", choice.survivors, "|", choice.reason)

# No rank survives: fall back to the best correlation, flagged
weak = [RankDiagnostics(2, 40.0, 5, 0.6, 3.0), RankDiagnostics(3, 20.0, 4, 0.7, 2.0)]
fallback = select_rank(weak)
print("fallback rank", fallback.rank, "criteria met:", fallback.criteria_met)
