"""
Counting parameters of a Gemma-2B-shaped DiT
=============================================

Closed-form counts per category, for the four timestep-conditioning modes
and the hidden-size and depth sweeps.
"""

from fusedit.accountant import format_breakdown, gemma_count, paper_regression

for cond in ("adaln-zero", "adaln-single", "addition", "none"):
    b = gemma_count(conditioning=cond)
    print(f"{cond:<13} {b.total / 1e9:6.3f}B  conditioning {b.conditioning / 1e9:6.3f}B")

###############################################################################
# The full breakdown of the default deep-fusion model.

print(format_breakdown(gemma_count(), "deep fusion, adaLN-Zero"))

###############################################################################
# Every published total at once. The adaLN delta row misses its tolerance;
# it is the difference of two rounded totals.

rows, ordered = paper_regression()
for r in rows:
    print(f"{'ok ' if r.ok else 'XX '} {r.table:<12} {r.label:<20} {r.count / 1e9:.3f}B vs {r.target}B")
print("variant ordering holds:", ordered)
