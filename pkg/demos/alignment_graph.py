"""Which grid cells does each region talk to?

Builds the region/grid alignment graph for one synthetic scene and prints it
as a small picture, one panel per region.
"""
import numpy as np

from dlct.data import generate_corpus
from dlct.geometry import build_alignment_graph

ds = generate_corpus(20, seed=3)
ex = ds.splits["train"][0]
layout = ds.layout
graph = build_alignment_graph(ex.bundle.boxes, layout)

words = ds.vocab.decode(ex.captions[0])
print("caption:", " ".join(words))
for i, obj in enumerate(ex.scene.objects):
    print(f"\nregion {i}: {obj.size} {obj.color} {obj.shape}, box {np.round(obj.box, 2).tolist()}")
    cells = graph.region_grid[i].reshape(layout.rows, layout.cols)
    for row in cells:
        print("  " + " ".join("#" if c else "." for c in row))

# cells no region touches only ever see themselves and other cells
lonely = ~graph.region_grid.any(axis=0)
print(f"\n{lonely.sum()} of {layout.size} cells have no region neighbour")
