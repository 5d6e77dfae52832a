"""
The joint attention mask of deep fusion
=======================================

Text rows are causal and never see image tokens. Image rows see every valid
text token and every image token.
"""

import numpy as np

from fusedit.fusion import build_joint_mask

pad = np.array([False, False, False, True, True])  # BOS + two bytes + 2 PAD
mask = build_joint_mask(5, 4, pad)

for i, row in enumerate(mask):
    kind = "txt" if i < 5 else "img"
    print(kind, "".join("#" if v else "." for v in row))

###############################################################################
# The upper-right block is empty: text never reads the image stream, so the
# frozen LLM's hidden states cannot depend on the latent.

assert not mask[:5, 5:].any()
assert mask[5:, 5:].all() and not mask[5:, 3:5].any()
