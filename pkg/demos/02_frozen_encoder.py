"""Pretrain the toy dual encoder on synthetic classes and classify zero-shot.

Uses the default benchmark of the harness (about 30 s of pretraining).
"""

# %%
import numpy as np

from promptreg import io
from promptreg.encoders import encode_image, encode_text, make_sequence, zero_shot_probs
from promptreg.harness.config import RunConfig
from promptreg.harness.training import prepare
from promptreg import numcore as nc
from promptreg.prompting import CANONICAL_TEMPLATE

run = RunConfig()
data, pair = prepare(run, seed=0)
print("pretraining loss per epoch:", np.round(pair.history, 3))

# %% [markdown]
# Each class is a prototype grid of patches.  Its name is a single class
# token, read in context as "a photo of a <class>".

# %%
cfg = pair.config
classes = list(range(data.spec.C))
with nc.no_grad():
    G = encode_text(pair, [make_sequence(cfg, CANONICAL_TEMPLATE, k) for k in classes])
    F = encode_image(pair, data.test.x)

pred = np.array([np.argmax(zero_shot_probs(nc.Tensor(f), G, cfg.tau).data) for f in F.data])
for k in classes:
    mask = data.test.y == k
    print(f"class {k}: zero-shot accuracy {100 * np.mean(pred[mask] == k):5.1f}%")
print(f"overall {100 * np.mean(pred == data.test.y):.1f}% (chance {100 / data.spec.C:.0f}%)")

# %% [markdown]
# The frozen pair is written as a JSON checkpoint.  Loading it back gives
# identical weights, bit for bit.

# %%
text = io.encoder_to_json(pair)
back = io.encoder_from_json(text)
print("checkpoint bytes:", len(text), " round trip identical:", back.checksum() == pair.checksum())
