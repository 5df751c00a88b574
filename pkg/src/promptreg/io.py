"""JSON checkpoints for frozen encoder pairs and prompt sets.

Arrays are stored as base64 of their little-endian float64 bytes next to
their shape, so a round trip is bit-exact and the same weights always
serialise to the same bytes.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .encoders import EncoderConfig, FrozenEncoderPair
from .prompting import PromptSet

FORMAT_VERSION = 1
ENCODER_KIND = "frozen_encoder_pair"
PROMPT_KIND = "prompt_set"


def encode_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj):
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def _dumps(doc):
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _check(doc, kind):
    if doc.get("kind") != kind:
        raise ValueError(f"expected a {kind} document, found {doc.get('kind')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")


def encoder_to_json(pair):
    doc = {
        "kind": ENCODER_KIND,
        "version": FORMAT_VERSION,
        "config": pair.config.to_dict(),
        "history": [float(h) for h in pair.history],
        "theta_f": {k: encode_array(t.data) for k, t in pair.theta_f.items()},
        "theta_g": {k: encode_array(t.data) for k, t in pair.theta_g.items()},
    }
    return _dumps(doc)


def encoder_from_json(text):
    doc = json.loads(text)
    _check(doc, ENCODER_KIND)
    config = EncoderConfig(**doc["config"])
    img = {k: decode_array(v) for k, v in doc["theta_f"].items()}
    txt = {k: decode_array(v) for k, v in doc["theta_g"].items()}
    return FrozenEncoderPair.from_arrays(img, txt, config, doc.get("history", ()))


def prompts_to_json(prompts, provenance=None):
    doc = {
        "kind": PROMPT_KIND,
        "version": FORMAT_VERSION,
        "J": prompts.J,
        "V": prompts.V,
        "T": prompts.T,
        "vision": [encode_array(p.data) for p in prompts.vision],
        "text": [encode_array(p.data) for p in prompts.text],
    }
    if provenance is not None:
        doc["provenance"] = dict(provenance)
    return _dumps(doc)


def prompts_from_json(text, requires_grad=False):
    """Returns ``(PromptSet, provenance or None)``."""
    doc = json.loads(text)
    _check(doc, PROMPT_KIND)
    vision = [decode_array(v) for v in doc["vision"]]
    text_ = [decode_array(v) for v in doc["text"]]
    P = PromptSet.from_arrays(vision, text_, requires_grad=requires_grad)
    if (P.J, P.V, P.T) != (doc["J"], doc["V"], doc["T"]):
        raise ValueError("prompt header disagrees with stored arrays")
    return P, doc.get("provenance")


def save_encoder(pair, path):
    Path(path).write_text(encoder_to_json(pair))


def load_encoder(path):
    return encoder_from_json(Path(path).read_text())


def save_prompts(prompts, path, provenance=None):
    Path(path).write_text(prompts_to_json(prompts, provenance))


def load_prompts(path, requires_grad=False):
    return prompts_from_json(Path(path).read_text(), requires_grad)
