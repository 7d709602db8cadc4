"""
Classifier - training-free classification from a trained conditional flow
Single-step gradient over soft class logits, exact brute-force oracle, multi-step variant
"""

import logging
from typing import Tuple

import numpy as np

import graphcore as gc
from graphcore import GraphValue
from tar_model import EMBED_NAME, FlowModel, log_likelihood

logger = logging.getLogger(__name__)

LOGITS_NAME = 'classifier.logits'


class ClassifierError(ValueError):
    """Non-finite likelihoods or diverging logits during classification"""


def soft_embedding(logits: GraphValue, table: GraphValue) -> GraphValue:
    """e_eff = softmax(lambda)^T E"""
    if table.shape[0] < 1:
        raise ClassifierError("need at least one class embedding")
    return gc.softmax(logits, axis=-1) @ table


def class_table(model: FlowModel) -> GraphValue:
    """The K real class rows of the embedding table, cut from the parameters"""
    return gc.constant(model.params[EMBED_NAME].data[:model.num_classes])


def _as_tokens(x) -> np.ndarray:
    x = x.data if isinstance(x, GraphValue) else x
    return np.asarray(x, dtype=np.float64)


def logit_gradient(x, model: FlowModel, logits: np.ndarray) -> np.ndarray:
    """grad_lambda log p(x | softmax(lambda)^T E) for every sample in the batch"""
    x = _as_tokens(x)
    lam = gc.leaf(logits, LOGITS_NAME)
    enc = model.encode(gc.constant(x), embedding=soft_embedding(lam, class_table(model)))
    ll = log_likelihood(enc)
    if not np.all(np.isfinite(ll.data)):
        raise ClassifierError("log-likelihood is not finite")
    return gc.backward(gc.reduce_sum(ll))[LOGITS_NAME]


def classify_single_step(x, model: FlowModel) -> Tuple[np.ndarray, np.ndarray]:
    """argmax_k of the logit gradient at lambda = 0; ties go to the lowest index"""
    x = _as_tokens(x)
    logits = np.zeros(x.shape[:-2] + (model.num_classes,))
    g = logit_gradient(x, model, logits)
    return np.argmax(g, axis=-1), g


def classify_bruteforce(x, model: FlowModel) -> Tuple[np.ndarray, np.ndarray]:
    """One exact log p(x | k) per class, argmax with lowest-index tie-break"""
    x = _as_tokens(x)
    batch = x.shape[:-2]
    per_class = []
    for k in range(model.num_classes):
        enc = model.encode(gc.constant(x), labels=np.full(batch, k, dtype=np.int64))
        per_class.append(log_likelihood(enc).data)
    ll = np.stack(per_class, axis=-1)
    return np.argmax(ll, axis=-1), ll


def classify_multistep(x, model: FlowModel, steps: int = 5, lr: float = 1.0) -> np.ndarray:
    """Gradient ascent on lambda from zero; argmax of the final softmax"""
    if steps < 1:
        raise ClassifierError(f"steps must be >= 1, got {steps}")
    x = _as_tokens(x)
    logits = np.zeros(x.shape[:-2] + (model.num_classes,))
    for _ in range(steps):
        logits = logits + lr * logit_gradient(x, model, logits)
        if not np.all(np.isfinite(logits)):
            raise ClassifierError(f"logits diverged (lr={lr})")
    return np.argmax(logits, axis=-1)
