"""Scikit-learn style wrapper around the attention-MIL head.

X is a sequence of bags, each a (n_instances, n_features) array of patch
embeddings; y holds one integer label per bag. The estimator follows the
usual conventions (get_params/set_params, clone-compatible __init__,
classes_ inferred from y), so it drops into sklearn model selection
utilities that do not insist on rectangular X.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .model import Bag, Gradients, MILParams, backward, forward, init_params
from .numerics import RngStream, derive_stream
from .training import AdamState, adam_step
from .validation import check_bags, check_labels


class AttentionMILClassifier(ClassifierMixin, BaseEstimator):
    """Bag-level classifier with learned softmax attention pooling.

    Parameters
    ----------
    attention_dim : hidden width of the attention scoring layer.
    epochs : passes over the provided bags.
    batch_size : bags per Adam update.
    learning_rate : Adam step size.
    weight_decay : L2 strength, coupled into the gradient by default.
    decoupled_weight_decay : apply decay directly to weights (AdamW style).
    shuffle : reshuffle bag order every epoch.
    random_state : seed for init and shuffling; fixes every result bit.
    """

    def __init__(self, attention_dim=128, epochs=50, batch_size=64,
                 learning_rate=1e-3, weight_decay=0.0,
                 decoupled_weight_decay=False, shuffle=True, random_state=0):
        self.attention_dim = attention_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.decoupled_weight_decay = decoupled_weight_decay
        self.shuffle = shuffle
        self.random_state = random_state

    def _make_bags(self, X, y_idx=None):
        bags = check_bags(X)
        labels = y_idx if y_idx is not None else np.zeros(len(bags), dtype=np.int64)
        return [Bag(slide_id=str(i), label=int(labels[i]), embeddings=b)
                for i, b in enumerate(bags)]

    def fit(self, X, y):
        """Train the head on explicit bags with batched Adam updates."""
        bags_arr = check_bags(X)
        y = check_labels(y, len(bags_arr))
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("fit needs at least two distinct classes in y")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

        self.n_features_in_ = bags_arr[0].shape[1]
        bags = [Bag(slide_id=str(i), label=int(y_idx[i]), embeddings=b)
                for i, b in enumerate(bags_arr)]

        rng = RngStream(self.random_state, derive_stream("fit"))
        params = init_params(self.attention_dim, self.n_features_in_,
                             int(self.classes_.size), rng)
        state = AdamState.zeros_like(params)
        losses = []
        for _ in range(self.epochs):
            order = rng.permutation(len(bags)) if self.shuffle else np.arange(len(bags))
            epoch_loss = 0.0
            for start in range(0, len(order), self.batch_size):
                chunk = order[start:start + self.batch_size]
                acc = [np.zeros_like(t) for t in params.tensors()]
                for idx in chunk:
                    loss, grads = backward(params, bags[idx])
                    epoch_loss += loss
                    for a, g in zip(acc, grads.tensors()):
                        a += g
                mean = Gradients(*(a / len(chunk) for a in acc))
                adam_step(params, mean, state, self.learning_rate,
                          self.weight_decay, self.decoupled_weight_decay)
            losses.append(epoch_loss / len(bags))
        self.params_ = params
        self.loss_curve_ = losses
        return self

    def predict_proba(self, X):
        """(n_bags, n_classes) class probabilities."""
        check_is_fitted(self, "params_")
        bags = self._make_bags(X)
        return np.stack([forward(self.params_, bag).probs for bag in bags])

    def predict(self, X):
        """Most probable class per bag; ties resolve to the lower class."""
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def bag_attention(self, X):
        """Per-bag attention weight vectors (each sums to 1)."""
        check_is_fitted(self, "params_")
        return [forward(self.params_, bag).attention for bag in self._make_bags(X)]

    @classmethod
    def from_params(cls, params: MILParams, classes=None) -> "AttentionMILClassifier":
        """Wrap already-trained weights (for example, a loaded checkpoint)."""
        est = cls(attention_dim=params.attention_dim)
        est.params_ = params
        est.classes_ = (np.asarray(classes) if classes is not None
                        else np.arange(params.n_classes))
        est.n_features_in_ = params.embed_dim
        return est
