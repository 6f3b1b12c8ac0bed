"""Scikit-learn style front end for the interaction vision transformer.

The classifier follows the usual estimator conventions (constructor stores
hyperparameters verbatim, ``fit`` learns state into trailing-underscore
attributes, ``get_params``/``set_params`` come from the base class), so it
drops into pipelines and model-selection utilities. Teacher maps ride along
as an optional ``fit`` argument; without them the model trains as a plain
single-pathway transformer.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .model import ModelConfig, as_leaves, forward
from .training import (
    ArrayDataset,
    RunConfig,
    Switches,
    TrainSettings,
    class_row_distribution_np,
    train,
)
from .validation import check_images, check_labels, check_teacher_rows


class InteractionViTClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier with a teacher-supervised interaction pathway.

    Parameters mirror the training configuration: model geometry, the
    two-stage epoch budget (each stage runs ``epochs``), the pretrain
    learning rate (the finetune stage runs at a fifth of it), and the
    ablation switches. ``seed`` pins initialization and batch order.
    """

    def __init__(self, image_size: int = 32, patch_size: int = 4,
                 embed_dim: int = 64, heads: int = 4, layers: int = 6,
                 gate_mode: str = "sigmoid", gcn_hidden: int = 16,
                 epochs: int = 10, batch_size: int = 32, lr: float = 0.03,
                 smoothing: float = 1e-3, interaction: bool = True,
                 constraint: bool = True, gated: bool = True, seed: int = 0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.heads = heads
        self.layers = layers
        self.gate_mode = gate_mode
        self.gcn_hidden = gcn_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.smoothing = smoothing
        self.interaction = interaction
        self.constraint = constraint
        self.gated = gated
        self.seed = seed

    # -- sklearn plumbing ---------------------------------------------------

    def _model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size, patch_size=self.patch_size,
            embed_dim=self.embed_dim, heads=self.heads, layers=self.layers,
            classes=n_classes, gate_mode=self.gate_mode,
            gcn_hidden=self.gcn_hidden)

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError("fit this classifier before calling predict")

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y, teacher_maps=None):
        """Train on images X (n, H, W[, C]) and integer labels y.

        ``teacher_maps`` is an optional (n, patches) array of per-sample
        patch distributions; when given, training runs the two-stage recipe
        with the alignment constraint, otherwise only the plain pretrain.
        """
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        cfg_model = self._model_config(len(self.classes_))
        X = check_images(X, cfg_model)
        y_idx = check_labels(y_idx, len(X))

        use_teacher = teacher_maps is not None
        teachers = None
        if use_teacher:
            teachers = check_teacher_rows(
                teacher_maps, len(X), cfg_model.num_patches).astype(np.float32)
        switches = Switches(
            iq=self.interaction and use_teacher,
            ic=self.constraint and use_teacher,
            gc=self.gated and use_teacher)
        settings = TrainSettings(
            epochs=self.epochs, batch=self.batch_size, lr=self.lr,
            seed=self.seed, lam=self.smoothing,
            stage="two-stage" if use_teacher else "pretrain")
        cfg = RunConfig(model=cfg_model, train=settings, switches=switches)
        idx = np.arange(len(X))
        ds = ArrayDataset(images=X, labels=y_idx, teachers=teachers,
                          train_idx=idx, val_idx=idx)
        result = train(cfg, dataset=ds)
        self.params_ = result.params
        self.config_ = cfg_model
        self.switches_ = switches
        self.history_ = result.history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_images(X, self.config_)
        leaves = as_leaves(self.params_)
        mode = dict(interaction=self.switches_.iq, gate_net=self.switches_.gc)
        outs = []
        for lo in range(0, len(X), self.batch_size):
            res = forward(X[lo:lo + self.batch_size], leaves, self.config_, **mode)
            outs.append(res.logits.data)
        return np.concatenate(outs, axis=0)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=-1)]

    # -- interpretability extras ----------------------------------------------

    def interaction_maps(self, X) -> dict[str, np.ndarray]:
        """Layer-averaged class-row attention distributions per sample.

        Returns ``{"guided": (n, N) or None, "visual": (n, N)}``, matching
        the extraction convention of the alignment loss."""
        self._check_fitted()
        X = check_images(X, self.config_)
        leaves = as_leaves(self.params_)
        mode = dict(interaction=self.switches_.iq, gate_net=self.switches_.gc)
        guided_rows, visual_rows = [], []
        for lo in range(0, len(X), self.batch_size):
            res = forward(X[lo:lo + self.batch_size], leaves, self.config_, **mode)
            visual = np.mean(
                [class_row_distribution_np(t.visual) for t in res.trace], axis=0)
            visual_rows.append(visual / visual.sum(axis=-1, keepdims=True))
            if self.switches_.iq:
                guided = np.mean(
                    [class_row_distribution_np(t.guided) for t in res.trace], axis=0)
                guided_rows.append(guided / guided.sum(axis=-1, keepdims=True))
        return {
            "guided": np.concatenate(guided_rows) if guided_rows else None,
            "visual": np.concatenate(visual_rows),
        }
