"""Scikit-learn style wrappers over the training functions."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneClassifier, DiagnosticModel, predict_proba
from .cmg import build_discriminator, build_generator, generate_map
from .core import PLANAR2D, HyperParams, check_images, check_labels
from .trainer import iterate_lear, pyramid_encoder, train_cmg_phase, train_xga_phase
from .xga import attention_maps, inject


def _model(backbone):
    if isinstance(backbone, BackboneClassifier):
        check_is_fitted(backbone, "model_")
        return backbone.model_
    if not isinstance(backbone, DiagnosticModel):
        raise TypeError(f"expected a DiagnosticModel or fitted BackboneClassifier, got {type(backbone).__name__}")
    return backbone


class CounterfactualMapGenerator(BaseEstimator, TransformerMixin):
    """Phase 1 as an estimator: ``fit`` trains the generator, ``transform`` returns maps.

    ``target`` fixes the condition used by :meth:`transform`; pass ``t=``
    to override it per call.
    """

    def __init__(self, backbone=None, params: Optional[HyperParams] = None, target=None, disc_width: float = 1.0):
        self.backbone = backbone
        self.params = params
        self.target = target
        self.disc_width = disc_width

    def fit(self, X, y=None):
        model = _model(self.backbone)
        X = check_images(X, model.spec.domain)
        params = self.params or HyperParams.profile(model.spec.domain)
        self.generator_ = build_generator(model, params.generator_norm)
        self.discriminator_ = build_discriminator(model, width=self.disc_width)
        self.result_ = train_cmg_phase(model, self.generator_, self.discriminator_, X, params)
        return self

    def transform(self, X, t=None):
        check_is_fitted(self, "generator_")
        t = self.target if t is None else t
        if t is None:
            raise ValueError("no target condition: set target= or pass t=")
        return generate_map(_model(self.backbone), self.generator_, X, t)

    def transform_images(self, X, t=None):
        """Transformed images X + M."""
        return check_images(X) + self.transform(X, t)


class XGAClassifier(BaseEstimator, ClassifierMixin):
    """Phase 2 as an estimator on a frozen backbone and a trained generator."""

    def __init__(self, backbone=None, generator=None, params: Optional[HyperParams] = None):
        self.backbone = backbone
        self.generator = generator
        self.params = params

    def fit(self, X, y):
        model = _model(self.backbone)
        gen = self.generator.generator_ if isinstance(self.generator, CounterfactualMapGenerator) else self.generator
        params = self.params or HyperParams.profile(model.spec.domain)
        X = check_images(X, model.spec.domain)
        y = check_labels(y, model.spec.num_classes)
        self.classes_ = np.arange(model.spec.num_classes)
        self.model_ = inject(model, params.r, seed=params.seed)
        self.result_ = train_xga_phase(self.model_, gen, X, y, params)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, X)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def attention_maps(self, X):
        check_is_fitted(self, "model_")
        return attention_maps(self.model_, X)


class LEARClassifier(BaseEstimator, ClassifierMixin):
    """Backbone pre-training followed by ``n_iters`` explain/reinforce iterations."""

    def __init__(self, domain: str = PLANAR2D, params: Optional[HyperParams] = None, n_iters: int = 1,
                 width: float = 1.0, disc_width: float = 1.0):
        self.domain = domain
        self.params = params
        self.n_iters = n_iters
        self.width = width
        self.disc_width = disc_width

    def fit(self, X, y):
        params = self.params or HyperParams.profile(self.domain)
        self.backbone_ = BackboneClassifier(self.domain, params, self.width).fit(X, y)
        self.classes_ = self.backbone_.classes_
        self.result_ = iterate_lear(self.backbone_.model_, X, y, params, self.n_iters, disc_width=self.disc_width)
        self.history_ = self.result_.history
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "result_")
        return predict_proba(self.result_.xga, X)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def explain(self, X, t):
        """Counterfactual maps from the final generator and the encoder it was trained against."""
        check_is_fitted(self, "result_")
        r = self.result_
        return generate_map(pyramid_encoder(self.n_iters, r.backbone, r.xga), r.generator, X, t)
