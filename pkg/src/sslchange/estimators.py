"""scikit-learn style estimators wrapping the three trainable stages.

>>> adapter = DomainAdapter(epochs=20).fit(t1_images, t2_images)
>>> ssl = SSLChangePretrainer(adapter=adapter, epochs=100).fit(t1_images)
>>> detector = ChangeDetector(encoder=ssl).fit((t1, t2), masks)
>>> detector.predict((t1_test, t2_test))
"""
import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .adapter import AdapterBundle, AdapterTrainConfig, freeze, train_adapter, transfer_view
from .encoder import ClipSpec, clip_encoder
from .finetune import FinetuneConfig, evaluate, finetune, predict_proba
from .metrics import compute_metrics
from .pretrain import PretrainConfig, pretrain
from .validation import check_images, check_is_fitted, check_masks, check_pairs


class DomainAdapter(BaseEstimator, TransformerMixin):
    """Learns a T1 -> T2 style translator; ``transform`` returns transferred views.

    ``fit(X, y)`` takes T1 images as ``X`` and (unpaired) T2 images as ``y``.
    """

    def __init__(self, epochs=20, lr=2e-4, cycle_weight=10.0, identity_weight=0.5,
                 batch_size=4, seed=0):
        self.epochs = epochs
        self.lr = lr
        self.cycle_weight = cycle_weight
        self.identity_weight = identity_weight
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        t1 = check_images(X, "X")
        t2 = check_images(y, "y")
        cfg = AdapterTrainConfig(self.epochs, self.lr, self.cycle_weight, self.identity_weight,
                                 self.batch_size, self.seed)
        self.bundle_ = freeze(train_adapter(t1, t2, cfg))
        self.log_ = self.bundle_.log
        return self

    def transform(self, X):
        check_is_fitted(self, "bundle_")
        return transfer_view(self.bundle_, check_images(X)).numpy()


class SSLChangePretrainer(BaseEstimator, TransformerMixin):
    """Self-supervised encoder pre-training; ``transform`` yields clipped features.

    ``adapter`` may be a fitted DomainAdapter or a frozen AdapterBundle; it is
    ignored when ``disable_adapter`` is set.
    """

    def __init__(self, adapter=None, epochs=100, batch_size=8, lr=0.001, alpha=0.5,
                 disable_adapter=False, disable_spatial=False, disable_channel=False,
                 keep_count=3, seed=0):
        self.adapter = adapter
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.alpha = alpha
        self.disable_adapter = disable_adapter
        self.disable_spatial = disable_spatial
        self.disable_channel = disable_channel
        self.keep_count = keep_count
        self.seed = seed

    def _bundle(self):
        if self.disable_adapter or self.adapter is None:
            return None
        if isinstance(self.adapter, AdapterBundle):
            return self.adapter
        check_is_fitted(self.adapter, "bundle_")
        return self.adapter.bundle_

    def fit(self, X, y=None):
        cfg = PretrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             alpha=self.alpha, seed=self.seed, disable_adapter=self.disable_adapter,
                             disable_spatial=self.disable_spatial, disable_channel=self.disable_channel)
        self.model_, self.report_ = pretrain(check_images(X), self._bundle(), cfg)
        self.extractor_ = clip_encoder(self.model_.encoder, ClipSpec(self.keep_count))
        return self

    def transform(self, X):
        check_is_fitted(self, "extractor_")
        with torch.no_grad():
            return self.extractor_(check_images(X)).numpy()


class ChangeDetector(BaseEstimator):
    """Siamese change-detection baseline, optionally fed frozen pre-trained features.

    ``X`` is a (t1, t2) pair of image batches; ``y`` holds binary masks.
    """

    def __init__(self, encoder=None, epochs=30, lr=1e-3, batch_size=4, pos_weight=2.0,
                 fusion="concatenate", threshold=0.5, seed=0):
        self.encoder = encoder
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.pos_weight = pos_weight
        self.fusion = fusion
        self.threshold = threshold
        self.seed = seed

    def _extractor(self):
        if self.encoder is None:
            return None
        if isinstance(self.encoder, torch.nn.Module):
            return self.encoder
        check_is_fitted(self.encoder, "extractor_")
        return self.encoder.extractor_

    def _pairs(self, X, y):
        t1, t2 = check_pairs(X)
        return t1, t2, check_masks(y, len(t1), t1.shape[-2:])

    def fit(self, X, y, X_val=None, y_val=None):
        train = self._pairs(X, y)
        val = self._pairs(X_val, y_val) if X_val is not None else train
        extractor = self._extractor()
        cfg = FinetuneConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                             pos_weight=self.pos_weight, seed=self.seed,
                             use_pretrained=extractor is not None, fusion=self.fusion,
                             threshold=self.threshold)
        result = finetune(train, val, extractor, cfg)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        t1, t2 = check_pairs(X)
        return predict_proba(self.model_, t1, t2)[:, 0].numpy()

    def predict(self, X):
        return (self.predict_proba(X) > self.threshold).astype(np.uint8)

    def score(self, X, y):
        """Dataset-level F1 of the binarized predictions."""
        check_is_fitted(self, "model_")
        counts = evaluate(self.model_, self._pairs(X, y), self.threshold)
        return compute_metrics(counts).f1
