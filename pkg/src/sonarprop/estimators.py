"""scikit-learn style wrappers around the networks, the TM baseline and the pipeline.

``X`` for the patch estimators is a stack of 96x96 patches (``n x 96 x 96``,
``n x 1 x 96 x 96`` or ``n x 9216``); ``y`` is objectness in [0, 1].
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_is_fitted

from . import datagen, models, trainer
from .eval_harness import MATCH_THRESHOLD, match_and_recall
from .exceptions import RejectedInputError
from .proposals import NMS_THRESHOLD, extract_proposals, objectness_map_fcn, objectness_map_sliding
from .tm_baseline import TEMPLATE_COUNT, select_templates, tm_objectness_map, tm_scores
from .validation import check_image, check_patches, check_targets
from .weights_io import load_network, save_network

ARCHITECTURES = {"fcn": models.build_fcn_tiny, "cnn": models.build_cnn}


class ObjectnessRegressor(RegressorMixin, BaseEstimator):
    """Patch objectness network (``'fcn'`` Tiny-module FCN or ``'cnn'`` LeNet CNN).

    Without an explicit ``eval_set`` a ``validation_fraction`` of the
    patches is held out for early stopping.
    """

    def __init__(self, architecture="fcn", learning_rate=0.01, batch_size=64, max_epochs=50,
                 patience=5, validation_fraction=0.3, random_state=0):
        self.architecture = architecture
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self):
        return trainer.TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.random_state,
        )

    def fit(self, X, y, eval_set=None):
        if self.architecture not in ARCHITECTURES:
            raise RejectedInputError(f"architecture must be one of {sorted(ARCHITECTURES)}, got {self.architecture!r}")
        X = check_patches(X)
        y = check_targets(y, len(X))
        if eval_set is not None:
            X_val = check_patches(eval_set[0])
            y_val = check_targets(eval_set[1], len(X_val))
        else:
            if not 0 < self.validation_fraction < 1:
                raise RejectedInputError("validation_fraction must be in (0, 1) when no eval_set is given")
            order = np.random.default_rng(self.random_state).permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            if n_val >= len(X):
                raise RejectedInputError("too few patches to hold out a validation set")
            val, tr = order[:n_val], order[n_val:]
            X, y, X_val, y_val = X[tr], y[tr], X[val], y[val]
        spec, params = ARCHITECTURES[self.architecture](seed=self.random_state)
        self.params_, self.history_ = trainer.train(spec, params, (X, y), (X_val, y_val), self._config())
        self.spec_ = spec
        self.n_params_ = models.param_count(spec)
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return models.predict_patches(self.spec_, self.params_, check_patches(X)).astype(np.float64)

    def objectness_map(self, image, stride=4, full_image=True, exact_borders=True):
        """Objectness map of a whole image.

        ``full_image`` uses the converted network in one pass (FCN only);
        otherwise every stride-aligned window is scored separately.
        """
        check_is_fitted(self, "params_")
        if full_image and self.architecture == "fcn":
            if stride != 4:
                raise RejectedInputError("full-image inference is tied to the network's stride of 4")
            spec, params = self.converted()
            return objectness_map_fcn(spec, params, image, exact_borders=exact_borders)
        return objectness_map_sliding(self.spec_, self.params_, image, stride)

    def converted(self):
        """The fully convolutional form of the fitted network (cached)."""
        check_is_fitted(self, "params_")
        key = id(self.params_)
        cached = getattr(self, "_converted", None)
        if cached is None or cached[0] != key:
            self._converted = (key, models.fc_to_conv(self.spec_, self.params_))
        return self._converted[1]

    def save(self, path):
        check_is_fitted(self, "params_")
        save_network(path, self.spec_, self.params_)

    @classmethod
    def load(cls, path):
        spec, params = load_network(path)
        arch = _identify(spec)
        est = cls(architecture=arch)
        est.spec_, est.params_ = spec, params
        est.n_params_ = models.param_count(spec)
        est.history_ = None
        return est


def _identify(spec):
    for name, build in ARCHITECTURES.items():
        if build(seed=0)[0].layers == spec.layers:
            return name
    raise RejectedInputError("weights file describes neither the FCN nor the CNN architecture")


class TemplateMatchingRegressor(RegressorMixin, BaseEstimator):
    """Max normalized cross-correlation against ``n_templates`` positive training patches."""

    def __init__(self, n_templates=TEMPLATE_COUNT, random_state=0):
        self.n_templates = n_templates
        self.random_state = random_state

    def fit(self, X, y, eval_set=None):
        X = check_patches(X)
        y = check_targets(y, len(X))
        self.bank_ = select_templates((X, y), self.n_templates, self.random_state)
        return self

    def predict(self, X):
        check_is_fitted(self, "bank_")
        return tm_scores(self.bank_, X)

    def objectness_map(self, image, stride=4, **_):
        check_is_fitted(self, "bank_")
        return tm_objectness_map(self.bank_, image, stride)


class ProposalGenerator(BaseEstimator):
    """Full pipeline: labeled patches from annotations, objectness model, proposals.

    ``fit`` takes a list of :class:`~sonarprop.datagen.Annotation` with
    pixels attached; ``transform`` maps images to objectness maps and
    ``predict`` maps images to lists of proposals.
    """

    def __init__(self, estimator=None, mode="ranking", k=100, threshold=0.5, nms_threshold=NMS_THRESHOLD,
                 stride=4, nms_first=False, train_stride=4, n_negative=10, split=0.7, random_state=0):
        self.estimator = estimator
        self.mode = mode
        self.k = k
        self.threshold = threshold
        self.nms_threshold = nms_threshold
        self.stride = stride
        self.nms_first = nms_first
        self.train_stride = train_stride
        self.n_negative = n_negative
        self.split = split
        self.random_state = random_state

    def fit(self, annotations, y=None):
        train_set, val_set = datagen.build_patch_dataset(
            annotations, self.split, self.random_state, self.n_negative, self.train_stride
        )
        if len(val_set) == 0:
            raise RejectedInputError("validation split is empty; add images or change split")
        base = self.estimator if self.estimator is not None else ObjectnessRegressor(random_state=self.random_state)
        self.estimator_ = clone(base).fit(
            train_set.patches, train_set.objectness, eval_set=(val_set.patches, val_set.objectness)
        )
        return self

    def transform(self, images):
        check_is_fitted(self, "estimator_")
        return [self.estimator_.objectness_map(_pixels(im), stride=self.stride) for im in images]

    def proposals_from_map(self, omap):
        return extract_proposals(omap, self.mode, k=self.k, t_o=self.threshold,
                                 t_s=self.nms_threshold, nms_first=self.nms_first)

    def predict(self, images):
        return [self.proposals_from_map(m) for m in self.transform(images)]

    def score(self, annotations, y=None, t_d=MATCH_THRESHOLD):
        """Mean recall (percent) over annotated images."""
        annotations = list(annotations)
        props = self.predict(annotations)
        return match_and_recall(props, [a.boxes for a in annotations], t_d).mean_recall


def _pixels(item):
    image = item.image if hasattr(item, "image") else item
    if image is None:
        raise RejectedInputError(f"{getattr(item, 'file', 'image')}: pixels not loaded")
    return check_image(image)
