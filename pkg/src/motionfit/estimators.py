"""Estimator-style adapters so the fitting pipeline and the codebook
quantizer compose with scikit-learn tooling (get_params/set_params,
clone, pipelines).

The functional core stays in :mod:`motionfit.optimizer` and
:mod:`motionfit.quantize`; these classes only adapt it to the
fit/transform protocol.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .body_model import CameraIntrinsics, SkeletonModel, default_skeleton
from .keypoints import KeypointSequence, fill_missing, fuse_confidence_guided
from .objective import BiomechanicalLimits, ObjectiveWeights, default_limits
from .optimizer import FitConfig, fit_sequence
from .quantize import Codebook, encode_to_indices, quantize_nearest
from .synthesis import default_camera, project_motion


class HolisticPoseFitter(BaseEstimator):
    """Fits the parametric skeleton to a 2D keypoint sequence.

    Parameters left as None fall back to the built-in skeleton, camera,
    and limit assets at fit time. ``X`` is a
    :class:`~motionfit.keypoints.KeypointSequence` carrying a slot layout.

    Attributes set by :meth:`fit`: ``motion_`` (the fitted
    MotionSequence), ``report_`` (per-stage traces), ``shape_``.
    """

    def __init__(self, model: SkeletonModel | None = None,
                 camera: CameraIntrinsics | None = None,
                 weights: ObjectiveWeights | None = None,
                 limits: BiomechanicalLimits | None = None,
                 config: FitConfig | None = None,
                 threshold: float = 0.3,
                 fps: float = 25.0):
        self.model = model
        self.camera = camera
        self.weights = weights
        self.limits = limits
        self.config = config
        self.threshold = threshold
        self.fps = fps

    def _resolved(self):
        model = self.model if self.model is not None else default_skeleton()
        camera = self.camera if self.camera is not None else default_camera()
        weights = self.weights if self.weights is not None else ObjectiveWeights()
        limits = self.limits if self.limits is not None else default_limits(model)
        config = self.config if self.config is not None else FitConfig()
        return model, camera, weights, limits, config

    def fit(self, X: KeypointSequence, y=None, init=None):
        model, camera, weights, limits, config = self._resolved()
        fused = fill_missing(fuse_confidence_guided([X], threshold=self.threshold))
        fused.group_layout = X.group_layout
        report = fit_sequence(
            model, camera, fused, weights, limits, config, init=init, fps=self.fps
        )
        self.model_ = model
        self.camera_ = camera
        self.report_ = report
        self.motion_ = report.motion
        self.shape_ = report.motion.shape
        return self

    def predict(self, X=None) -> np.ndarray:
        """(T, K, 2) pixel positions of every joint of the fitted motion."""
        if not hasattr(self, "motion_"):
            raise NotFittedError("HolisticPoseFitter is not fitted yet")
        return project_motion(self.model_, self.camera_, self.motion_)


class NearestCodeQuantizer(TransformerMixin, BaseEstimator):
    """Snaps feature rows to their nearest codebook vectors.

    ``codebook`` may be a :class:`~motionfit.quantize.Codebook` or a plain
    (n_codes, dim) array.
    """

    def __init__(self, codebook=None):
        self.codebook = codebook

    def fit(self, X, y=None):
        if self.codebook is None:
            raise ValueError("NearestCodeQuantizer requires a codebook")
        book = (
            self.codebook
            if isinstance(self.codebook, Codebook)
            else Codebook(codes=np.asarray(self.codebook, dtype=float))
        )
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != book.dim:
            raise ValueError(f"X must be (n, {book.dim})")
        self.book_ = book
        self.n_codes_ = book.n_codes
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "book_"):
            raise NotFittedError("NearestCodeQuantizer is not fitted yet")
        quantized, _ = quantize_nearest(np.asarray(X, dtype=float), self.book_)
        return quantized

    def encode(self, X):
        """EOS-terminated index sequence for a feature matrix."""
        if not hasattr(self, "book_"):
            raise NotFittedError("NearestCodeQuantizer is not fitted yet")
        return encode_to_indices(np.asarray(X, dtype=float), self.book_)
