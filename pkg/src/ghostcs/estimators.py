"""scikit-learn compatible front end for the reconstructors.

Both estimators take reference frames as ``X`` (``(m, n_pixels)`` or
``(m, rows, cols)``) and bucket values as ``y``, so they slot into
pipelines, grid searches and cross-validation like any regressor: the
recovered object doubles as the coefficient vector of the linear model
``bucket = frame . object``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .recon import ROI, SensingSystem, SolverParams, cs_reconstruct, gi_covariance

__all__ = ["check_frames", "CorrelationGhostImager", "CompressiveGhostImager"]


def check_frames(X, y=None, image_shape=None):
    """Validate frames (and buckets); returns ``(X2d, y, image_shape)``.

    3-D input fixes the image shape; 2-D input takes ``image_shape`` or is
    treated as a single row of pixels.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        shape = X.shape[1:]
        if image_shape is not None and tuple(image_shape) != shape:
            raise ValueError(f"frames are {shape} but image_shape is {tuple(image_shape)}")
        X = X.reshape(X.shape[0], -1)
    elif X.ndim == 2:
        shape = tuple(image_shape) if image_shape is not None else (1, X.shape[1])
    else:
        raise ValueError(f"frames must be 2-D or 3-D, got {X.ndim}-D")
    if int(np.prod(shape)) != X.shape[1]:
        raise ValueError(f"image_shape {shape} does not match {X.shape[1]} pixels per frame")
    if y is None:
        return check_array(X, dtype=np.float64), None, shape
    X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
    return X, y, shape


class CorrelationGhostImager(RegressorMixin, BaseEstimator):
    """Ghost image from the frame/bucket covariance.

    Attributes after ``fit``: ``covariance_`` (signed, flattened),
    ``image_`` (max-normalized, reshaped), ``coef_`` and ``intercept_`` of
    the least-squares bucket predictor along the covariance direction.
    """

    def __init__(self, image_shape=None):
        self.image_shape = image_shape

    def fit(self, X, y):
        X, y, shape = check_frames(X, y, self.image_shape)
        if X.shape[0] < 2:
            raise ValueError("need at least 2 frames")
        cov = gi_covariance(X, y)
        self.covariance_ = cov
        peak = cov.max()
        self.image_ = (cov / peak if peak > 0 else np.zeros_like(cov)).reshape(shape)
        proj = X @ cov
        var = proj.var()
        scale = ((proj - proj.mean()) @ (y - y.mean()) / len(y) / var) if var > 0 else 0.0
        self.coef_ = scale * cov
        self.intercept_ = float(y.mean() - proj.mean() * scale)
        self.n_features_in_ = X.shape[1]
        self.image_shape_ = shape
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X, _, _ = check_frames(X, None, self.image_shape_)
        return X @ self.coef_ + self.intercept_


class CompressiveGhostImager(RegressorMixin, BaseEstimator):
    """Nonnegative basis-pursuit denoising of ``y = X @ object``.

    Parameters mirror :class:`ghostcs.recon.SolverParams`. ``coef_`` is the
    recovered object (flattened), ``image_`` the same reshaped.
    """

    def __init__(self, epsilon=None, epsilon_rel=0.02, nonneg=True, lambda_ratio=1e-6,
                 n_stages=30, max_iter=5000, tol=1e-9, obj_rtol=1e-8, normalize="none",
                 image_shape=None, pitch=1.0):
        self.epsilon = epsilon
        self.epsilon_rel = epsilon_rel
        self.nonneg = nonneg
        self.lambda_ratio = lambda_ratio
        self.n_stages = n_stages
        self.max_iter = max_iter
        self.tol = tol
        self.obj_rtol = obj_rtol
        self.normalize = normalize
        self.image_shape = image_shape
        self.pitch = pitch

    def _params(self):
        return SolverParams(epsilon=self.epsilon, epsilon_rel=self.epsilon_rel,
                            nonneg=self.nonneg, lambda_ratio=self.lambda_ratio,
                            n_stages=self.n_stages, max_iter=self.max_iter, tol=self.tol,
                            obj_rtol=self.obj_rtol, normalize=self.normalize)

    def fit(self, X, y):
        X, y, shape = check_frames(X, y, self.image_shape)
        roi = ROI(0, 0, shape[0], shape[1], self.pitch)
        result = cs_reconstruct(SensingSystem(X, y, roi), self._params())
        self.coef_ = result.estimate.ravel()
        self.intercept_ = 0.0
        self.image_ = result.estimate
        self.n_iter_ = result.iterations
        self.residual_ = result.final_residual
        self.status_ = result.solver_status
        self.result_ = result
        self.n_features_in_ = X.shape[1]
        self.image_shape_ = shape
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X, _, _ = check_frames(X, None, self.image_shape_)
        return X @ self.coef_
