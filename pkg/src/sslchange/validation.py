"""Input checks shared by the estimator wrappers."""
import numpy as np
import torch

from .exceptions import DataError, ShapeError, StateError


def check_images(X, name="X"):
    """Coerce an image batch to a float32 Nx3xHxW tensor in [0, 1].

    Accepts uint8 NxHxWx3 arrays (as read from disk) or float NCHW
    arrays/tensors already in [0, 1].
    """
    if isinstance(X, torch.Tensor):
        t = X.detach().float()
    else:
        arr = np.asarray(X)
        if arr.dtype == np.uint8:
            if arr.ndim != 4 or arr.shape[-1] != 3:
                raise ShapeError(f"{name}: uint8 input must be NxHxWx3, got {arr.shape}")
            arr = arr.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
        t = torch.as_tensor(np.ascontiguousarray(arr), dtype=torch.float32)
    if t.dim() != 4 or t.shape[1] != 3:
        raise ShapeError(f"{name}: expected Nx3xHxW images, got {tuple(t.shape)}")
    if len(t) == 0:
        raise DataError(f"{name}: empty image batch")
    if not torch.isfinite(t).all() or t.min() < 0 or t.max() > 1:
        raise DataError(f"{name}: float images must be finite and lie in [0, 1]")
    return t


def check_pairs(X, name="X"):
    """Split a bi-temporal batch into (t1, t2).

    ``X`` is a (t1, t2) tuple or a single array with a pair axis at
    position 1 (Nx2xHxWx3 uint8 or Nx2x3xHxW float).
    """
    if isinstance(X, (tuple, list)) and len(X) == 2:
        t1, t2 = check_images(X[0], f"{name}[0]"), check_images(X[1], f"{name}[1]")
    else:
        arr = X if isinstance(X, torch.Tensor) else np.asarray(X)
        if arr.ndim != 5 or arr.shape[1] != 2:
            raise ShapeError(f"{name}: expected a (t1, t2) pair or an array with a pair axis, "
                             f"got shape {tuple(arr.shape)}")
        t1, t2 = check_images(arr[:, 0], f"{name}[:, 0]"), check_images(arr[:, 1], f"{name}[:, 1]")
    if t1.shape != t2.shape:
        raise ShapeError(f"{name}: T1 {tuple(t1.shape)} and T2 {tuple(t2.shape)} differ")
    return t1, t2


def check_masks(y, n, size, name="y"):
    """Coerce masks (NxHxW, Nx1xHxW; {0,1} or {0,255}) to float Nx1xHxW."""
    t = y.detach() if isinstance(y, torch.Tensor) else torch.as_tensor(np.asarray(y))
    if t.dim() == 3:
        t = t[:, None]
    if t.dim() != 4 or t.shape[1] != 1:
        raise ShapeError(f"{name}: expected NxHxW masks, got {tuple(t.shape)}")
    if len(t) != n or tuple(t.shape[-2:]) != tuple(size):
        raise ShapeError(f"{name}: masks {tuple(t.shape)} do not match {n} images of size {tuple(size)}")
    values = torch.unique(t)
    if values.numel() and not (torch.isin(values, torch.tensor([0, 1], dtype=t.dtype)).all()
                               or torch.isin(values, torch.tensor([0, 255], dtype=t.dtype)).all()):
        raise DataError(f"{name}: masks must be binary ({{0,1}} or {{0,255}})")
    return (t > 0).float()


def check_is_fitted(estimator, attribute):
    if getattr(estimator, attribute, None) is None:
        raise StateError(f"{type(estimator).__name__} is not fitted yet; call fit first")
