"""Deterministic CPU training for the small residual classifiers.

Reproducibility contract:

* model initialization derives from ``seed`` alone;
* the shuffle order of epoch ``e`` derives from ``(seed, e)``, not from a
  stream that advances across epochs — so resuming from a checkpoint at any
  epoch reproduces the uninterrupted run;
* evaluation is side-effect free.

Two runs with the same data, configuration, and seed therefore agree to
floating-point reproduction, and a resumed run agrees with a straight-through
run exactly.
"""

from __future__ import annotations

import csv
import math
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_images, check_labels
from .errors import InvalidSpecError, ProvenanceError, TrainingFailureError
from .models import make_model
from .poisoning import triggered_inputs
from .serialization import sha256_arrays

__all__ = [
    "ResidualNetClassifier",
    "clone_fitted",
    "eval_accuracy",
    "eval_attack_success",
    "load_classifier",
    "write_history_csv",
]

_CHECKPOINT_VERSION = 1


def _to_nchw(X: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(
        np.ascontiguousarray(X.transpose(0, 3, 1, 2), dtype=np.float32)
    )


AUGMENT_MODES = ("none", "crop-flip")


def _crop_flip(X: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random shifted crop (reflect-padded) plus horizontal flip, per sample."""
    n, h, w, _ = X.shape
    padded = np.pad(X, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(X)
    for i in range(n):
        patch = padded[i, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = patch[:, ::-1] if flip[i] else patch
    return out


class ResidualNetClassifier(BaseEstimator, ClassifierMixin):
    """Residual-network image classifier with a scikit-learn interface.

    ``X`` is ``(N, H, W, C)`` — either uint8 or floats in [0, 1]; ``y`` is a
    vector of integer labels.  Training runs SGD with momentum under a cosine
    learning-rate schedule, stops early once the loss plateaus, and raises
    :class:`TrainingFailureError` if the loss diverges.
    """

    def __init__(
        self,
        arch: str = "resnet14",
        width: int = 16,
        epochs: int = 30,
        batch_size: int = 128,
        lr: float = 0.05,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        seed: int = 0,
        augment: str = "none",
        convergence_patience: int = 5,
        convergence_min_improve: float = 1e-4,
        divergence_threshold: float = 10.0,
    ) -> None:
        self.arch = arch
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed
        self.augment = augment
        self.convergence_patience = convergence_patience
        self.convergence_min_improve = convergence_min_improve
        self.divergence_threshold = divergence_threshold

    # -- training ---------------------------------------------------------

    def _lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(1, self.epochs)))

    def fit(
        self,
        X: np.ndarray,
        y: np.ndarray,
        epoch_data: Callable[[int], tuple[np.ndarray, np.ndarray]] | None = None,
        resume_from: str | Path | None = None,
        checkpoint_path: str | Path | None = None,
        checkpoint_every: int | None = None,
    ) -> "ResidualNetClassifier":
        X = check_images(X, "X")
        y = check_labels(y, len(X))
        if self.augment not in AUGMENT_MODES:
            raise InvalidSpecError(
                f"augment must be one of {AUGMENT_MODES}, got {self.augment!r}"
            )
        augmenting = self.augment != "none"
        self.classes_ = np.unique(y)
        self.data_sha256_ = sha256_arrays(X, y)
        n = len(X)

        torch.manual_seed(self.seed)
        torch.use_deterministic_algorithms(True, warn_only=True)
        model = make_model(
            self.arch,
            width=self.width,
            n_classes=len(self.classes_),
            in_channels=X.shape[-1],
        )
        optimizer = torch.optim.SGD(
            model.parameters(),
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )

        start_epoch = 0
        history: list[dict] = []
        if resume_from is not None:
            ckpt = torch.load(resume_from, map_location="cpu", weights_only=False)
            self._check_resume(ckpt)
            model.load_state_dict(ckpt["model_state"])
            optimizer.load_state_dict(ckpt["optimizer_state"])
            start_epoch = ckpt["epoch"] + 1
            history = list(ckpt["history"])

        label_of = {int(c): i for i, c in enumerate(self.classes_)}
        static_y = torch.from_numpy(
            np.asarray([label_of[int(v)] for v in y], dtype=np.int64)
        )
        static_X = _to_nchw(X) if (epoch_data is None and not augmenting) else None

        loss_fn = torch.nn.CrossEntropyLoss()
        # replay the plateau counter over restored history so a resumed run
        # stops at exactly the same epoch a straight-through run would
        best_loss = math.inf
        plateau = 0
        for h in history:
            if best_loss - h["loss"] < self.convergence_min_improve:
                plateau += 1
            else:
                plateau = 0
            best_loss = min(best_loss, h["loss"])
        stopped_early = False
        for epoch in range(start_epoch, self.epochs):
            t0 = time.monotonic()
            lr_now = self._lr_at(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr_now
            if epoch_data is None and not augmenting:
                X_t, y_t = static_X, static_y
            else:
                if epoch_data is None:
                    Xe, y_t = X, static_y
                else:
                    Xe, ye = epoch_data(epoch)
                    Xe = check_images(Xe, "epoch X")
                    y_t = torch.from_numpy(
                        np.asarray([label_of[int(v)] for v in ye], dtype=np.int64)
                    )
                if augmenting:
                    # keyed to (seed, epoch) so interrupted runs resume on the
                    # exact augmentation stream of a straight-through run
                    Xe = _crop_flip(
                        Xe, np.random.default_rng([self.seed, epoch, 1])
                    )
                X_t = _to_nchw(Xe)
            order = torch.from_numpy(
                np.random.default_rng([self.seed, epoch]).permutation(n)
            )

            model.train()
            total_loss = 0.0
            total_correct = 0
            for start in range(0, n, self.batch_size):
                batch = order[start : start + self.batch_size]
                xb = X_t[batch]
                yb = y_t[batch]
                optimizer.zero_grad(set_to_none=True)
                logits = model(xb)
                loss = loss_fn(logits, yb)
                loss.backward()
                optimizer.step()
                total_loss += float(loss.detach()) * len(batch)
                total_correct += int((logits.detach().argmax(dim=1) == yb).sum())

            mean_loss = total_loss / n
            history.append(
                {
                    "epoch": epoch,
                    "loss": mean_loss,
                    "accuracy": total_correct / n,
                    "lr": lr_now,
                    "seconds": time.monotonic() - t0,
                }
            )

            self.model_ = model
            self._optimizer = optimizer
            self.history_ = history
            if not math.isfinite(mean_loss) or mean_loss > self.divergence_threshold:
                last = None
                if checkpoint_path is not None:
                    last = self.save_checkpoint(checkpoint_path, epoch=epoch)
                raise TrainingFailureError(
                    f"training diverged at epoch {epoch} (loss={mean_loss})",
                    last_checkpoint=last,
                )
            if checkpoint_path is not None and checkpoint_every is not None:
                if (epoch + 1) % checkpoint_every == 0 or epoch == self.epochs - 1:
                    self.save_checkpoint(checkpoint_path, epoch=epoch)

            if best_loss - mean_loss < self.convergence_min_improve:
                plateau += 1
            else:
                plateau = 0
            best_loss = min(best_loss, mean_loss)
            if plateau >= self.convergence_patience:
                stopped_early = True
                break

        if not hasattr(self, "model_"):  # epochs == 0 resume edge
            self.model_ = model
            self._optimizer = optimizer
            self.history_ = history
        self.stopped_early_ = stopped_early
        self.model_.eval()
        return self

    def _check_resume(self, ckpt: dict) -> None:
        if ckpt.get("kind") != "train-checkpoint":
            raise ProvenanceError("not a training checkpoint")
        if ckpt.get("version") != _CHECKPOINT_VERSION:
            raise ProvenanceError(f"unsupported checkpoint version {ckpt.get('version')!r}")
        if ckpt["config"] != self.get_params():
            raise ProvenanceError("checkpoint configuration does not match this estimator")
        if ckpt.get("data_sha256") not in (None, self.data_sha256_):
            raise ProvenanceError("checkpoint was trained on different data")

    def save_checkpoint(self, path: str | Path, epoch: int | None = None) -> Path:
        self._require_fitted()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "kind": "train-checkpoint",
                "version": _CHECKPOINT_VERSION,
                "config": self.get_params(),
                "epoch": self.history_[-1]["epoch"] if epoch is None else epoch,
                "model_state": self.model_.state_dict(),
                "optimizer_state": self._optimizer.state_dict(),
                "history": self.history_,
                "classes": self.classes_.tolist(),
                "data_sha256": getattr(self, "data_sha256_", None),
            },
            path,
        )
        return path

    @property
    def epochs_run_(self) -> int:
        """Number of epochs actually completed (may be < epochs on plateau)."""
        self._require_fitted()
        return len(self.history_)

    # -- inference --------------------------------------------------------

    def _require_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this classifier has not been fitted; call fit or load a checkpoint"
            )

    @torch.no_grad()
    def predict_proba(self, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
        self._require_fitted()
        X = check_images(X, "X")
        self.model_.eval()
        X_t = _to_nchw(X)
        out = []
        for start in range(0, len(X), batch_size):
            logits = self.model_(X_t[start : start + batch_size])
            out.append(torch.softmax(logits, dim=1).numpy())
        return np.concatenate(out) if out else np.empty((0, len(self.classes_)))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def clone_fitted(clf: ResidualNetClassifier) -> ResidualNetClassifier:
    """Deep-copy a fitted classifier so its model can be modified safely.

    The clone predicts but carries no optimizer state, so it cannot be
    checkpointed or resumed.
    """
    import copy

    clf._require_fitted()
    new = ResidualNetClassifier(**clf.get_params())
    new.classes_ = clf.classes_.copy()
    new.model_ = copy.deepcopy(clf.model_)
    new.model_.eval()
    new.history_ = [dict(h) for h in getattr(clf, "history_", [])]
    new.data_sha256_ = getattr(clf, "data_sha256_", None)
    return new


def load_classifier(path: str | Path) -> ResidualNetClassifier:
    """Restore a fitted classifier from a training checkpoint."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "train-checkpoint":
        raise ProvenanceError(f"{path} is not a training checkpoint")
    clf = ResidualNetClassifier(**ckpt["config"])
    clf.classes_ = np.asarray(ckpt["classes"])
    in_channels = ckpt["model_state"]["stem.0.weight"].shape[1]
    model = make_model(
        clf.arch, width=clf.width, n_classes=len(clf.classes_), in_channels=in_channels
    )
    model.load_state_dict(ckpt["model_state"])
    model.eval()
    clf.model_ = model
    clf.history_ = list(ckpt["history"])
    clf.data_sha256_ = ckpt.get("data_sha256")
    torch.manual_seed(clf.seed)
    clf._optimizer = torch.optim.SGD(
        model.parameters(),
        lr=clf.lr,
        momentum=clf.momentum,
        weight_decay=clf.weight_decay,
    )
    clf._optimizer.load_state_dict(ckpt["optimizer_state"])
    return clf


def eval_accuracy(clf: ResidualNetClassifier, X: np.ndarray, y: np.ndarray) -> float:
    """Clean accuracy on an untriggered evaluation set."""
    y = check_labels(np.asarray(y), len(X))
    return float(np.mean(clf.predict(X) == y))


def eval_attack_success(
    clf: ResidualNetClassifier,
    X: np.ndarray,
    y: np.ndarray,
    trigger,
    target_label: int,
    quantize: bool = True,
) -> float:
    """Attack success rate: fraction of triggered inputs classified as the target.

    Samples whose true label already equals the target are excluded, so the
    rate measures induced misclassification only.  ``quantize`` routes the
    triggered images through the same 8-bit storage step used when poisoning
    the training set.
    """
    y = check_labels(np.asarray(y), len(X))
    keep = y != target_label
    if not keep.any():
        raise ValueError(
            "attack success is undefined: every evaluation sample already has "
            "the target label"
        )
    X_trig = triggered_inputs(X[keep], trigger, quantize=quantize)
    preds = clf.predict(X_trig)
    return float(np.mean(preds == target_label))


def write_history_csv(history: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["epoch", "loss", "accuracy", "lr", "seconds"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in fields})
    return path
